use kbp_tensornet::gradcheck::{check_loss, run_suite};
use kbp_tensornet::{bce_loss, l1_loss, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_layer_matches_finite_differences_in_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for (name, err) in run_suite::<f64, _>(20, 1e-5, &mut rng).unwrap() {
        assert!(err < 1e-6, "{name}: {err:e}");
    }
}

#[test]
fn every_layer_matches_finite_differences_in_f32() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for (name, err) in run_suite::<f32, _>(20, 2e-2, &mut rng).unwrap() {
        assert!(err < 1e-3, "{name}: {err:e}");
    }
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for _ in 0..20 {
        let x: Tensor<f64> = Tensor::randn(&[1, 1, 4, 4], 1.0, &mut rng);
        let t: Tensor<f64> = Tensor::randn(&[1, 1, 4, 4], 1.0, &mut rng);
        assert!(check_loss(|p| l1_loss(p, &t).unwrap(), &x, 1e-6) < 1e-6);
        let p = x.map(|v| 0.1 + 0.8 / (1.0 + (-v).exp()));
        for label in [0.0, 1.0] {
            assert!(check_loss(|q| bce_loss(q, label), &p, 1e-6) < 1e-6);
        }
    }
}
