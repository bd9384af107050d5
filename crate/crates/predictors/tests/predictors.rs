use kbp_core::dosecalc::{influence_matrix, make_beams, DoseConfig};
use kbp_core::phantom::{distance_to_surface, generate_phantom, Phantom, PhantomSpec, StructureId};
use kbp_core::planopt::template_dose;
use kbp_core::InfluenceMatrix;
use kbp_predictors::*;
use kbp_tensornet::Mode;

fn small_cfg(epochs: usize, lambda: f64) -> TrainConfig {
    TrainConfig {
        epochs,
        lambda,
        batch_size: 4,
        seed: 3,
        unet: UNetConfig { size: 32, base: 4, dropout: 0.5 },
        ..Default::default()
    }
}

fn slices(seeds: std::ops::Range<u64>, size: usize) -> Vec<SlicePair> {
    seeds
        .flat_map(|s| {
            let p = generate_phantom(s, &PhantomSpec::default()).unwrap();
            let d = template_dose(&p, 10.0).unwrap();
            extract_slices(&p, &d, size).unwrap()
        })
        .collect()
}

fn patient(seed: u64) -> (Phantom, InfluenceMatrix) {
    let p = generate_phantom(seed, &PhantomSpec::default()).unwrap();
    let cfg = DoseConfig::default();
    let beams = make_beams(&cfg, &p).unwrap();
    let a = influence_matrix(&p.grid, &beams, &cfg).unwrap();
    (p, a)
}

#[test]
fn generator_loss_decomposes_into_adversarial_and_l1_terms() {
    let train = slices(0..3, 32);
    let out = gan_train(&train, &[], &small_cfg(2, 90.0)).unwrap();
    assert_eq!(out.log.steps.len(), 2 * train.len().div_ceil(4));
    for s in &out.log.steps {
        let want = s.g_adv.unwrap() + 90.0 * s.g_l1;
        assert!((s.g_total - want).abs() <= 1e-5, "{s:?}");
    }
    let zero = gan_train(&train, &[], &small_cfg(1, 0.0)).unwrap();
    assert!(zero.log.steps.iter().all(|s| s.g_total == s.g_adv.unwrap()));
}

#[test]
fn training_is_bit_reproducible_and_the_discriminator_stays_a_probability() {
    let train = slices(0..2, 32);
    let a = gan_train(&train, &[], &small_cfg(2, 90.0)).unwrap();
    let b = gan_train(&train, &[], &small_cfg(2, 90.0)).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(a.generator.state(), b.generator.state());

    let mut d = a.discriminator.clone().unwrap();
    let (x, y) = stack_batch(&train, &[0, 1, 2]).unwrap();
    let p = d.forward(&x, &y, Mode::Eval).unwrap();
    assert!(p.data().iter().all(|v| *v > 0.0 && *v < 1.0));
}

#[test]
fn predictions_ignore_the_discriminator_and_are_deterministic() {
    let train = slices(0..2, 32);
    let mut out = gan_train(&train, &[], &small_cfg(1, 90.0)).unwrap();
    let p = generate_phantom(9, &PhantomSpec::default()).unwrap();
    let first = predict_volume(&mut out.generator, &p).unwrap();
    if let Some(d) = out.discriminator.as_mut() {
        for param in d.params_mut() {
            param.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let second = predict_volume(&mut out.generator, &p).unwrap();
    assert_eq!(first, second);
    assert_eq!(first.dims, p.dims());
    assert!(first.values.iter().all(|v| (0.0..=D_MAX).contains(v)));
}

#[test]
fn cnn_shares_the_generator_architecture_and_reduces_l1() {
    let train = slices(0..4, 32);
    let val = slices(10..11, 32);
    let cfg = small_cfg(4, 90.0);
    let cnn = cnn_train(&train, &val, &cfg).unwrap();
    let gan = gan_train(&train, &val, &small_cfg(1, 90.0)).unwrap();
    assert_eq!(cnn.generator.parameter_count(), gan.generator.parameter_count());
    assert!(cnn.discriminator.is_none());
    let first = cnn.log.epochs.first().unwrap().g_l1;
    let last = cnn.log.epochs.last().unwrap().g_l1;
    assert!(last < first, "{first} -> {last}");
    assert!(cnn.log.final_val_l1().unwrap() < cnn.log.initial_val_l1.unwrap());
    assert!(cnn.log.to_csv().starts_with("epoch,d_loss,g_adv,g_l1,ratio,val_l1\n0,,,,,"));
}

#[test]
fn empty_datasets_are_rejected() {
    assert!(matches!(gan_train(&[], &[], &small_cfg(1, 90.0)), Err(PredictorError::EmptyDataset)));
    assert!(matches!(cnn_train(&[], &[], &small_cfg(1, 90.0)), Err(PredictorError::EmptyDataset)));
}

#[test]
fn rf_features_match_their_definitions() {
    let (p, a) = patient(4);
    let rows = rf_feature_matrix(&p, &a).unwrap();
    assert_eq!(rows.len(), p.grid.len());
    assert!(rows.iter().all(|r| r.len() == 10));
    let ptv70 = p.mask(StructureId::Ptv70);
    for &v in &ptv70 {
        assert_eq!(rows[v][8], 0.0);
        assert_eq!(rows[v][0], StructureId::Ptv70.code() as f64);
    }
    // Dense row sums by walking every column.
    let mut dense = vec![0.0; p.grid.len()];
    for b in 0..a.num_beamlets() {
        for (v, x) in a.column(b) {
            dense[v] += x;
        }
    }
    let larynx = distance_to_surface(&p.grid, StructureId::Larynx).unwrap();
    for v in (0..p.grid.len()).step_by(97) {
        assert!((rows[v][9] - dense[v]).abs() <= 1e-9 * dense[v].max(1.0));
        assert_eq!(rows[v][3], larynx[v]);
        let [_, y, z] = p.grid.coords(v);
        assert_eq!((rows[v][1], rows[v][2]), (y as f64 * p.spacing()[1], z as f64));
    }
    assert_eq!(extract_rf_features(&p, &a, ptv70[0]).unwrap(), rows[ptv70[0]]);
}

#[test]
fn random_forest_beats_the_mean_predictor() {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for seed in 0..3 {
        let (p, a) = patient(seed);
        let d = template_dose(&p, 10.0).unwrap();
        x.extend(rf_feature_matrix(&p, &a).unwrap());
        y.extend(d.values);
    }
    let forest = rf_train(&x, &y, &ForestConfig::default()).unwrap();
    assert_eq!(forest.trees.len(), 10);
    let (p, a) = patient(7);
    let truth = template_dose(&p, 10.0).unwrap();
    let pred = predict_volume_rf(&forest, &p, &a).unwrap();
    let mean = truth.values.iter().sum::<f64>() / truth.values.len() as f64;
    let var = truth.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / truth.values.len() as f64;
    let mse = pred.values.iter().zip(&truth.values).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / truth.values.len() as f64;
    assert!(mse < var, "mse {mse} var {var}");
}
