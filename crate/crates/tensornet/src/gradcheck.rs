//! Central finite-difference checks of layer and loss gradients.

use crate::{Layer, LayerSpec, Mode, Result, Scalar, Tensor};
use rand::Rng;

/// `|a - b| / max(|a|, |b|)` over whole gradient vectors; 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub input: f64,
    pub params: Vec<f64>,
}

impl GradCheck {
    pub fn max(&self) -> f64 {
        self.params.iter().copied().fold(self.input, f64::max)
    }
}

/// Compares `layer`'s backward pass against central differences of the
/// scalar `sum(r * layer(x))` for a random `r`. Each perturbed evaluation
/// runs on a fresh clone of `layer`, so dropout masks and batch statistics
/// match the analytic pass.
pub fn check_layer<T: Scalar, R: Rng + ?Sized>(
    layer: &Layer<T>,
    x: &Tensor<T>,
    mode: Mode,
    eps: f64,
    rng: &mut R,
) -> Result<GradCheck> {
    let mut l = layer.clone();
    let y = l.forward(x, mode)?;
    let r: Tensor<T> = Tensor::randn(y.shape(), 1.0, rng);
    l.params_mut().into_iter().for_each(|p| p.zero_grad());
    let dx = l.backward(&r)?;
    let analytic_params: Vec<Vec<f64>> =
        l.params_mut().iter().map(|p| p.grad.data().iter().map(|v| v.f64()).collect()).collect();

    let objective = |layer: &Layer<T>, input: &Tensor<T>| -> Result<f64> {
        let mut c = layer.clone();
        let out = c.forward(input, mode)?;
        Ok(out.data().iter().zip(r.data()).map(|(a, b)| a.f64() * b.f64()).sum())
    };

    let mut fd_input = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp.data_mut()[i] = x.data()[i] + T::of(eps);
        xm.data_mut()[i] = x.data()[i] - T::of(eps);
        fd_input.push((objective(layer, &xp)? - objective(layer, &xm)?) / (2.0 * eps));
    }
    let input = relative_error(&dx.data().iter().map(|v| v.f64()).collect::<Vec<_>>(), &fd_input);

    let mut params = Vec::new();
    let count = layer.clone().params_mut().len();
    for (pi, analytic) in analytic_params.iter().enumerate().take(count) {
        let mut fd = Vec::with_capacity(analytic.len());
        for j in 0..analytic.len() {
            let shifted = |delta: f64| -> Result<f64> {
                let mut c = layer.clone();
                {
                    let mut ps = c.params_mut();
                    let v = &mut ps[pi].value.data_mut()[j];
                    *v = *v + T::of(delta);
                }
                objective(&c, x)
            };
            fd.push((shifted(eps)? - shifted(-eps)?) / (2.0 * eps));
        }
        params.push(relative_error(analytic, &fd));
    }
    Ok(GradCheck { input, params })
}

/// Relative error of a loss gradient `f(x) -> (value, d value / dx)`.
pub fn check_loss<T: Scalar>(f: impl Fn(&Tensor<T>) -> (T, Tensor<T>), x: &Tensor<T>, eps: f64) -> f64 {
    let (_, g) = f(x);
    let fd: Vec<f64> = (0..x.len())
        .map(|i| {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.data_mut()[i] = x.data()[i] + T::of(eps);
            xm.data_mut()[i] = x.data()[i] - T::of(eps);
            (f(&xp).0.f64() - f(&xm).0.f64()) / (2.0 * eps)
        })
        .collect();
    relative_error(&g.data().iter().map(|v| v.f64()).collect::<Vec<_>>(), &fd)
}

/// One layer configuration of the standard gradient-check suite.
#[derive(Debug, Clone, Copy)]
pub struct Case {
    pub name: &'static str,
    pub spec: LayerSpec,
    pub input: [usize; 4],
    pub mode: Mode,
}

/// Every layer kind used by the predictors, on small inputs.
pub fn standard_cases() -> Vec<Case> {
    let case = |name, spec, input, mode| Case { name, spec, input, mode };
    vec![
        case("conv 4x4/2", LayerSpec::down(2, 3), [1, 2, 8, 8], Mode::Train),
        case("conv 3x3/1", LayerSpec::Conv { in_ch: 2, out_ch: 2, kernel: 3, stride: 1, pad: 1 }, [2, 2, 4, 4], Mode::Train),
        case("conv 4x4 valid", LayerSpec::Conv { in_ch: 3, out_ch: 1, kernel: 4, stride: 1, pad: 0 }, [2, 3, 4, 4], Mode::Train),
        case("conv_transpose 4x4/2", LayerSpec::up(3, 2), [1, 3, 4, 4], Mode::Train),
        case("batch_norm train", LayerSpec::BatchNorm { channels: 3 }, [2, 3, 3, 3], Mode::Train),
        case("batch_norm eval", LayerSpec::BatchNorm { channels: 3 }, [2, 3, 3, 3], Mode::Eval),
        case("dropout", LayerSpec::Dropout { rate: 0.5 }, [2, 2, 4, 4], Mode::Train),
        case("leaky_relu", LayerSpec::LeakyRelu { slope: 0.2 }, [1, 2, 4, 4], Mode::Train),
        case("relu", LayerSpec::Relu, [1, 2, 4, 4], Mode::Train),
        case("sigmoid", LayerSpec::Sigmoid, [1, 2, 4, 4], Mode::Train),
        case("tanh", LayerSpec::Tanh, [1, 2, 4, 4], Mode::Train),
    ]
}

/// Builds the case's layer with O(1) random parameters and an input kept at
/// least 0.1 away from the ReLU kinks.
pub fn instantiate<T: Scalar, R: Rng + ?Sized>(case: &Case, rng: &mut R) -> (Layer<T>, Tensor<T>) {
    let mut layer = Layer::new(&case.spec, rng);
    for p in layer.params_mut() {
        p.value = Tensor::randn(p.value.shape(), 0.5, rng);
    }
    if let Layer::BatchNorm(bn) = &mut layer {
        for c in 0..bn.channels {
            bn.running_mean[c] = T::of(rng.random_range(-0.5..0.5));
            bn.running_var[c] = T::of(rng.random_range(0.5..2.0));
        }
    }
    let x = Tensor::<T>::randn(&case.input, 1.0, rng).map(|v| if v >= T::zero() { v + T::of(0.1) } else { v - T::of(0.1) });
    (layer, x)
}

/// Worst relative error per case over `trials` random draws.
pub fn run_suite<T: Scalar, R: Rng + ?Sized>(trials: usize, eps: f64, rng: &mut R) -> Result<Vec<(&'static str, f64)>> {
    standard_cases()
        .iter()
        .map(|case| {
            let mut worst = 0.0f64;
            for _ in 0..trials {
                let (layer, x) = instantiate::<T, R>(case, rng);
                worst = worst.max(check_layer(&layer, &x, case.mode, eps, rng)?.max());
            }
            Ok((case.name, worst))
        })
        .collect()
}
