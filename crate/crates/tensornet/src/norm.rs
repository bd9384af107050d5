use crate::{Mode, Param, Result, Scalar, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization over `N, H, W`.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T: Scalar = f32> {
    pub channels: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    /// Unbiased running variance.
    pub running_var: Vec<T>,
    cache: Option<Cache<T>>,
}

#[derive(Debug, Clone)]
struct Cache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::new(Tensor::full(&[channels], T::one())),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let [n, c, h, w] = x.nchw()?;
        if c != self.channels {
            return Err(TensorError::Shape { expected: format!("[N, {}, H, W]", self.channels), actual: x.shape().to_vec() });
        }
        let plane = h * w;
        let m = n * plane;
        let eps = T::of(BN_EPS);
        let mut xhat = x.clone();
        let mut out = x.clone();
        let mut inv_std = vec![T::zero(); c];
        for ch in 0..c {
            let starts: Vec<usize> = (0..n).map(|b| (b * c + ch) * plane).collect();
            let (mean, var) = match mode {
                Mode::Train => {
                    if m < 2 {
                        return Err(TensorError::BatchTooSmall(m));
                    }
                    let sum: T = starts.iter().flat_map(|&s| &x.data()[s..s + plane]).copied().sum();
                    let mean = sum / T::of(m as f64);
                    let ss: T = starts.iter().flat_map(|&s| &x.data()[s..s + plane]).map(|&v| (v - mean) * (v - mean)).sum();
                    let var = ss / T::of(m as f64);
                    let mom = T::of(BN_MOMENTUM);
                    self.running_mean[ch] = (T::one() - mom) * self.running_mean[ch] + mom * mean;
                    let unbiased = ss / T::of((m - 1) as f64);
                    self.running_var[ch] = (T::one() - mom) * self.running_var[ch] + mom * unbiased;
                    (mean, var)
                }
                Mode::Eval => (self.running_mean[ch], self.running_var[ch]),
            };
            let is = T::one() / (var + eps).sqrt();
            inv_std[ch] = is;
            let (g, b) = (self.gamma.value.data()[ch], self.beta.value.data()[ch]);
            for &s in &starts {
                for i in s..s + plane {
                    let xh = (x.data()[i] - mean) * is;
                    xhat.data_mut()[i] = xh;
                    out.data_mut()[i] = g * xh + b;
                }
            }
        }
        self.cache = Some(Cache { xhat, inv_std, batch_stats: mode == Mode::Train });
        Ok(out)
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let Cache { xhat, inv_std, batch_stats } = self.cache.take().ok_or(TensorError::StaleCache("batch_norm"))?;
        g.expect_shape(xhat.shape())?;
        let [n, c, h, w] = xhat.nchw()?;
        let plane = h * w;
        let m = T::of((n * plane) as f64);
        let mut dx = Tensor::zeros(xhat.shape());
        for ch in 0..c {
            let idx = || (0..n).flat_map(move |b| (b * c + ch) * plane..(b * c + ch + 1) * plane);
            let gamma = self.gamma.value.data()[ch];
            let sum_g: T = idx().map(|i| g.data()[i]).sum();
            let sum_gx: T = idx().map(|i| g.data()[i] * xhat.data()[i]).sum();
            self.gamma.grad.data_mut()[ch] = self.gamma.grad.data()[ch] + sum_gx;
            self.beta.grad.data_mut()[ch] = self.beta.grad.data()[ch] + sum_g;
            let k = gamma * inv_std[ch];
            for i in idx() {
                dx.data_mut()[i] = if batch_stats {
                    k * (g.data()[i] - sum_g / m - xhat.data()[i] * sum_gx / m)
                } else {
                    k * g.data()[i]
                };
            }
        }
        Ok(dx)
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.gamma, &mut self.beta]
    }
}

/// Inverted dropout: survivors are scaled by `1 / (1 - rate)` in train mode;
/// eval mode is the identity.
#[derive(Debug, Clone)]
pub struct Dropout<T: Scalar = f32> {
    pub rate: f64,
    rng: ChaCha8Rng,
    mask: Option<Option<Vec<T>>>,
}

impl<T: Scalar> Dropout<T> {
    pub fn new(rate: f64, seed: u64) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate {rate} not in [0, 1)");
        Self { rate, rng: ChaCha8Rng::seed_from_u64(seed), mask: None }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match mode {
            Mode::Eval => {
                self.mask = Some(None);
                Ok(x.clone())
            }
            Mode::Train => {
                let keep = T::of(1.0 / (1.0 - self.rate));
                let mask: Vec<T> = (0..x.len())
                    .map(|_| if self.rng.random::<f64>() < self.rate { T::zero() } else { keep })
                    .collect();
                let mut y = x.clone();
                y.data_mut().iter_mut().zip(&mask).for_each(|(v, m)| *v = *v * *m);
                self.mask = Some(Some(mask));
                Ok(y)
            }
        }
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        match self.mask.take().ok_or(TensorError::StaleCache("dropout"))? {
            None => Ok(g.clone()),
            Some(mask) => {
                if mask.len() != g.len() {
                    return Err(TensorError::Shape { expected: format!("{} values", mask.len()), actual: g.shape().to_vec() });
                }
                let mut d = g.clone();
                d.data_mut().iter_mut().zip(&mask).for_each(|(v, m)| *v = *v * *m);
                Ok(d)
            }
        }
    }
}
