use crate::activation::{LeakyRelu, Relu, Sigmoid, Tanh};
use crate::conv::{Conv2d, ConvTranspose2d};
use crate::norm::{BatchNorm2d, Dropout};
use crate::{Mode, Param, Result, Scalar, Tensor, TensorError};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Standard deviation of the centred normal used for conv weights.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize },
    ConvTranspose { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize },
    BatchNorm { channels: usize },
    Dropout { rate: f64 },
    LeakyRelu { slope: f64 },
    Relu,
    Sigmoid,
    Tanh,
}

impl LayerSpec {
    /// 4x4, stride 2, padding 1: halves the spatial extent.
    pub fn down(in_ch: usize, out_ch: usize) -> Self {
        LayerSpec::Conv { in_ch, out_ch, kernel: 4, stride: 2, pad: 1 }
    }

    /// 4x4, stride 2, padding 1 transposed: doubles the spatial extent.
    pub fn up(in_ch: usize, out_ch: usize) -> Self {
        LayerSpec::ConvTranspose { in_ch, out_ch, kernel: 4, stride: 2, pad: 1 }
    }
}

#[derive(Debug, Clone)]
pub enum Layer<T: Scalar = f32> {
    Conv(Conv2d<T>),
    ConvTranspose(ConvTranspose2d<T>),
    BatchNorm(BatchNorm2d<T>),
    Dropout(Dropout<T>),
    LeakyRelu(LeakyRelu<T>),
    Relu(Relu<T>),
    Sigmoid(Sigmoid<T>),
    Tanh(Tanh<T>),
}

impl<T: Scalar> Layer<T> {
    pub fn new<R: Rng + ?Sized>(spec: &LayerSpec, rng: &mut R) -> Self {
        match *spec {
            LayerSpec::Conv { in_ch, out_ch, kernel, stride, pad } => {
                Layer::Conv(Conv2d::new(in_ch, out_ch, kernel, stride, pad, INIT_STD, rng))
            }
            LayerSpec::ConvTranspose { in_ch, out_ch, kernel, stride, pad } => {
                Layer::ConvTranspose(ConvTranspose2d::new(in_ch, out_ch, kernel, stride, pad, INIT_STD, rng))
            }
            LayerSpec::BatchNorm { channels } => Layer::BatchNorm(BatchNorm2d::new(channels)),
            LayerSpec::Dropout { rate } => Layer::Dropout(Dropout::new(rate, rng.next_u64())),
            LayerSpec::LeakyRelu { slope } => Layer::LeakyRelu(LeakyRelu::new(slope)),
            LayerSpec::Relu => Layer::Relu(Relu::new()),
            LayerSpec::Sigmoid => Layer::Sigmoid(Sigmoid::new()),
            LayerSpec::Tanh => Layer::Tanh(Tanh::new()),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(l) => l.forward(x),
            Layer::ConvTranspose(l) => l.forward(x),
            Layer::BatchNorm(l) => l.forward(x, mode),
            Layer::Dropout(l) => l.forward(x, mode),
            Layer::LeakyRelu(l) => Ok(l.forward(x)),
            Layer::Relu(l) => Ok(l.forward(x)),
            Layer::Sigmoid(l) => Ok(l.forward(x)),
            Layer::Tanh(l) => Ok(l.forward(x)),
        }
    }

    /// Propagates `g` and accumulates parameter gradients.
    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(l) => l.backward(g),
            Layer::ConvTranspose(l) => l.backward(g),
            Layer::BatchNorm(l) => l.backward(g),
            Layer::Dropout(l) => l.backward(g),
            Layer::LeakyRelu(l) => l.backward(g),
            Layer::Relu(l) => l.backward(g),
            Layer::Sigmoid(l) => l.backward(g),
            Layer::Tanh(l) => l.backward(g),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Layer::Conv(l) => l.params_mut().into(),
            Layer::ConvTranspose(l) => l.params_mut().into(),
            Layer::BatchNorm(l) => l.params_mut().into(),
            _ => Vec::new(),
        }
    }

    /// Named parameters and buffers.
    pub fn state(&self) -> Vec<(&'static str, Tensor<T>)> {
        match self {
            Layer::Conv(l) => vec![("weight", l.weight.value.clone()), ("bias", l.bias.value.clone())],
            Layer::ConvTranspose(l) => vec![("weight", l.weight.value.clone()), ("bias", l.bias.value.clone())],
            Layer::BatchNorm(l) => vec![
                ("gamma", l.gamma.value.clone()),
                ("beta", l.beta.value.clone()),
                ("running_mean", Tensor::new(&[l.channels], l.running_mean.clone()).expect("channel count")),
                ("running_var", Tensor::new(&[l.channels], l.running_var.clone()).expect("channel count")),
            ],
            _ => Vec::new(),
        }
    }

    pub fn load_state(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        let slot: &mut Vec<T> = match (self, name) {
            (Layer::Conv(l), "weight") => return set(&mut l.weight, t),
            (Layer::Conv(l), "bias") => return set(&mut l.bias, t),
            (Layer::ConvTranspose(l), "weight") => return set(&mut l.weight, t),
            (Layer::ConvTranspose(l), "bias") => return set(&mut l.bias, t),
            (Layer::BatchNorm(l), "gamma") => return set(&mut l.gamma, t),
            (Layer::BatchNorm(l), "beta") => return set(&mut l.beta, t),
            (Layer::BatchNorm(l), "running_mean") => &mut l.running_mean,
            (Layer::BatchNorm(l), "running_var") => &mut l.running_var,
            (_, other) => return Err(TensorError::Archive(format!("layer has no tensor named {other}"))),
        };
        if t.len() != slot.len() {
            return Err(TensorError::Shape { expected: format!("[{}]", slot.len()), actual: t.shape().to_vec() });
        }
        *slot = t.into_data();
        Ok(())
    }
}

fn set<T: Scalar>(p: &mut Param<T>, t: Tensor<T>) -> Result<()> {
    t.expect_shape(p.value.shape())?;
    p.value = t;
    Ok(())
}

/// A chain of layers.
#[derive(Debug, Clone)]
pub struct Sequential<T: Scalar = f32> {
    pub specs: Vec<LayerSpec>,
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new<R: Rng + ?Sized>(specs: Vec<LayerSpec>, rng: &mut R) -> Self {
        let layers = specs.iter().map(|s| Layer::new(s, rng)).collect();
        Self { specs, layers }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for l in &mut self.layers {
            h = l.forward(&h, mode)?;
        }
        Ok(h)
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = g.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g)?;
        }
        Ok(g)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    pub fn parameter_count(&self) -> usize {
        let mut c = self.clone();
        c.params_mut().iter().map(|p| p.value.len()).sum()
    }

    /// Tensors named `{prefix}.{layer index}.{name}`.
    pub fn state(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.state().into_iter().map(move |(n, t)| (format!("{prefix}.{i}.{n}"), t)))
            .collect()
    }

    /// Loads every tensor of [`Sequential::state`] from `lookup`.
    pub fn load_state(&mut self, prefix: &str, mut lookup: impl FnMut(&str) -> Option<Tensor<T>>) -> Result<()> {
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (n, _) in l.state() {
                let key = format!("{prefix}.{i}.{n}");
                let t = lookup(&key).ok_or_else(|| TensorError::Archive(format!("missing tensor {key}")))?;
                l.load_state(n, t)?;
            }
        }
        Ok(())
    }
}
