use crate::{PredictorError, Result};
use kbp_tensornet::{LayerSpec, Mode, Param, Sequential, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    /// Slice size `S`; must be divisible by 16.
    pub size: usize,
    /// Channels after the first downsampling layer.
    pub base: usize,
    pub dropout: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self { size: 64, base: 16, dropout: 0.5 }
    }
}

/// Encoder of four stride-2 convolutions (conv, leaky ReLU, batch norm), two
/// size-preserving 3x3 bottleneck convolutions, and four stride-2
/// deconvolutions (deconv, dropout, ReLU, batch norm) whose inputs carry the
/// matching encoder output. The last deconvolution emits one tanh channel.
#[derive(Debug, Clone)]
pub struct UNet {
    pub config: UNetConfig,
    pub down: Vec<Sequential>,
    pub bottleneck: Vec<Sequential>,
    pub up: Vec<Sequential>,
    skip_channels: Vec<usize>,
}

impl UNet {
    pub fn new<R: Rng + ?Sized>(config: UNetConfig, rng: &mut R) -> Result<Self> {
        if config.size < 16 || !config.size.is_multiple_of(16) || config.base == 0 {
            return Err(PredictorError::InvalidConfig(format!(
                "U-net needs a slice size divisible by 16 and base >= 1, got {} / {}",
                config.size, config.base
            )));
        }
        let b = config.base;
        let chans = [b, 2 * b, 4 * b, 8 * b];
        let lrelu = LayerSpec::LeakyRelu { slope: LEAKY_SLOPE };
        let mut down = Vec::new();
        let mut prev = 3;
        for &c in &chans {
            down.push(Sequential::new(vec![LayerSpec::down(prev, c), lrelu, LayerSpec::BatchNorm { channels: c }], rng));
            prev = c;
        }
        let bottleneck = (0..2)
            .map(|_| {
                let conv = LayerSpec::Conv { in_ch: prev, out_ch: prev, kernel: 3, stride: 1, pad: 1 };
                Sequential::new(vec![conv, lrelu, LayerSpec::BatchNorm { channels: prev }], rng)
            })
            .collect();
        let mut up = Vec::new();
        for (j, &skip) in chans.iter().rev().enumerate() {
            let input = prev + skip;
            let specs = if j == 3 {
                vec![LayerSpec::up(input, 1), LayerSpec::Tanh]
            } else {
                let out = chans[2 - j];
                vec![
                    LayerSpec::up(input, out),
                    LayerSpec::Dropout { rate: config.dropout },
                    LayerSpec::Relu,
                    LayerSpec::BatchNorm { channels: out },
                ]
            };
            up.push(Sequential::new(specs, rng));
            prev = if j == 3 { 1 } else { chans[2 - j] };
        }
        Ok(Self { config, down, bottleneck, up, skip_channels: chans.to_vec() })
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.forward_with(x, mode, None)
    }

    /// Forward pass; `zero_skip = Some(i)` replaces the output of down layer
    /// `i` with zeros on its skip path.
    pub fn forward_with(&mut self, x: &Tensor, mode: Mode, zero_skip: Option<usize>) -> Result<Tensor> {
        let [_, c, h, w] = x.nchw()?;
        let s = self.config.size;
        if (c, h, w) != (3, s, s) {
            return Err(kbp_tensornet::TensorError::Shape { expected: format!("[N, 3, {s}, {s}]"), actual: x.shape().to_vec() }.into());
        }
        let mut skips = Vec::with_capacity(4);
        let mut hcur = x.clone();
        for (i, d) in self.down.iter_mut().enumerate() {
            hcur = d.forward(&hcur, mode)?;
            skips.push(if zero_skip == Some(i) { Tensor::zeros(hcur.shape()) } else { hcur.clone() });
        }
        for b in &mut self.bottleneck {
            hcur = b.forward(&hcur, mode)?;
        }
        for (j, u) in self.up.iter_mut().enumerate() {
            let cat = Tensor::concat_channels(&hcur, &skips[3 - j])?;
            hcur = u.forward(&cat, mode)?;
        }
        Ok(hcur)
    }

    /// Backpropagates `g` (gradient of the loss with respect to the output),
    /// accumulating parameter gradients. Returns the input gradient.
    pub fn backward(&mut self, g: &Tensor) -> Result<Tensor> {
        let mut skip_grads: Vec<Option<Tensor>> = vec![None; 4];
        let mut gcur = g.clone();
        for (j, u) in self.up.iter_mut().enumerate().rev() {
            let gin = u.backward(&gcur)?;
            let skip_c = self.skip_channels[3 - j];
            let main_c = gin.shape()[1] - skip_c;
            let (gm, gs) = gin.split_channels(main_c)?;
            skip_grads[3 - j] = Some(gs);
            gcur = gm;
        }
        for b in self.bottleneck.iter_mut().rev() {
            gcur = b.backward(&gcur)?;
        }
        for (i, d) in self.down.iter_mut().enumerate().rev() {
            gcur.add_assign(skip_grads[i].as_ref().expect("set above"))?;
            gcur = d.backward(&gcur)?;
        }
        Ok(gcur)
    }

    fn blocks_mut(&mut self) -> impl Iterator<Item = &mut Sequential> {
        self.down.iter_mut().chain(self.bottleneck.iter_mut()).chain(self.up.iter_mut())
    }

    fn blocks(&self) -> Vec<(String, &Sequential)> {
        let mut out = Vec::new();
        for (prefix, v) in [("down", &self.down), ("bottleneck", &self.bottleneck), ("up", &self.up)] {
            out.extend(v.iter().enumerate().map(|(i, s)| (format!("{prefix}{i}"), s)));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.blocks_mut().flat_map(|b| b.params_mut()).collect()
    }

    pub fn zero_grad(&mut self) {
        self.blocks_mut().for_each(Sequential::zero_grad);
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.parameter_count()).sum()
    }

    /// Every parameter and batch-norm buffer, named `{block}.{layer}.{tensor}`.
    pub fn state(&self) -> Vec<(String, Tensor)> {
        self.blocks().iter().flat_map(|(name, b)| b.state(name)).collect()
    }

    pub fn load_state(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let names: Vec<String> = self.blocks().into_iter().map(|(n, _)| n).collect();
        for (name, block) in names.iter().zip(self.blocks_mut()) {
            block.load_state(name, |k| tensors.iter().find(|(n, _)| n == k).map(|(_, t)| t.clone()))?;
        }
        Ok(())
    }
}

/// Write the generator as a named-tensor archive whose manifest records the
/// configuration.
pub fn save_generator<W: std::io::Write>(w: W, net: &UNet) -> Result<()> {
    let manifest = serde_json::json!({ "model": "unet", "config": net.config });
    Ok(kbp_tensornet::archive::write_archive(w, &manifest, &net.state())?)
}

pub fn load_generator<R: std::io::Read>(r: R) -> Result<UNet> {
    let (manifest, tensors) = kbp_tensornet::archive::read_archive(r)?;
    if manifest.get("model").and_then(|m| m.as_str()) != Some("unet") {
        return Err(PredictorError::Checkpoint("archive does not hold a U-net".into()));
    }
    let config: UNetConfig = serde_json::from_value(manifest["config"].clone())
        .map_err(|e| PredictorError::Checkpoint(e.to_string()))?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut net = UNet::new(config, &mut rng)?;
    net.load_state(&tensors)?;
    Ok(net)
}
