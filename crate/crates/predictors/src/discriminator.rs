use crate::unet::LEAKY_SLOPE;
use crate::{PredictorError, Result};
use kbp_tensornet::{LayerSpec, Mode, Param, Sequential, Tensor};
use rand::Rng;

/// Four stride-2 convolutions (batch norm after the second to fourth, leaky
/// ReLU after each), then a convolution spanning the remaining `S/16 x S/16`
/// map down to one sigmoid output per sample.
///
/// By default the input is the dose slice alone. With `conditional` the
/// contoured image is stacked in front of the dose as three extra channels.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub size: usize,
    pub conditional: bool,
    pub net: Sequential,
}

impl Discriminator {
    pub fn new<R: Rng + ?Sized>(size: usize, base: usize, conditional: bool, rng: &mut R) -> Result<Self> {
        if size < 16 || !size.is_multiple_of(16) || base == 0 {
            return Err(PredictorError::InvalidConfig(format!("discriminator size {size} / base {base}")));
        }
        let lrelu = LayerSpec::LeakyRelu { slope: LEAKY_SLOPE };
        let mut specs = Vec::new();
        let mut prev = if conditional { 4 } else { 1 };
        for (i, c) in [base, 2 * base, 4 * base, 8 * base].into_iter().enumerate() {
            specs.push(LayerSpec::down(prev, c));
            if i > 0 {
                specs.push(LayerSpec::BatchNorm { channels: c });
            }
            specs.push(lrelu);
            prev = c;
        }
        specs.push(LayerSpec::Conv { in_ch: prev, out_ch: 1, kernel: size / 16, stride: 1, pad: 0 });
        specs.push(LayerSpec::Sigmoid);
        Ok(Self { size, conditional, net: Sequential::new(specs, rng) })
    }

    fn input(&self, image: &Tensor, dose: &Tensor) -> Result<Tensor> {
        Ok(if self.conditional { Tensor::concat_channels(image, dose)? } else { dose.clone() })
    }

    /// Probabilities `[N, 1, 1, 1]` that each dose slice is real.
    pub fn forward(&mut self, image: &Tensor, dose: &Tensor, mode: Mode) -> Result<Tensor> {
        let x = self.input(image, dose)?;
        Ok(self.net.forward(&x, mode)?)
    }

    /// Gradient with respect to the dose input.
    pub fn backward(&mut self, g: &Tensor) -> Result<Tensor> {
        let gx = self.net.backward(g)?;
        Ok(if self.conditional { gx.split_channels(3)?.1 } else { gx })
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.net.params_mut()
    }

    pub fn zero_grad(&mut self) {
        self.net.zero_grad();
    }

    pub fn state(&self) -> Vec<(String, Tensor)> {
        self.net.state("disc")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_probability_per_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for conditional in [false, true] {
            let mut d = Discriminator::new(32, 4, conditional, &mut rng).unwrap();
            let img = Tensor::randn(&[3, 3, 32, 32], 1.0, &mut rng);
            let dose = Tensor::randn(&[3, 1, 32, 32], 1.0, &mut rng);
            let p = d.forward(&img, &dose, Mode::Train).unwrap();
            assert_eq!(p.shape(), &[3, 1, 1, 1]);
            assert!(p.data().iter().all(|v| *v > 0.0 && *v < 1.0));
            let g = d.backward(&Tensor::full(&[3, 1, 1, 1], 1.0)).unwrap();
            assert_eq!(g.shape(), dose.shape());
        }
    }
}
