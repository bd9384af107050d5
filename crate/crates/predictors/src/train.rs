use crate::data::{pool_plane, stack_batch, SlicePair};
use crate::discriminator::Discriminator;
use crate::unet::{UNet, UNetConfig};
use crate::{PredictorError, Result};
use kbp_core::phantom::{render_contoured_slice, Phantom};
use kbp_core::DoseDistribution;
use kbp_tensornet::{bce_loss, l1_loss, Adam, AdamConfig, Mode, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the L1 term in the generator loss.
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub unet: UNetConfig,
    pub adam: AdamConfig,
    /// Stop once `|ln(G adversarial / D loss)| < 0.1` for three epochs in a row.
    pub early_stop: bool,
    /// Feed the contoured image to the discriminator as well as the dose.
    pub conditional_discriminator: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 90.0,
            epochs: 25,
            batch_size: 4,
            seed: 0,
            unet: UNetConfig::default(),
            adam: AdamConfig::default(),
            early_stop: false,
            conditional_discriminator: false,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) || self.epochs == 0 || self.batch_size == 0 {
            return Err(PredictorError::InvalidConfig(format!(
                "lambda {} epochs {} batch {}",
                self.lambda, self.epochs, self.batch_size
            )));
        }
        Ok(())
    }
}

/// Per-batch losses. For the CNN only `g_l1` and `g_total` are set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub d_loss: Option<f64>,
    pub g_adv: Option<f64>,
    pub g_l1: f64,
    /// The loss actually backpropagated through the generator.
    pub g_total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub d_loss: Option<f64>,
    pub g_adv: Option<f64>,
    pub g_l1: f64,
    /// `g_adv / d_loss`, the balance watched by the stopping heuristic.
    pub ratio: Option<f64>,
    pub val_l1: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Validation L1 of the untrained generator.
    pub initial_val_l1: Option<f64>,
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<StepLog>,
    pub stopped_early: bool,
    /// Set when a non-finite loss aborted training; the returned networks are
    /// those from the start of the failing epoch.
    pub diverged: Option<String>,
}

fn cell(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.8}")).unwrap_or_default()
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,d_loss,g_adv,g_l1,ratio,val_l1\n");
        if let Some(v) = self.initial_val_l1 {
            let _ = writeln!(s, "0,,,,,{v:.8}");
        }
        for e in &self.epochs {
            let _ = writeln!(s, "{},{},{},{:.8},{},{}", e.epoch, cell(e.d_loss), cell(e.g_adv), e.g_l1, cell(e.ratio), cell(e.val_l1));
        }
        s
    }

    pub fn final_val_l1(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.val_l1).or(self.initial_val_l1)
    }
}

pub struct TrainOutcome {
    pub generator: UNet,
    pub discriminator: Option<Discriminator>,
    pub log: TrainLog,
}

/// Mean absolute error, in normalized units, of eval-mode predictions.
pub fn mean_l1(generator: &mut UNet, pairs: &[SlicePair], batch_size: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Err(PredictorError::EmptyDataset);
    }
    let idx: Vec<usize> = (0..pairs.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = stack_batch(pairs, chunk)?;
        let pred = generator.forward(&x, Mode::Eval)?;
        total += l1_loss(&pred, &y)?.0 as f64 * chunk.len() as f64;
    }
    Ok(total / pairs.len() as f64)
}

fn finite(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn scale(t: &Tensor, k: f32) -> Tensor {
    t.map(|v| v * k)
}

/// Adversarial training of the U-net against the discriminator with the
/// generator loss `BCE(D(G(x)), 1) + lambda * L1(G(x), y)`.
pub fn gan_train(train: &[SlicePair], val: &[SlicePair], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(PredictorError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut g = UNet::new(cfg.unet, &mut rng)?;
    let mut d = Discriminator::new(cfg.unet.size, cfg.unet.base, cfg.conditional_discriminator, &mut rng)?;
    let mut opt_g = Adam::new(cfg.adam);
    let mut opt_d = Adam::new(cfg.adam);
    let mut log = TrainLog::default();
    if !val.is_empty() {
        log.initial_val_l1 = Some(mean_l1(&mut g, val, cfg.batch_size)?);
    }
    let lambda = cfg.lambda as f32;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut balanced = 0;
    'epochs: for epoch in 1..=cfg.epochs {
        let snapshot = (g.clone(), d.clone());
        order.shuffle(&mut rng);
        let (mut dl, mut ga, mut gl) = (Vec::new(), Vec::new(), Vec::new());
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = stack_batch(train, batch)?;
            let fake = g.forward(&x, Mode::Train)?;

            d.zero_grad();
            let p_real = d.forward(&x, &y, Mode::Train)?;
            let (l_real, g_real) = bce_loss(&p_real, 1.0);
            d.backward(&scale(&g_real, 0.5))?;
            let p_fake = d.forward(&x, &fake, Mode::Train)?;
            let (l_fake, g_fake) = bce_loss(&p_fake, 0.0);
            d.backward(&scale(&g_fake, 0.5))?;
            let d_loss = 0.5 * (l_real as f64 + l_fake as f64);
            opt_d.step(&mut d.params_mut());

            g.zero_grad();
            let p = d.forward(&x, &fake, Mode::Train)?;
            let (adv, g_adv) = bce_loss(&p, 1.0);
            let mut grad = d.backward(&g_adv)?;
            d.zero_grad();
            let (l1, g_l1) = l1_loss(&fake, &y)?;
            if lambda != 0.0 {
                grad.add_assign(&scale(&g_l1, lambda))?;
            }
            let total = adv as f64 + cfg.lambda * l1 as f64;
            let losses = [d_loss, adv as f64, l1 as f64, total];
            if !finite(&losses) {
                (g, d) = snapshot;
                log.diverged = Some(format!("non-finite loss at epoch {epoch} step {step}: {losses:?}"));
                break 'epochs;
            }
            g.backward(&grad)?;
            opt_g.step(&mut g.params_mut());

            log.steps.push(StepLog {
                epoch,
                step,
                d_loss: Some(d_loss),
                g_adv: Some(adv as f64),
                g_l1: l1 as f64,
                g_total: total,
            });
            dl.push(d_loss);
            ga.push(adv as f64);
            gl.push(l1 as f64);
        }
        let (d_mean, a_mean) = (mean(&dl), mean(&ga));
        let ratio = a_mean / d_mean;
        let val_l1 = if val.is_empty() { None } else { Some(mean_l1(&mut g, val, cfg.batch_size)?) };
        log.epochs.push(EpochLog { epoch, d_loss: Some(d_mean), g_adv: Some(a_mean), g_l1: mean(&gl), ratio: Some(ratio), val_l1 });
        balanced = if ratio.ln().abs() < 0.1 { balanced + 1 } else { 0 };
        if cfg.early_stop && balanced >= 3 {
            log.stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome { generator: g, discriminator: Some(d), log })
}

/// The same U-net trained on L1 alone.
pub fn cnn_train(train: &[SlicePair], val: &[SlicePair], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(PredictorError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut g = UNet::new(cfg.unet, &mut rng)?;
    let mut opt = Adam::new(cfg.adam);
    let mut log = TrainLog::default();
    if !val.is_empty() {
        log.initial_val_l1 = Some(mean_l1(&mut g, val, cfg.batch_size)?);
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let snapshot = g.clone();
        order.shuffle(&mut rng);
        let mut gl = Vec::new();
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = stack_batch(train, batch)?;
            g.zero_grad();
            let pred = g.forward(&x, Mode::Train)?;
            let (l1, grad) = l1_loss(&pred, &y)?;
            if !l1.is_finite() {
                g = snapshot;
                log.diverged = Some(format!("non-finite loss at epoch {epoch} step {step}"));
                return Ok(TrainOutcome { generator: g, discriminator: None, log });
            }
            g.backward(&grad)?;
            opt.step(&mut g.params_mut());
            log.steps.push(StepLog { epoch, step, d_loss: None, g_adv: None, g_l1: l1 as f64, g_total: l1 as f64 });
            gl.push(l1 as f64);
        }
        let val_l1 = if val.is_empty() { None } else { Some(mean_l1(&mut g, val, cfg.batch_size)?) };
        log.epochs.push(EpochLog { epoch, d_loss: None, g_adv: None, g_l1: mean(&gl), ratio: None, val_l1 });
    }
    Ok(TrainOutcome { generator: g, discriminator: None, log })
}

/// Predict every axial plane in eval mode and stack the pooled planes.
pub fn predict_volume(generator: &mut UNet, phantom: &Phantom) -> Result<DoseDistribution> {
    let size = generator.config.size;
    let [nx, ny, nz] = phantom.dims();
    let mut values = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        let img = render_contoured_slice(phantom, z, size)?;
        let x = Tensor::new(&[1, 3, size, size], img.data)?;
        let y = generator.forward(&x, Mode::Eval)?;
        values.extend(pool_plane(y.data(), size, nx, ny));
    }
    Ok(DoseDistribution { dims: phantom.dims(), spacing: phantom.spacing(), values })
}
