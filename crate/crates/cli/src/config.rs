use crate::CliError;
use kbp_core::dosecalc::DoseConfig;
use kbp_core::phantom::PhantomSpec;
use kbp_core::planeval::GammaOptions;
use kbp_core::planopt::{MimicOptions, ReferenceOptions};
use kbp_predictors::{ForestConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Model {
    Gan,
    Cnn,
    Rf,
}

impl Model {
    pub const ALL: [Model; 3] = [Model::Gan, Model::Cnn, Model::Rf];

    pub fn id(self) -> &'static str {
        match self {
            Model::Gan => "gan",
            Model::Cnn => "cnn",
            Model::Rf => "rf",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Model::Gan => "GAN",
            Model::Cnn => "CNN",
            Model::Rf => "RF",
        }
    }
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Model {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self, CliError> {
        Model::ALL
            .into_iter()
            .find(|m| m.id() == s)
            .ok_or_else(|| CliError::Config(format!("unknown model {s:?} (expected gan, cnn or rf)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptMode {
    Inverse,
    Mimic,
}

impl OptMode {
    pub fn id(self) -> &'static str {
        match self {
            OptMode::Inverse => "inverse",
            OptMode::Mimic => "mimic",
        }
    }
}

impl FromStr for OptMode {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "inverse" => Ok(OptMode::Inverse),
            "mimic" => Ok(OptMode::Mimic),
            _ => Err(CliError::Config(format!("unknown mode {s:?} (expected inverse or mimic)"))),
        }
    }
}

/// A predictor paired with the way its prediction is turned into a plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Method {
    pub model: Model,
    pub mode: OptMode,
}

impl Method {
    pub const fn new(model: Model, mode: OptMode) -> Self {
        Self { model, mode }
    }

    /// Directory name under `plans/`.
    pub fn id(self) -> String {
        format!("{}-{}", self.model.id(), self.mode.id())
    }

    /// Column name in reports. Inverse-planned methods carry the predictor's
    /// name; GAN prediction followed by mimicking is plain "mimic".
    pub fn label(self) -> String {
        match (self.model, self.mode) {
            (m, OptMode::Inverse) => m.label().to_string(),
            (Model::Gan, OptMode::Mimic) => "mimic".to_string(),
            (m, OptMode::Mimic) => format!("{} mimic", m.label()),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.id())
    }
}

impl FromStr for Method {
    type Err = CliError;
    fn from_str(s: &str) -> Result<Self, CliError> {
        let (m, o) = s
            .split_once('-')
            .ok_or_else(|| CliError::Config(format!("method {s:?} is not of the form model-mode")))?;
        Ok(Method::new(m.parse()?, o.parse()?))
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.id())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub patients: usize,
    /// Fraction of patients in the training split; `floor(patients * f)`
    /// patients train, the rest are test patients.
    pub train_fraction: f64,
    pub seed: u64,
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    /// Side of the square slice images fed to the neural predictors.
    pub slice_size: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let spec = PhantomSpec::default();
        Self { patients: 30, train_fraction: 0.6, seed: 0, dims: spec.dims, spacing_mm: spec.spacing, slice_size: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhysicsConfig {
    pub mu_per_mm: f64,
    pub beamlet_width_mm: f64,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        let d = DoseConfig::default();
        Self { mu_per_mm: d.mu_per_mm, beamlet_width_mm: d.beamlet_width_mm }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizationConfig {
    /// Mode used by `optimize --model` when `--mode` is not given.
    pub mode: OptMode,
    pub mimic_iterations: usize,
    /// Template fall-off and complexity fraction of the reference planner.
    pub reference: ReferenceOptions,
}

impl Default for OptimizationConfig {
    fn default() -> Self {
        Self {
            mode: OptMode::Inverse,
            mimic_iterations: MimicOptions::default().iterations_per_solve,
            reference: ReferenceOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Plan sets compared against the reference plans, in column order.
    pub methods: Vec<Method>,
    pub gamma: GammaOptions,
    /// Also write SVG plots.
    pub svg: bool,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            methods: vec![
                Method::new(Model::Gan, OptMode::Inverse),
                Method::new(Model::Cnn, OptMode::Inverse),
                Method::new(Model::Rf, OptMode::Inverse),
                Method::new(Model::Gan, OptMode::Mimic),
            ],
            gamma: GammaOptions::default(),
            svg: true,
        }
    }
}

/// Everything a pipeline run depends on. Read from TOML; every section and
/// key is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub dataset: DatasetConfig,
    pub physics: PhysicsConfig,
    pub training: TrainConfig,
    pub forest: ForestConfig,
    pub optimization: OptimizationConfig,
    pub evaluation: EvaluationConfig,
    /// Not part of the config hash.
    pub output_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            physics: PhysicsConfig::default(),
            training: TrainConfig::default(),
            forest: ForestConfig::default(),
            optimization: OptimizationConfig::default(),
            evaluation: EvaluationConfig::default(),
            output_dir: PathBuf::from("kbp-run"),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Apply `--seed`: the dataset, network and forest seeds all follow it.
    pub fn set_seed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.training.seed = seed;
        self.forest.seed = seed;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let d = &self.dataset;
        let bad = |m: String| Err(CliError::Config(m));
        if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
            return bad(format!("train_fraction {} must lie in (0, 1)", d.train_fraction));
        }
        if d.patients < 2 {
            return bad(format!("need at least 2 patients, got {}", d.patients));
        }
        let (train, test) = split_sizes(d.patients, d.train_fraction);
        if train == 0 || test == 0 {
            return bad(format!("{} patients at fraction {} leave an empty split", d.patients, d.train_fraction));
        }
        if d.slice_size < 16 || !d.slice_size.is_power_of_two() {
            return bad(format!("slice_size {} must be a power of two >= 16", d.slice_size));
        }
        if self.training.unet.size != d.slice_size {
            return bad(format!(
                "training.unet.size {} differs from dataset.slice_size {}",
                self.training.unet.size, d.slice_size
            ));
        }
        if self.forest.trees == 0 {
            return bad("forest.trees must be positive".into());
        }
        self.dose_config().validate().map_err(|e| CliError::Config(e.to_string()))?;
        let g = &self.evaluation.gamma;
        if !(g.dose_tol > 0.0 && g.dist_tol_mm > 0.0 && (0.0..1.0).contains(&g.low_dose_cutoff)) {
            return bad("gamma tolerances must be positive and the cutoff in [0, 1)".into());
        }
        if self.evaluation.methods.is_empty() {
            return bad("evaluation.methods is empty".into());
        }
        if self.optimization.mimic_iterations == 0 {
            return bad("optimization.mimic_iterations must be positive".into());
        }
        Ok(())
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        PhantomSpec { dims: self.dataset.dims, spacing: self.dataset.spacing_mm, ..PhantomSpec::default() }
    }

    pub fn dose_config(&self) -> DoseConfig {
        DoseConfig {
            mu_per_mm: self.physics.mu_per_mm,
            beamlet_width_mm: self.physics.beamlet_width_mm,
            ..DoseConfig::default()
        }
    }

    pub fn mimic_options(&self) -> MimicOptions {
        MimicOptions { iterations_per_solve: self.optimization.mimic_iterations, ..MimicOptions::default() }
    }

    /// SHA-256 of the canonical JSON form, output directory excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Models some configured method depends on, in canonical order.
    pub fn models(&self) -> Vec<Model> {
        let mut m: Vec<Model> = self.evaluation.methods.iter().map(|m| m.model).collect();
        m.sort();
        m.dedup();
        m
    }
}

/// `(train, test)` counts: `floor(n * fraction)` train patients, guarded
/// against round-off just below an integer.
pub fn split_sizes(n: usize, fraction: f64) -> (usize, usize) {
    let train = ((n as f64 * fraction) + 1e-9).floor() as usize;
    let train = train.min(n);
    (train, n - train)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_split_is_eighteen_twelve() {
        assert_eq!(split_sizes(30, 0.6), (18, 12));
        assert_eq!(split_sizes(10, 0.7), (7, 3));
        assert_eq!(split_sizes(5, 0.5), (2, 3));
    }

    #[test]
    fn empty_toml_gives_defaults() {
        let c = PipelineConfig::from_toml("").unwrap();
        assert_eq!(c, PipelineConfig::default());
        let round = PipelineConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(round, c);
    }

    #[test]
    fn partial_sections_and_errors() {
        let c = PipelineConfig::from_toml("[dataset]\npatients = 8\ntrain_fraction = 0.5\n").unwrap();
        assert_eq!(c.dataset.patients, 8);
        assert_eq!(c.dataset.slice_size, 64);
        for bad in ["[dataset]\ntrain_fraction = 1.0", "[dataset]\nunknown = 1", "[evaluation]\nmethods = [\"gan-foo\"]"] {
            assert!(matches!(PipelineConfig::from_toml(bad), Err(CliError::Config(_))), "{bad}");
        }
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("/elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.dataset.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn method_names() {
        let m: Method = "gan-mimic".parse().unwrap();
        assert_eq!(m.label(), "mimic");
        assert_eq!(Method::new(Model::Rf, OptMode::Inverse).label(), "RF");
        assert_eq!(Method::new(Model::Cnn, OptMode::Mimic).id(), "cnn-mimic");
    }
}
