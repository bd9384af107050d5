use crate::config::{split_sizes, Method, Model, OptMode, PipelineConfig};
use crate::manifest::{unix_now, RunManifest, Split, StageRecord, MANIFEST_FILE};
use crate::{CliError, Result};
use kbp_core::dosecalc::{influence_matrix, make_beams, read_influence, write_influence, DoseDistribution, InfluenceMatrix};
use kbp_core::phantom::{generate_phantom, Phantom, StructureId};
use kbp_core::planeval::{
    aggregate_criteria, criteria_check, criteria_csv, dose_stats, dvh, dvh_csv, dvh_svg, gamma_group_rates,
    gamma_pass_rate, head_to_head, head_to_head_csv, head_to_head_svg, normalize_to_reference, CriteriaReport,
    CriterionOutcome, HeadToHeadRow, SatisfactionRates, StructureGroup, CLINICAL_CRITERIA,
};
use kbp_core::planopt::{
    build_terms, dose_mimic, inverse_weights, read_plan, reference_plan, solve_forward, write_plan, ForwardProblem, Plan,
    Provenance,
};
use kbp_core::volume::{read_volume, write_volume, Volume, VolumeData};
use kbp_predictors::{
    cnn_train, extract_slices, gan_train, load_generator, predict_volume, predict_volume_rf, rf_feature_matrix,
    rf_train, save_generator, RandomForest, SlicePair, TrainLog, RF_FEATURES,
};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub fn patient_name(i: usize) -> String {
    format!("p{i:03}")
}

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

/// Write through a temporary file so an interrupted run never leaves a
/// truncated artifact under the final name.
pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(format!("creating {}", parent.display())))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(io_err(format!("writing {}", tmp.display())))?;
    std::fs::rename(&tmp, path).map_err(io_err(format!("renaming to {}", path.display())))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(io_err(format!("reading {}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    write_file(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Failure(format!("{}: {e}", path.display())))
}

fn opt6(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_else(|| "NA".into())
}

/// An open run directory.
pub struct Run {
    pub config: PipelineConfig,
    pub dir: PathBuf,
    pub manifest: RunManifest,
    /// Rerun stages that are already complete.
    pub force: bool,
}

impl Run {
    /// Open (or start) the run in `config.output_dir`.
    ///
    /// A directory holding a run with a different config hash is refused
    /// unless `force` is set, in which case its stage records are dropped.
    pub fn open(config: PipelineConfig, force: bool) -> Result<Self> {
        config.validate()?;
        let dir = config.output_dir.clone();
        std::fs::create_dir_all(&dir).map_err(io_err(format!("creating {}", dir.display())))?;
        let hash = config.hash();
        let path = dir.join(MANIFEST_FILE);
        let manifest = if path.exists() {
            let m = RunManifest::load(&path)?;
            if m.config_hash == hash {
                m
            } else if force {
                warn!("config changed; discarding stage records in {}", dir.display());
                RunManifest::new(hash)
            } else {
                return Err(CliError::Config(format!(
                    "{} holds a run with config hash {}, current config hashes to {hash}; use --force",
                    dir.display(),
                    m.config_hash
                )));
            }
        } else {
            RunManifest::new(hash)
        };
        let run = Self { config, dir, manifest, force };
        write_file(&run.dir.join("config.toml"), run.config.to_toml().as_bytes())?;
        run.save()?;
        Ok(run)
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn save(&self) -> Result<()> {
        self.manifest.save(&self.dir.join(MANIFEST_FILE))
    }

    pub fn split(&self) -> Result<&Split> {
        self.manifest.split.as_ref().ok_or_else(|| CliError::MissingStage("gen-data has not run".into()))
    }

    fn require(&self, stage: &str) -> Result<&StageRecord> {
        self.manifest
            .stages
            .get(stage)
            .ok_or_else(|| CliError::MissingStage(format!("stage {stage} has not completed")))
    }

    fn done(&self, stage: &str) -> bool {
        !self.force && self.manifest.stages.contains_key(stage)
    }

    /// Drop records of every stage whose inputs `stage` produces.
    fn invalidate_downstream(&mut self, stage: &str) {
        let stage = stage.to_string();
        self.manifest.stages.retain(|k, _| !is_downstream(&stage, k));
    }

    fn record(&mut self, stage: &str, rec: StageRecord) -> Result<()> {
        self.invalidate_downstream(stage);
        self.manifest.stages.insert(stage.to_string(), rec);
        self.save()
    }

    /// Patients named on the command line, or the test split.
    fn select(&self, patients: Option<&[String]>) -> Result<Vec<String>> {
        let split = self.split()?;
        match patients {
            None => Ok(split.test.clone()),
            Some(ids) => {
                for id in ids {
                    if !split.contains(id) {
                        return Err(CliError::Config(format!("unknown patient {id}")));
                    }
                }
                let set: BTreeSet<String> = ids.iter().cloned().collect();
                Ok(set.into_iter().collect())
            }
        }
    }
}

fn is_downstream(of: &str, stage: &str) -> bool {
    let (kind, arg) = of.split_once(':').unwrap_or((of, ""));
    let (k_kind, k_arg) = stage.split_once(':').unwrap_or((stage, ""));
    let model = |a: &str| a.split('-').next().unwrap_or("").to_string();
    let reports = matches!(k_kind, "evaluate" | "report");
    match kind {
        "gen-data" => stage != of,
        "train" => (matches!(k_kind, "predict" | "optimize") && model(k_arg) == model(arg)) || reports,
        "predict" => (k_kind == "optimize" && model(k_arg) == model(arg)) || reports,
        "optimize" => reports,
        "evaluate" => k_kind == "report",
        _ => false,
    }
}

/// Reference-plan metadata kept beside `reference.kbpp`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ReferenceRecord {
    phantom_seed: u64,
    complexity_bound: f64,
    unconstrained_complexity: f64,
    objective: Option<f64>,
    duality_gap: Option<f64>,
}

/// One generated patient with its reference ("clinical") plan.
pub struct Patient {
    pub id: String,
    pub phantom: Phantom,
    pub influence: InfluenceMatrix,
    pub reference: Plan,
    /// Complexity bound the reference plan was made under; KBP plans for this
    /// patient use the same bound.
    pub complexity_bound: f64,
}

pub fn load_patient(run_dir: &Path, id: &str) -> Result<Patient> {
    let dir = run_dir.join("data").join(id);
    let missing = |what: &str| CliError::MissingStage(format!("{what} for {id} not found; run gen-data"));
    if !dir.join("phantom.json").exists() {
        return Err(missing("phantom"));
    }
    let phantom: Phantom = read_json(&dir.join("phantom.json"))?;
    let influence = read_influence(read_file(&dir.join("influence.kbpi"))?.as_slice()).map_err(CliError::fail)?;
    let reference = read_plan(read_file(&dir.join("reference.kbpp"))?.as_slice()).map_err(CliError::fail)?;
    let rec: ReferenceRecord = read_json(&dir.join("reference.json"))?;
    Ok(Patient { id: id.to_string(), phantom, influence, reference, complexity_bound: rec.complexity_bound })
}

fn generate_patient(cfg: &PipelineConfig, run_dir: &Path, id: &str, seed: u64) -> Result<Vec<String>> {
    let phantom = generate_phantom(seed, &cfg.phantom_spec()).map_err(CliError::fail)?;
    let dose_cfg = cfg.dose_config();
    let beams = make_beams(&dose_cfg, &phantom).map_err(CliError::fail)?;
    let influence = influence_matrix(&phantom.grid, &beams, &dose_cfg).map_err(CliError::fail)?;
    let reference = reference_plan(&phantom, &influence, &cfg.optimization.reference).map_err(CliError::fail)?;

    let rel = |f: &str| format!("data/{id}/{f}");
    let spacing = phantom.spacing().map(|s| s as f32);
    let volumes = [
        ("labels.kbpv", VolumeData::Labels(phantom.grid.labels.iter().map(|l| l.code()).collect())),
        ("density.kbpv", VolumeData::Density(phantom.grid.density.clone())),
    ];
    for (name, data) in volumes {
        let mut buf = Vec::new();
        write_volume(&mut buf, &Volume { dims: phantom.dims(), spacing, data }).map_err(CliError::fail)?;
        write_file(&run_dir.join(rel(name)), &buf)?;
    }
    write_json(&run_dir.join(rel("phantom.json")), &phantom)?;
    let mut buf = Vec::new();
    write_influence(&mut buf, &influence).map_err(CliError::fail)?;
    write_file(&run_dir.join(rel("influence.kbpi")), &buf)?;
    let mut buf = Vec::new();
    write_plan(&mut buf, &reference.plan).map_err(CliError::fail)?;
    write_file(&run_dir.join(rel("reference.kbpp")), &buf)?;
    let record = ReferenceRecord {
        phantom_seed: seed,
        complexity_bound: reference.complexity_bound,
        unconstrained_complexity: reference.unconstrained_complexity,
        objective: reference.plan.objective,
        duality_gap: reference.plan.certificate.map(|c| c.gap),
    };
    write_json(&run_dir.join(rel("reference.json")), &record)?;
    Ok(["labels.kbpv", "density.kbpv", "phantom.json", "influence.kbpi", "reference.kbpp", "reference.json"]
        .iter()
        .map(|f| rel(f))
        .collect())
}

/// Generate phantoms, influence matrices and reference plans, then split the
/// cohort by patient.
///
/// Phantom seeds and the split permutation are drawn from one generator
/// seeded with `dataset.seed`. A patient whose reference plan fails is
/// excluded and the split is taken over the rest.
pub fn cmd_gen_data(run: &mut Run) -> Result<()> {
    const STAGE: &str = "gen-data";
    if run.done(STAGE) {
        info!("{STAGE}: already complete");
        return Ok(());
    }
    let data = run.path("data");
    if data.exists() {
        if !run.force {
            return Err(CliError::Config(format!(
                "{} holds a partial earlier run; use --force to regenerate",
                data.display()
            )));
        }
        std::fs::remove_dir_all(&data).map_err(io_err(format!("removing {}", data.display())))?;
    }
    let started = unix_now();
    let cfg = &run.config;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.dataset.seed);
    let seeds: Vec<u64> = (0..cfg.dataset.patients).map(|_| rng.random()).collect();
    let dir = run.dir.clone();
    let results: Vec<(String, Result<Vec<String>>)> = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| {
            let id = patient_name(i);
            let r = generate_patient(cfg, &dir, &id, seed);
            info!("{STAGE}: {id} {}", if r.is_ok() { "done" } else { "failed" });
            (id, r)
        })
        .collect();

    let mut ok = Vec::new();
    let mut artifacts = Vec::new();
    let mut excluded = BTreeMap::new();
    for (id, r) in results {
        match r {
            Ok(a) => {
                artifacts.extend(a);
                ok.push(id);
            }
            Err(e) => {
                warn!("{STAGE}: excluding {id}: {e}");
                excluded.insert(id, e.to_string());
            }
        }
    }
    let (n_train, n_test) = split_sizes(ok.len(), cfg.dataset.train_fraction);
    if n_train == 0 || n_test == 0 {
        return Err(CliError::Failure(format!("only {} usable patients; cannot split", ok.len())));
    }
    let mut order = ok.clone();
    order.shuffle(&mut rng);
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort();
    test.sort();
    let split = Split { train, test, excluded: excluded.clone() };
    write_json(&run.path("data/split.json"), &split)?;
    artifacts.push("data/split.json".into());
    run.manifest.split = Some(split);
    let rec = StageRecord { artifacts, patients: ok, failures: excluded, started_unix: started, finished_unix: unix_now() };
    run.record(STAGE, rec)
}

fn steps_csv(log: &TrainLog) -> String {
    let mut s = String::from("epoch,step,d_loss,g_adv,g_l1,g_total\n");
    let cell = |x: Option<f64>| x.map(|v| format!("{v:.8}")).unwrap_or_default();
    for st in &log.steps {
        let _ = writeln!(
            s,
            "{},{},{},{},{:.8},{:.8}",
            st.epoch,
            st.step,
            cell(st.d_loss),
            cell(st.g_adv),
            st.g_l1,
            st.g_total
        );
    }
    s
}

fn load_all(run: &Run, ids: &[String]) -> Result<Vec<Patient>> {
    ids.par_iter().map(|id| load_patient(&run.dir, id)).collect()
}

/// Train one predictor on the training split.
pub fn cmd_train(run: &mut Run, model: Model) -> Result<()> {
    let stage = format!("train:{model}");
    run.require("gen-data")?;
    if run.done(&stage) {
        info!("{stage}: already complete");
        return Ok(());
    }
    let started = unix_now();
    let train_ids = run.split()?.train.clone();
    let patients = load_all(run, &train_ids)?;
    let cfg = &run.config;
    let mut artifacts = Vec::new();
    match model {
        Model::Gan | Model::Cnn => {
            let mut slices: Vec<SlicePair> = Vec::new();
            for p in &patients {
                slices.extend(
                    extract_slices(&p.phantom, &p.reference.dose, cfg.dataset.slice_size).map_err(CliError::fail)?,
                );
            }
            info!("{stage}: {} slices from {} patients", slices.len(), patients.len());
            let outcome = match model {
                Model::Gan => gan_train(&slices, &[], &cfg.training),
                _ => cnn_train(&slices, &[], &cfg.training),
            }
            .map_err(CliError::fail)?;
            if let Some(why) = &outcome.log.diverged {
                warn!("{stage}: training diverged ({why}); kept the last finite networks");
            }
            let mut buf = Vec::new();
            save_generator(&mut buf, &outcome.generator).map_err(CliError::fail)?;
            let files = [
                (format!("models/{model}.kbpt"), buf),
                (format!("models/{model}_epochs.csv"), outcome.log.to_csv().into_bytes()),
                (format!("models/{model}_steps.csv"), steps_csv(&outcome.log).into_bytes()),
            ];
            for (rel, bytes) in files {
                write_file(&run.path(&rel), &bytes)?;
                artifacts.push(rel);
            }
        }
        Model::Rf => {
            let mut x: Vec<[f64; RF_FEATURES]> = Vec::new();
            let mut y = Vec::new();
            for p in &patients {
                x.extend(rf_feature_matrix(&p.phantom, &p.influence).map_err(CliError::fail)?);
                y.extend_from_slice(&p.reference.dose.values);
            }
            info!("{stage}: {} voxels from {} patients", x.len(), patients.len());
            let forest = rf_train(&x, &y, &cfg.forest).map_err(CliError::fail)?;
            let rel = "models/rf.json".to_string();
            write_file(&run.path(&rel), forest.to_json().as_bytes())?;
            artifacts.push(rel);
        }
    }
    let rec = StageRecord { artifacts, patients: train_ids, started_unix: started, finished_unix: unix_now(), ..Default::default() };
    run.record(&stage, rec)?;
    run.manifest.audit_split()
}

enum Predictor {
    Net(kbp_predictors::UNet),
    Forest(RandomForest),
}

fn prediction_path(model: Model, id: &str) -> String {
    format!("predictions/{model}/{id}.kbpv")
}

fn read_dose(path: &Path, phantom: &Phantom) -> Result<DoseDistribution> {
    let vol = read_volume(read_file(path)?.as_slice()).map_err(CliError::fail)?;
    if vol.dims != phantom.dims() {
        return Err(CliError::Failure(format!("{}: dims {:?} differ from the phantom", path.display(), vol.dims)));
    }
    let VolumeData::Dose(v) = vol.data else {
        return Err(CliError::Failure(format!("{} is not a dose volume", path.display())));
    };
    Ok(DoseDistribution {
        dims: phantom.dims(),
        spacing: phantom.spacing(),
        values: v.into_iter().map(f64::from).collect(),
    })
}

/// Predict full dose volumes for the given patients (default: test split).
pub fn cmd_predict(run: &mut Run, model: Model, patients: Option<&[String]>) -> Result<()> {
    let stage = format!("predict:{model}");
    let ids = run.select(patients)?;
    run.require(&format!("train:{model}")).map_err(|_| {
        CliError::MissingStage(format!("model {model} is untrained; run `train --model {model}`"))
    })?;
    let previous = run.manifest.stages.get(&stage).cloned();
    if let Some(prev) = &previous {
        if !run.force && ids.iter().all(|id| prev.patients.contains(id)) {
            info!("{stage}: already complete");
            return Ok(());
        }
    }
    let started = unix_now();
    let mut predictor = match model {
        Model::Gan | Model::Cnn => {
            let bytes = read_file(&run.path(&format!("models/{model}.kbpt")))?;
            Predictor::Net(load_generator(bytes.as_slice()).map_err(CliError::fail)?)
        }
        Model::Rf => {
            let text = read_file(&run.path("models/rf.json"))?;
            let text = String::from_utf8(text).map_err(CliError::fail)?;
            Predictor::Forest(RandomForest::from_json(&text).map_err(CliError::fail)?)
        }
    };
    let mut rec = previous.filter(|_| !run.force).unwrap_or_default();
    for id in &ids {
        let p = load_patient(&run.dir, id)?;
        let dose = match &mut predictor {
            Predictor::Net(net) => predict_volume(net, &p.phantom),
            Predictor::Forest(f) => predict_volume_rf(f, &p.phantom, &p.influence),
        }
        .map_err(CliError::fail)?;
        let vol = Volume {
            dims: dose.dims,
            spacing: dose.spacing.map(|s| s as f32),
            data: VolumeData::Dose(dose.values.iter().map(|&v| v as f32).collect()),
        };
        let mut buf = Vec::new();
        write_volume(&mut buf, &vol).map_err(CliError::fail)?;
        let rel = prediction_path(model, id);
        write_file(&run.path(&rel), &buf)?;
        rec.artifacts.push(rel);
        rec.patients.push(id.clone());
        info!("{stage}: {id} done");
    }
    rec.artifacts.sort();
    rec.artifacts.dedup();
    rec.patients.sort();
    rec.patients.dedup();
    rec.started_unix = started;
    rec.finished_unix = unix_now();
    run.record(&stage, rec)
}

/// Sidecar written next to every KBP plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub patient: String,
    pub method: String,
    pub complexity: f64,
    pub complexity_bound: f64,
    /// Inverse mode: the 65 recovered weights.
    pub weights: Option<Vec<f64>>,
    /// Inverse mode: gap of the prediction under the recovered weights.
    pub inverse_gap: Option<f64>,
    pub inverse_ratio: Option<f64>,
    /// Inverse mode: weighted objective and certified duality gap of the plan.
    pub objective: Option<f64>,
    pub duality_gap: Option<f64>,
    /// Mimic mode: `||A w - prediction||_2`.
    pub mimic_residual: Option<f64>,
}

fn provenance(model: Model, mode: OptMode) -> Provenance {
    match (model, mode) {
        (_, OptMode::Mimic) => Provenance::Mimic,
        (Model::Gan, _) => Provenance::Gan,
        (Model::Cnn, _) => Provenance::Cnn,
        (Model::Rf, _) => Provenance::Rf,
    }
}

/// Turn one prediction into a deliverable plan under the patient's
/// reference complexity bound.
pub fn plan_from_prediction(p: &Patient, prediction: &DoseDistribution, method: Method, cfg: &PipelineConfig) -> Result<(Plan, PlanRecord)> {
    let terms = build_terms(&p.phantom, prediction).map_err(CliError::fail)?;
    let problem =
        ForwardProblem::new(&p.influence, &p.phantom, terms, Some(p.complexity_bound)).map_err(CliError::fail)?;
    let mut record = PlanRecord {
        patient: p.id.clone(),
        method: method.id(),
        complexity: 0.0,
        complexity_bound: p.complexity_bound,
        weights: None,
        inverse_gap: None,
        inverse_ratio: None,
        objective: None,
        duality_gap: None,
        mimic_residual: None,
    };
    let mut plan = match method.mode {
        OptMode::Inverse => {
            let inv = inverse_weights(&problem, &prediction.values).map_err(CliError::fail)?;
            let plan = solve_forward(&problem, &inv.weights).map_err(CliError::fail)?;
            record.weights = Some(inv.weights.as_slice().to_vec());
            record.inverse_gap = Some(inv.gap);
            record.inverse_ratio = Some(inv.ratio);
            record.objective = plan.objective;
            record.duality_gap = plan.certificate.map(|c| c.gap);
            plan
        }
        OptMode::Mimic => {
            let (plan, report) = dose_mimic(&problem, &prediction.values, &cfg.mimic_options()).map_err(CliError::fail)?;
            record.mimic_residual = Some(report.residual);
            plan
        }
    };
    plan.provenance = provenance(method.model, method.mode);
    record.complexity = plan.complexity;
    Ok((plan, record))
}

pub fn plan_path(method: Method, id: &str) -> String {
    format!("plans/{}/{id}.kbpp", method.id())
}

/// Optimize plans from predictions. A patient whose solve fails is recorded
/// in `plans/<method>/errors.json` and the rest continue. Returns those
/// failures.
pub fn cmd_optimize(run: &mut Run, method: Method, patients: Option<&[String]>) -> Result<BTreeMap<String, String>> {
    let stage = format!("optimize:{}", method.id());
    let ids = run.select(patients)?;
    let predicted = run.require(&format!("predict:{}", method.model)).map_err(|_| {
        CliError::MissingStage(format!("no {} predictions; run `predict --model {}`", method.model, method.model))
    })?;
    if let Some(id) = ids.iter().find(|id| !predicted.patients.contains(id)) {
        return Err(CliError::MissingStage(format!("no {} prediction for {id}", method.model)));
    }
    let previous = run.manifest.stages.get(&stage).cloned();
    if let Some(prev) = &previous {
        if !run.force && ids.iter().all(|id| prev.patients.contains(id) || prev.failures.contains_key(id)) {
            info!("{stage}: already complete");
            return Ok(prev.failures.clone());
        }
    }
    let started = unix_now();
    let cfg = &run.config;
    let dir = run.dir.clone();
    let outcomes: Vec<(String, Result<Vec<String>>)> = ids
        .par_iter()
        .map(|id| {
            let r = (|| {
                let p = load_patient(&dir, id)?;
                let prediction = read_dose(&dir.join(prediction_path(method.model, id)), &p.phantom)?;
                let (plan, record) = plan_from_prediction(&p, &prediction, method, cfg)?;
                let mut buf = Vec::new();
                write_plan(&mut buf, &plan).map_err(CliError::fail)?;
                let rel = plan_path(method, id);
                let side = rel.replace(".kbpp", ".json");
                write_file(&dir.join(&rel), &buf)?;
                write_json(&dir.join(&side), &record)?;
                Ok(vec![rel, side])
            })();
            match &r {
                Ok(_) => info!("optimize:{}: {id} done", method.id()),
                Err(e) => warn!("optimize:{}: {id} failed: {e}", method.id()),
            }
            (id.clone(), r)
        })
        .collect();

    let mut rec = previous.filter(|_| !run.force).unwrap_or_default();
    for (id, r) in outcomes {
        match r {
            Ok(a) => {
                rec.failures.remove(&id);
                rec.artifacts.extend(a);
                rec.patients.push(id);
            }
            Err(e) => {
                for rel in [plan_path(method, &id), plan_path(method, &id).replace(".kbpp", ".json")] {
                    let _ = std::fs::remove_file(run.path(&rel));
                    rec.artifacts.retain(|a| a != &rel);
                }
                rec.patients.retain(|p| p != &id);
                rec.failures.insert(id, e.to_string());
            }
        }
    }
    let errors = format!("plans/{}/errors.json", method.id());
    write_json(&run.path(&errors), &rec.failures)?;
    rec.artifacts.push(errors);
    rec.artifacts.sort();
    rec.artifacts.dedup();
    rec.patients.sort();
    rec.patients.dedup();
    rec.started_unix = started;
    rec.finished_unix = unix_now();
    let failures = rec.failures.clone();
    run.record(&stage, rec)?;
    Ok(failures)
}

/// One (patient, plan) row of the evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationEntry {
    pub patient: String,
    pub method: String,
    /// Factor applied so that PTV70 D99 matches the reference plan's.
    pub scale: f64,
    pub ptv70_d99_gy: f64,
    pub reference_ptv70_d99_gy: f64,
    pub criteria: CriteriaReport,
    /// Gamma pass rates over OAR, PTV and all structure voxels.
    pub gamma: [f64; 3],
    pub gamma_evaluated: usize,
    /// Criterion-wise improvement over the reference plan (Gy).
    pub head_to_head: Vec<HeadToHeadRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingPlan {
    pub patient: String,
    pub method: String,
    pub reason: String,
}

/// Everything `evaluate` computed; `report` renders it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    /// Column labels; the reference plans come first as "Clinical".
    pub methods: Vec<String>,
    pub patients: Vec<String>,
    pub entries: Vec<EvaluationEntry>,
    pub missing: Vec<MissingPlan>,
    /// Percent of criteria met per method, `None` without any plan.
    pub satisfaction: Vec<Option<SatisfactionRates>>,
    /// Mean gamma pass rate per method, ordered OAR, PTV, All.
    pub gamma: Vec<Option<[f64; 3]>>,
}

pub const CLINICAL: &str = "Clinical";

impl EvaluationSummary {
    pub fn entry(&self, patient: &str, method: &str) -> Option<&EvaluationEntry> {
        self.entries.iter().find(|e| e.patient == patient && e.method == method)
    }

    fn column(&self, method: &str) -> Option<usize> {
        self.methods.iter().position(|m| m == method)
    }

    pub fn satisfaction_of(&self, method: &str) -> Option<&SatisfactionRates> {
        self.column(method).and_then(|i| self.satisfaction[i].as_ref())
    }

    pub fn gamma_of(&self, method: &str) -> Option<[f64; 3]> {
        self.column(method).and_then(|i| self.gamma[i])
    }

    /// Groups as rows, methods as columns; `NA` marks methods without plans.
    pub fn satisfaction_csv(&self) -> String {
        self.group_csv(|i, g| self.satisfaction[i].as_ref().map(|r| r.get(g)))
    }

    pub fn gamma_csv(&self) -> String {
        self.group_csv(|i, g| self.gamma[i].map(|r| r[group_index(g)]))
    }

    fn group_csv(&self, cell: impl Fn(usize, StructureGroup) -> Option<f64>) -> String {
        let mut s = String::from("group");
        for m in &self.methods {
            let _ = write!(s, ",{m}");
        }
        s.push('\n');
        for g in StructureGroup::ROWS {
            s.push_str(g.label());
            for i in 0..self.methods.len() {
                let _ = write!(s, ",{}", opt6(cell(i, g)));
            }
            s.push('\n');
        }
        s
    }

    pub fn normalization_csv(&self) -> String {
        let mut s = String::from("patient,method,scale,ptv70_d99_gy,reference_ptv70_d99_gy\n");
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{},{},{:.9},{:.6},{:.6}",
                e.patient, e.method, e.scale, e.ptv70_d99_gy, e.reference_ptv70_d99_gy
            );
        }
        s
    }

    pub fn gamma_patients_csv(&self) -> String {
        let mut s = String::from("patient,method,oar,ptv,all,evaluated\n");
        for e in &self.entries {
            let _ = writeln!(s, "{},{},{:.6},{:.6},{:.6},{}", e.patient, e.method, e.gamma[0], e.gamma[1], e.gamma[2], e.gamma_evaluated);
        }
        s
    }

    pub fn missing_csv(&self) -> String {
        let mut s = String::from("patient,method,reason\n");
        for m in &self.missing {
            let reason = m.reason.replace(['"', '\n'], " ");
            let _ = writeln!(s, "{},{},\"{reason}\"", m.patient, m.method);
        }
        s
    }

    /// Per-criterion rows for every (patient, method), empty where a plan is
    /// missing.
    pub fn criteria_rows(&self) -> Vec<(String, String, CriteriaReport)> {
        self.rows(|e| e.criteria.clone(), || CriteriaReport {
            outcomes: CLINICAL_CRITERIA.iter().map(|&criterion| CriterionOutcome { criterion, achieved: None }).collect(),
        })
    }

    pub fn head_to_head_rows(&self) -> Vec<(String, String, Vec<HeadToHeadRow>)> {
        self.rows(|e| e.head_to_head.clone(), || {
            CLINICAL_CRITERIA.iter().map(|&criterion| HeadToHeadRow { criterion, difference: None }).collect()
        })
    }

    fn rows<T>(&self, present: impl Fn(&EvaluationEntry) -> T, gap: impl Fn() -> T) -> Vec<(String, String, T)> {
        let mut out = Vec::new();
        for p in &self.patients {
            for m in &self.methods {
                let v = self.entry(p, m).map(&present).unwrap_or_else(&gap);
                out.push((p.clone(), m.clone(), v));
            }
        }
        out
    }
}

fn group_index(g: StructureGroup) -> usize {
    StructureGroup::ROWS.iter().position(|&r| r == g).expect("group listed")
}

struct PatientEvaluation {
    entries: Vec<EvaluationEntry>,
    missing: Vec<MissingPlan>,
    /// `(file stem, DVH csv, DVH svg)`.
    dvh: Vec<(String, String, String)>,
}

fn evaluate_patient(run: &Run, id: &str, methods: &[Method]) -> Result<PatientEvaluation> {
    let p = load_patient(&run.dir, id)?;
    let reference = &p.reference.dose;
    let reference_report = criteria_check(reference, &p.phantom).map_err(CliError::fail)?;
    let ptv70 = p.phantom.mask(StructureId::Ptv70);
    let reference_d99 = dose_stats(&reference.values, &ptv70).map_err(CliError::fail)?.d99;
    let gamma_opts = run.config.evaluation.gamma;
    let mut out = PatientEvaluation { entries: Vec::new(), missing: Vec::new(), dvh: Vec::new() };

    let mut plans: Vec<(String, String, std::result::Result<DoseDistribution, String>)> =
        vec![(CLINICAL.to_string(), "clinical".to_string(), Ok(reference.clone()))];
    for &m in methods {
        let rec = run.manifest.stages.get(&format!("optimize:{}", m.id()));
        let dose = match rec {
            Some(r) if r.patients.iter().any(|p| p == id) => {
                let bytes = read_file(&run.path(&plan_path(m, id)))?;
                read_plan(bytes.as_slice()).map(|pl| pl.dose).map_err(|e| e.to_string())
            }
            Some(r) => Err(r.failures.get(id).cloned().unwrap_or_else(|| "not optimized".to_string())),
            None => Err("not optimized".to_string()),
        };
        plans.push((m.label(), m.id(), dose));
    }

    for (label, stem, dose) in plans {
        let dose = match dose {
            Ok(d) => d,
            Err(reason) => {
                out.missing.push(MissingPlan { patient: id.to_string(), method: label, reason });
                continue;
            }
        };
        let evaluated = (|| -> std::result::Result<_, kbp_core::planeval::PlanEvalError> {
            let (normalized, scale) = normalize_to_reference(&dose, reference, &p.phantom)?;
            let criteria = criteria_check(&normalized, &p.phantom)?;
            let gamma = gamma_pass_rate(&normalized, reference, &gamma_opts)?;
            let rates = gamma_group_rates(&gamma, &p.phantom)?;
            let h2h = head_to_head(&criteria, &reference_report)?;
            let d99 = dose_stats(&normalized.values, &ptv70)?.d99;
            Ok((normalized, scale, criteria, gamma.evaluated, rates, h2h, d99))
        })();
        let (normalized, scale, criteria, gamma_evaluated, gamma, head_to_head, d99) = match evaluated {
            Ok(v) => v,
            Err(e) => {
                out.missing.push(MissingPlan { patient: id.to_string(), method: label, reason: e.to_string() });
                continue;
            }
        };
        let mut curves = Vec::new();
        for s in StructureId::ALL {
            let mask = p.phantom.mask(s);
            if !mask.is_empty() {
                curves.push(dvh(&normalized.values, &mask, s).map_err(CliError::fail)?);
            }
        }
        out.dvh.push((format!("{id}_{stem}"), dvh_csv(&curves), dvh_svg(&curves, &format!("{id} {label}"))));
        out.entries.push(EvaluationEntry {
            patient: id.to_string(),
            method: label,
            scale,
            ptv70_d99_gy: d99,
            reference_ptv70_d99_gy: reference_d99,
            criteria,
            gamma,
            gamma_evaluated,
            head_to_head,
        });
    }
    Ok(out)
}

/// Normalize every plan of the test cohort to its reference plan and write
/// the report tables under `report/`.
pub fn cmd_evaluate(run: &mut Run) -> Result<EvaluationSummary> {
    const STAGE: &str = "evaluate";
    run.require("gen-data")?;
    let json = run.path("report/evaluation.json");
    if run.done(STAGE) && json.exists() {
        info!("{STAGE}: already complete");
        return read_json(&json);
    }
    let started = unix_now();
    let ids = run.split()?.test.clone();
    let methods = run.config.evaluation.methods.clone();
    let per_patient: Vec<PatientEvaluation> = {
        let run_ref = &*run;
        ids.par_iter().map(|id| evaluate_patient(run_ref, id, &methods)).collect::<Result<_>>()?
    };

    let mut labels = vec![CLINICAL.to_string()];
    labels.extend(methods.iter().map(|m| m.label()));
    let mut summary = EvaluationSummary {
        methods: labels,
        patients: ids.clone(),
        entries: Vec::new(),
        missing: Vec::new(),
        satisfaction: Vec::new(),
        gamma: Vec::new(),
    };
    let mut dvh_files = Vec::new();
    for pe in per_patient {
        summary.entries.extend(pe.entries);
        summary.missing.extend(pe.missing);
        dvh_files.extend(pe.dvh);
    }
    for m in &summary.methods {
        let mine: Vec<&EvaluationEntry> = summary.entries.iter().filter(|e| &e.method == m).collect();
        if mine.is_empty() {
            summary.satisfaction.push(None);
            summary.gamma.push(None);
            continue;
        }
        let reports: Vec<CriteriaReport> = mine.iter().map(|e| e.criteria.clone()).collect();
        summary.satisfaction.push(Some(aggregate_criteria(&reports).map_err(CliError::fail)?));
        let mut g = [0.0; 3];
        for e in &mine {
            for k in 0..3 {
                g[k] += e.gamma[k];
            }
        }
        summary.gamma.push(Some(g.map(|v| v / mine.len() as f64)));
    }

    let mut files: Vec<(String, String)> = vec![
        ("report/satisfaction.csv".into(), summary.satisfaction_csv()),
        ("report/gamma.csv".into(), summary.gamma_csv()),
        ("report/gamma_patients.csv".into(), summary.gamma_patients_csv()),
        ("report/normalization.csv".into(), summary.normalization_csv()),
        ("report/criteria.csv".into(), criteria_csv(&summary.criteria_rows())),
        ("report/head_to_head.csv".into(), head_to_head_csv(&summary.head_to_head_rows())),
        ("report/missing.csv".into(), summary.missing_csv()),
    ];
    let svg = run.config.evaluation.svg;
    for (stem, csv, plot) in dvh_files {
        files.push((format!("report/dvh/{stem}.csv"), csv));
        if svg {
            files.push((format!("report/dvh/{stem}.svg"), plot));
        }
    }
    if svg {
        let kbp: Vec<_> = summary.head_to_head_rows().into_iter().filter(|(_, m, _)| m != CLINICAL).collect();
        files.push(("report/head_to_head.svg".into(), head_to_head_svg(&kbp, "KBP minus reference (Gy)")));
    }
    let mut artifacts = Vec::new();
    for (rel, text) in files {
        write_file(&run.path(&rel), text.as_bytes())?;
        artifacts.push(rel);
    }
    write_json(&json, &summary)?;
    artifacts.push("report/evaluation.json".into());
    if !summary.missing.is_empty() {
        warn!("{STAGE}: {} plans missing; see report/missing.csv", summary.missing.len());
    }
    let failures = summary.missing.iter().map(|m| (format!("{}/{}", m.patient, m.method), m.reason.clone())).collect();
    let rec = StageRecord { artifacts, patients: ids, failures, started_unix: started, finished_unix: unix_now() };
    run.record(STAGE, rec)?;
    Ok(summary)
}

/// Render `report/summary.md` from the evaluation.
pub fn cmd_report(run: &mut Run) -> Result<PathBuf> {
    const STAGE: &str = "report";
    run.require("evaluate")?;
    let out = run.path("report/summary.md");
    if run.done(STAGE) && out.exists() {
        return Ok(out);
    }
    let started = unix_now();
    let summary: EvaluationSummary = read_json(&run.path("report/evaluation.json"))?;
    let mut s = String::from("# Evaluation summary\n\n");
    let _ = writeln!(s, "Config hash `{}`; {} test patients.\n", run.manifest.config_hash, summary.patients.len());
    let table = |s: &mut String, title: &str, csv: String| {
        let _ = writeln!(s, "## {title}\n");
        for (i, line) in csv.lines().enumerate() {
            let _ = writeln!(s, "| {} |", line.replace(',', " | "));
            if i == 0 {
                let cols = line.split(',').count();
                let _ = writeln!(s, "|{}", "---|".repeat(cols));
            }
        }
        s.push('\n');
    };
    table(&mut s, "Clinical criteria met (%)", summary.satisfaction_csv());
    let g = run.config.evaluation.gamma;
    table(
        &mut s,
        &format!("Gamma pass rate ({:.0}%/{:.0} mm)", g.dose_tol * 100.0, g.dist_tol_mm),
        summary.gamma_csv(),
    );

    let mut h2h = String::from("criterion");
    for m in &summary.methods[1..] {
        let _ = write!(h2h, ",{m}");
    }
    h2h.push('\n');
    for (k, c) in CLINICAL_CRITERIA.iter().enumerate() {
        let _ = write!(h2h, "{c}");
        for m in &summary.methods[1..] {
            let d: Vec<f64> = summary
                .entries
                .iter()
                .filter(|e| &e.method == m)
                .filter_map(|e| e.head_to_head[k].difference)
                .collect();
            let mean = (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64);
            let _ = write!(h2h, ",{}", opt6(mean));
        }
        h2h.push('\n');
    }
    table(&mut s, "Mean difference to the reference plan (Gy, positive is better)", h2h);
    if !summary.missing.is_empty() {
        let _ = writeln!(s, "## Missing plans\n");
        for m in &summary.missing {
            let _ = writeln!(s, "- {} {}: {}", m.patient, m.method, m.reason);
        }
    }
    write_file(&out, s.as_bytes())?;
    let rec = StageRecord {
        artifacts: vec!["report/summary.md".into()],
        patients: summary.patients.clone(),
        started_unix: started,
        finished_unix: unix_now(),
        ..Default::default()
    };
    run.record(STAGE, rec)?;
    Ok(out)
}
