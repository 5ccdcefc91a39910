//! Experiment configuration and the baseline / adaptation training runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{flip_tensor, load_dataset, Dataset, Sample, Split};
use crate::detector::{Component, DetectionLoss, Detector, DetectorConfig, DomainId};
use crate::error::{Error, Result};
use crate::eval::{evaluate_detector, EvalTable, ForgettingReport, StageEval};
use crate::nn::{sgd_step, Gradients, OptimizerConfig, ParamGroup};
use crate::schedule::{
    advance, apply_stage_lrs, build_param_groups, preset, rederive_param_groups, Advance, ClrConfig, ComponentLr,
    SchedulePlan, ScheduleState, StagePlan,
};
use crate::seed;

pub const CONFIG_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TIMINGS_FILE: &str = "timings.json";
pub const REPORT_FILE: &str = "report.txt";

pub fn checkpoint_file(stage: usize) -> String {
    format!("checkpoint_stage_{stage}.json")
}

pub fn eval_file(domain: &str, stage: usize) -> String {
    format!("eval_{domain}_stage_{stage}.json")
}

fn default_source() -> String {
    "S".into()
}
fn default_target() -> String {
    "T".into()
}
fn default_baseline_batch() -> usize {
    4
}
fn default_adapt_batch() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    #[serde(default = "default_source")]
    pub domain: String,
    pub epochs: usize,
    #[serde(default = "default_baseline_batch")]
    pub batch_size: usize,
    pub lr: f64,
    pub max_lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_size_iters: Option<usize>,
    #[serde(default = "OptimizerConfig::default_momentum")]
    pub momentum: f64,
    #[serde(default = "OptimizerConfig::default_weight_decay")]
    pub weight_decay: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            domain: default_source(),
            epochs: 5,
            batch_size: default_baseline_batch(),
            lr: 1e-3,
            max_lr: 6e-3,
            step_size_iters: None,
            momentum: OptimizerConfig::default_momentum(),
            weight_decay: OptimizerConfig::default_weight_decay(),
        }
    }
}

impl BaselineConfig {
    /// The baseline as a one-stage plan training every component of `domain`.
    pub fn plan(&self) -> SchedulePlan {
        let components = [
            Component::Backbone,
            Component::Fpn,
            Component::Rpn,
            Component::Head(self.domain.clone()),
        ]
        .into_iter()
        .map(|c| ComponentLr::active(c, self.lr))
        .collect();
        SchedulePlan::new(vec![StagePlan::new(
            self.epochs,
            components,
            ClrConfig {
                base_lr: self.lr,
                max_lr: self.max_lr,
                step_size_iters: self.step_size_iters,
            },
        )])
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptationConfig {
    #[serde(default = "default_source")]
    pub source_domain: String,
    #[serde(default = "default_target")]
    pub domain: String,
    #[serde(default = "default_adapt_batch")]
    pub batch_size: usize,
    #[serde(default = "OptimizerConfig::default_momentum")]
    pub momentum: f64,
    #[serde(default = "OptimizerConfig::default_weight_decay")]
    pub weight_decay: f64,
    /// Name of a built-in plan; mutually exclusive with `plan`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<SchedulePlan>,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            source_domain: default_source(),
            domain: default_target(),
            batch_size: default_adapt_batch(),
            momentum: OptimizerConfig::default_momentum(),
            weight_decay: OptimizerConfig::default_weight_decay(),
            preset: Some("table3_row4".into()),
            plan: None,
        }
    }
}

impl AdaptationConfig {
    pub fn resolve_plan(&self, preset_override: Option<&str>) -> Result<SchedulePlan> {
        let plan = match (preset_override, &self.preset, &self.plan) {
            (Some(name), _, _) => preset(name, &self.domain)?,
            (None, Some(_), Some(_)) => {
                return Err(Error::InvalidConfig("adaptation sets both `preset` and `plan`".into()))
            }
            (None, Some(name), None) => preset(name, &self.domain)?,
            (None, None, Some(plan)) => plan.clone(),
            (None, None, None) => return Err(Error::InvalidConfig("adaptation needs a `preset` or a `plan`".into())),
        };
        plan.validate()?;
        if !plan.trained_components().contains(&Component::Head(self.domain.clone())) {
            return Err(Error::InvalidSchedule(format!(
                "no stage trains head.{}, so nothing adapts to the new domain",
                self.domain
            )));
        }
        Ok(plan)
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub score_threshold: f64,
    pub nms_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            score_threshold: 0.05,
            nms_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format_version: u32,
    pub seed: u64,
    /// Dataset directory per domain, relative to the config file.
    pub datasets: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub model: DetectorConfig,
    #[serde(default)]
    pub baseline: BaselineConfig,
    #[serde(default)]
    pub adaptation: AdaptationConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Iterations between loss log lines.
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_log_every() -> usize {
    50
}

impl ExperimentConfig {
    pub fn new(seed: u64, datasets: BTreeMap<String, PathBuf>) -> Self {
        ExperimentConfig {
            format_version: CONFIG_FORMAT_VERSION,
            seed,
            datasets,
            model: DetectorConfig::default(),
            baseline: BaselineConfig::default(),
            adaptation: AdaptationConfig::default(),
            eval: EvalConfig::default(),
            log_every: default_log_every(),
        }
    }

    /// Parses and validates config JSON. Paths are not checked here.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_slice(bytes).map_err(|e| Error::json("config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_FORMAT_VERSION {
            return Err(Error::InvalidConfig(format!("unsupported format_version {}", self.format_version)));
        }
        self.model.validate()?;
        if self.baseline.batch_size == 0 || self.adaptation.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        self.baseline.optimizer().validate()?;
        self.adaptation.optimizer().validate()?;
        self.baseline.plan().stages[0].validate()?;
        if self.adaptation.domain == self.adaptation.source_domain {
            return Err(Error::InvalidConfig("adaptation domain must differ from the source domain".into()));
        }
        if self.adaptation.preset.is_some() || self.adaptation.plan.is_some() {
            self.adaptation.resolve_plan(None)?;
        }
        let e = &self.eval;
        if !((0.0..1.0).contains(&e.score_threshold) && (0.0..=1.0).contains(&e.nms_threshold)) {
            return Err(Error::InvalidConfig("eval thresholds must lie in [0, 1)".into()));
        }
        if self.log_every == 0 {
            return Err(Error::InvalidConfig("log_every must be at least 1".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, Vec<u8>)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let cfg: ExperimentConfig = serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok((cfg, bytes))
    }

    pub fn dataset_path(&self, domain: &str, base_dir: &Path) -> Result<PathBuf> {
        self.datasets
            .get(domain)
            .map(|p| base_dir.join(p))
            .ok_or_else(|| Error::InvalidConfig(format!("no dataset configured for domain `{domain}`")))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub label: String,
    pub checkpoint: String,
    pub checkpoint_sha256: String,
    pub eval: BTreeMap<String, EvalTable>,
}

/// Everything a run produced, minus wall-clock data (kept in `timings.json`
/// so that two runs with the same seed write identical manifests).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub toolkit_version: String,
    pub config_sha256: String,
    pub config: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from_checkpoint_sha256: Option<String>,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn verify_config(&self) -> bool {
        sha256_hex(self.config.as_bytes()) == self.config_sha256
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
    }

    pub fn report(&self) -> ForgettingReport {
        ForgettingReport {
            stages: self
                .stages
                .iter()
                .map(|s| StageEval {
                    stage: s.stage,
                    label: s.label.clone(),
                    tables: s.eval.clone(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StageLog {
    /// Batch-mean loss at every iteration.
    pub losses: Vec<DetectionLoss>,
}

impl StageLog {
    pub fn mean_l_det(&self, range: std::ops::Range<usize>) -> f64 {
        let s = &self.losses[range];
        s.iter().map(|l| l.l_det).sum::<f64>() / s.len().max(1) as f64
    }
}

/// Training inputs shared by every stage of one run.
pub struct TrainSetup<'a> {
    pub samples: &'a [&'a Sample],
    pub domain: DomainId,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Distinguishes the random streams of separate runs with one seed.
    pub run: u64,
    pub log_every: usize,
}

fn stream_index(run: u64, stage: usize, epoch: usize) -> u64 {
    (run << 48) | ((stage as u64) << 24) | epoch as u64
}

/// Runs every stage of `plan`, calling `on_stage_end(stage, model)` after each.
pub fn train_plan(
    model: &mut Detector,
    plan: &SchedulePlan,
    setup: &TrainSetup<'_>,
    mut on_stage_end: impl FnMut(usize, &Detector) -> Result<()>,
) -> Result<Vec<StageLog>> {
    plan.validate()?;
    for stage in &plan.stages {
        build_param_groups(model, stage)?;
    }
    if setup.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
    }
    let iters_per_epoch = setup.samples.len().div_ceil(setup.batch_size);
    let mut state = ScheduleState::default();
    let mut groups: Vec<ParamGroup> = Vec::new();
    let mut current = None;
    let mut finished = 0;
    let mut logs: Vec<StageLog> = plan.stages.iter().map(|_| StageLog::default()).collect();
    loop {
        let (k, stage) = match advance(plan, &mut state) {
            Advance::Done => break,
            Advance::Stage(k, s) => (k, s),
        };
        if current != Some(k) {
            for j in finished..k {
                on_stage_end(j, model)?;
            }
            finished = k;
            groups = rederive_param_groups(model, stage, &groups)?;
            current = Some(k);
            info!(
                "stage {}: {} epochs, active {:?}",
                k + 1,
                stage.epochs,
                stage.active().iter().map(|c| c.to_string()).collect::<Vec<_>>()
            );
        }
        let step_size = stage.clr.step_size(iters_per_epoch);
        let active = stage.active();
        let idx = stream_index(setup.run, k, state.epochs_completed);
        let mut order: Vec<usize> = (0..setup.samples.len()).collect();
        order.shuffle(&mut seed::rng(setup.seed, "shuffle", idx));
        let mut flip_rng = seed::rng(setup.seed, "flip", idx);
        let mut target_rng = seed::rng(setup.seed, "targets", idx);
        for batch in order.chunks(setup.batch_size) {
            apply_stage_lrs(&mut groups, stage, state.iteration, step_size)?;
            let diverged = |what: String| {
                Error::NonFinite(format!(
                    "stage {} epoch {} iteration {}: {what}; batch stream seed {} (images {:?})",
                    k + 1,
                    state.epochs_completed + 1,
                    state.iteration,
                    seed::derive(setup.seed, "targets", idx),
                    batch.iter().map(|&i| setup.samples[i].record.id).collect::<Vec<_>>()
                ))
            };
            let mut grads = Gradients::new();
            let mut loss = (0.0, 0.0);
            for &i in batch {
                let sample = setup.samples[i];
                let (mut image, mut gts) = (sample.image.to_tensor(), sample.ground_truth());
                if flip_rng.gen_bool(0.5) {
                    (image, gts) = flip_tensor(&image, &gts);
                }
                let (l, g) = match model.train_image(&image, &gts, &setup.domain, &active, &mut target_rng) {
                    Err(Error::NonFinite(what)) => return Err(diverged(what)),
                    other => other?,
                };
                loss.0 += l.l_cls;
                loss.1 += l.l_reg;
                grads.merge(g)?;
            }
            let n = batch.len() as f64;
            grads.scale(1.0 / n);
            let batch_loss = DetectionLoss::new(loss.0 / n, loss.1 / n);
            if !batch_loss.l_det.is_finite() || !grads.all_finite() {
                return Err(diverged(format!("loss {batch_loss:?}")));
            }
            sgd_step(&mut groups, model, &grads, &setup.optimizer)?;
            if state.iteration % setup.log_every == 0 {
                info!(
                    "stage {} iter {}: l_cls {:.4} l_reg {:.4} l_det {:.4}",
                    k + 1,
                    state.iteration,
                    batch_loss.l_cls,
                    batch_loss.l_reg,
                    batch_loss.l_det
                );
            }
            logs[k].losses.push(batch_loss);
            state.iteration += 1;
        }
        state.epochs_completed += 1;
        debug!("stage {} finished epoch {}", k + 1, state.epochs_completed);
    }
    for k in finished..plan.stages.len() {
        on_stage_end(k, model)?;
    }
    Ok(logs)
}

fn load_domain_dataset(config: &ExperimentConfig, domain: &str, base_dir: &Path) -> Result<Dataset> {
    let path = config.dataset_path(domain, base_dir)?;
    let ds = load_dataset(&path)?;
    if let Some(c) = ds.categories.iter().find(|c| c.domain != domain) {
        return Err(Error::InvalidDataset(format!(
            "{} holds category `{}` of domain {}, expected domain {domain}",
            path.display(),
            c.name,
            c.domain
        )));
    }
    Ok(ds)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn checkpoint_digest(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for p in [path.to_path_buf(), crate::nn::checkpoint::blob_path(path)] {
        h.update(fs::read(&p).map_err(|e| Error::io(&p, e))?);
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Timings {
    stages: Vec<(usize, f64)>,
}

/// Trains the source-domain baseline and writes stage 0 artifacts to `out`.
pub fn run_train(config: &ExperimentConfig, config_bytes: &[u8], base_dir: &Path, out: &Path) -> Result<(RunManifest, StageLog)> {
    config.validate()?;
    let domain = config.baseline.domain.clone();
    let data = load_domain_dataset(config, &domain, base_dir)?;
    let train = data.split(Split::Train);
    let val = data.split(Split::Val);
    if train.is_empty() && config.baseline.epochs > 0 {
        return Err(Error::InvalidDataset(format!("domain {domain} has no training images")));
    }
    create_out(out)?;

    let mut rng = seed::rng(config.seed, "init", 0);
    let mut model = Detector::new(config.model.clone(), &mut rng)?;
    let id = model.add_domain(&domain, data.categories.clone(), &mut rng)?;
    let setup = TrainSetup {
        samples: &train,
        domain: id,
        batch_size: config.baseline.batch_size,
        optimizer: config.baseline.optimizer(),
        seed: config.seed,
        run: 0,
        log_every: config.log_every,
    };
    let started = Instant::now();
    let plan = config.baseline.plan();
    let mut logs = train_plan(&mut model, &plan, &setup, |_, _| Ok(()))?;
    let elapsed = started.elapsed().as_secs_f64();

    let ckpt = out.join(checkpoint_file(0));
    model.save(&ckpt)?;
    let mut eval = BTreeMap::new();
    if !val.is_empty() {
        let table = evaluate_detector(&model, &data, Split::Val, &domain, config.eval.score_threshold, config.eval.nms_threshold)?;
        write_json(&out.join(eval_file(&domain, 0)), &table)?;
        eval.insert(domain.clone(), table);
    }
    let manifest = RunManifest {
        command: "train".into(),
        toolkit_version: env!("CARGO_PKG_VERSION").into(),
        config_sha256: sha256_hex(config_bytes),
        config: String::from_utf8_lossy(config_bytes).into_owned(),
        from_checkpoint_sha256: None,
        stages: vec![StageRecord {
            stage: 0,
            label: "baseline".into(),
            checkpoint: checkpoint_file(0),
            checkpoint_sha256: checkpoint_digest(&ckpt)?,
            eval,
        }],
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    write_json(&out.join(TIMINGS_FILE), &Timings { stages: vec![(0, elapsed)] })?;
    Ok((manifest, logs.remove(0)))
}

/// Evaluates each checkpoint on the validation split of every domain it has a head for.
pub fn forgetting_report(
    checkpoints: &[(usize, String, PathBuf)],
    datasets: &BTreeMap<String, Dataset>,
    eval: &EvalConfig,
) -> Result<ForgettingReport> {
    let mut report = ForgettingReport::default();
    for (stage, label, path) in checkpoints {
        let model = Detector::load(path)?;
        let mut tables = BTreeMap::new();
        for name in model.domain_names() {
            let data = datasets
                .get(&name)
                .ok_or_else(|| Error::InvalidConfig(format!("no validation set for domain `{name}`")))?;
            let table = evaluate_detector(&model, data, Split::Val, &name, eval.score_threshold, eval.nms_threshold)?;
            tables.insert(name, table);
        }
        report.push(StageEval {
            stage: *stage,
            label: label.clone(),
            tables,
        });
    }
    Ok(report)
}

fn stage_label(stage: &StagePlan) -> String {
    stage
        .components
        .iter()
        .filter_map(|c| c.lr.map(|lr| format!("{}({lr:e})", c.component)))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Adds the target head to a baseline checkpoint and runs the adaptation plan.
/// Stage 0 in the outputs is the unmodified baseline.
pub fn run_adapt(
    config: &ExperimentConfig,
    config_bytes: &[u8],
    base_dir: &Path,
    from_checkpoint: &Path,
    preset_override: Option<&str>,
    out: &Path,
) -> Result<(RunManifest, Vec<StageLog>)> {
    config.validate()?;
    let ac = &config.adaptation;
    let plan = ac.resolve_plan(preset_override)?;
    if ac.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
    }
    let mut model = Detector::load(from_checkpoint)?;
    model.domain(&ac.source_domain)?;
    if model.domain(&ac.domain).is_ok() {
        return Err(Error::InvalidConfig(format!("checkpoint already has a head for domain `{}`", ac.domain)));
    }
    let source = load_domain_dataset(config, &ac.source_domain, base_dir)?;
    let target = load_domain_dataset(config, &ac.domain, base_dir)?;
    let id = model.add_domain(&ac.domain, target.categories.clone(), &mut seed::rng(config.seed, "init", 1))?;
    for stage in &plan.stages {
        build_param_groups(&model, stage)?;
    }
    let train = target.split(Split::Train);
    if train.is_empty() && plan.total_epochs() > 0 {
        return Err(Error::InvalidDataset(format!("domain {} has no training images", ac.domain)));
    }
    create_out(out)?;

    // the baseline itself, re-saved so every stage lives in one directory
    let base_model = Detector::load(from_checkpoint)?;
    let base_ckpt = out.join(checkpoint_file(0));
    base_model.save(&base_ckpt)?;

    let setup = TrainSetup {
        samples: &train,
        domain: id,
        batch_size: ac.batch_size,
        optimizer: ac.optimizer(),
        seed: config.seed,
        run: 1,
        log_every: config.log_every,
    };
    let mut timings = Vec::new();
    let mut clock = Instant::now();
    let logs = train_plan(&mut model, &plan, &setup, |k, m| {
        m.save(&out.join(checkpoint_file(k + 1)))?;
        timings.push((k + 1, clock.elapsed().as_secs_f64()));
        clock = Instant::now();
        Ok(())
    })?;

    let mut checkpoints = vec![(0, "baseline".to_string(), base_ckpt)];
    for k in 0..plan.stages.len() {
        checkpoints.push((k + 1, stage_label(&plan.stages[k]), out.join(checkpoint_file(k + 1))));
    }
    let datasets: BTreeMap<String, Dataset> =
        [(ac.source_domain.clone(), source), (ac.domain.clone(), target)].into_iter().collect();
    let report = forgetting_report(&checkpoints, &datasets, &config.eval)?;

    let mut stages = Vec::new();
    for ((stage, label, path), st) in checkpoints.iter().zip(&report.stages) {
        for (domain, table) in &st.tables {
            write_json(&out.join(eval_file(domain, *stage)), table)?;
        }
        stages.push(StageRecord {
            stage: *stage,
            label: label.clone(),
            checkpoint: checkpoint_file(*stage),
            checkpoint_sha256: checkpoint_digest(path)?,
            eval: st.tables.clone(),
        });
    }
    let manifest = RunManifest {
        command: "adapt".into(),
        toolkit_version: env!("CARGO_PKG_VERSION").into(),
        config_sha256: sha256_hex(config_bytes),
        config: String::from_utf8_lossy(config_bytes).into_owned(),
        from_checkpoint_sha256: Some(checkpoint_digest(from_checkpoint)?),
        stages,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    write_json(&out.join(TIMINGS_FILE), &Timings { stages: timings })?;
    fs::write(out.join(REPORT_FILE), report.to_string()).map_err(|e| Error::io(out.join(REPORT_FILE), e))?;
    Ok((manifest, logs))
}

/// Process exit code for an error: 2 usage or configuration, 3 I/O, 4 numerical.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } | Error::MissingImage { .. } | Error::Png { .. } => 3,
        Error::NonFinite(_) => 4,
        _ => 2,
    }
}
