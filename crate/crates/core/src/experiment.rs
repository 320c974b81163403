//! File-level pipeline: every stage reads and writes a directory, so the
//! command line and the test suites drive the same code.
//!
//! Layout of a standard run:
//!
//! ```text
//! out/config.json
//! out/seed_<s>/data/{train.jsonl, eval.jsonl, vocab.json}
//! out/seed_<s>/alpha_<a>/{checkpoint/, best/, metrics.csv, eval.json, train_report.json,
//!                         rl_metrics.csv, rl_report.json, selfcorrect_report.json}
//! out/seed_<s>/analyze/{repr_stats.json, pca_points.csv}
//! out/summary.json
//! ```

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::model::{load_checkpoint, save_checkpoint, CheckpointError, JrmModel, ModelConfig, ModelError};
use crate::reprlab::{self, ReprError, ReprReport};
use crate::rl::{self, EditorPolicy, PolicyEval, RewardSource, RlConfig, RlError};
use crate::selfcorrect::{self, Calibration, CorrectError, SelfCorrectReport};
use crate::synthworld::{gen_dataset, read_dataset, write_dataset, write_vocab, DatasetError, DatasetRecord, Split, Vocabs, WorldConfig};
use crate::tensor::TensorError;
use crate::trainer::{self, EvalMetrics, GroupGradStats, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ExpError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("numerical: {0}")]
    Numerical(String),
}

impl ExpError {
    /// Process exit code: 2 config, 3 I/O, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExpError::Config(_) => 2,
            ExpError::Io { .. } => 3,
            ExpError::Numerical(_) => 4,
        }
    }

    fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        ExpError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, ExpError>;

impl From<TensorError> for ExpError {
    fn from(e: TensorError) -> Self {
        ExpError::Numerical(e.to_string())
    }
}

impl From<ModelError> for ExpError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Tensor(t) => t.into(),
            other => ExpError::Config(other.to_string()),
        }
    }
}

impl From<TrainError> for ExpError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => ExpError::Config(m),
            TrainError::Model(m) => m.into(),
            TrainError::Io { path, message } => ExpError::Io { path, message },
            TrainError::Data { .. } => ExpError::Io {
                path: "dataset".into(),
                message: e.to_string(),
            },
            other => ExpError::Numerical(other.to_string()),
        }
    }
}

impl From<CheckpointError> for ExpError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::ConfigMismatch { .. } => ExpError::Config(e.to_string()),
            other => ExpError::Io {
                path: "checkpoint".into(),
                message: other.to_string(),
            },
        }
    }
}

impl From<DatasetError> for ExpError {
    fn from(e: DatasetError) -> Self {
        ExpError::Io {
            path: "dataset".into(),
            message: e.to_string(),
        }
    }
}

impl From<ReprError> for ExpError {
    fn from(e: ReprError) -> Self {
        match e {
            ReprError::Io { path, message } => ExpError::Io { path, message },
            ReprError::Model(m) => m.into(),
            ReprError::Contract(m) => ExpError::Config(m),
            other => ExpError::Numerical(other.to_string()),
        }
    }
}

impl From<RlError> for ExpError {
    fn from(e: RlError) -> Self {
        match e {
            RlError::Config(m) => ExpError::Config(m),
            RlError::Io { path, message } => ExpError::Io { path, message },
            RlError::Model(m) => m.into(),
            other => ExpError::Numerical(other.to_string()),
        }
    }
}

impl From<CorrectError> for ExpError {
    fn from(e: CorrectError) -> Self {
        match e {
            CorrectError::Io { path, message } => ExpError::Io { path, message },
            CorrectError::Model(m) => m.into(),
            other => ExpError::Config(other.to_string()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data: PathBuf,
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: "data".into(),
            out: "runs".into(),
        }
    }
}

/// Everything a run needs, as one JSON document. Missing keys take their
/// defaults; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed of single-run commands.
    pub seed: u64,
    /// Seeds of the standard experiment.
    pub seeds: Vec<u64>,
    /// Loss weights of the standard experiment; the first is the baseline.
    pub alphas: Vec<f64>,
    pub n_train: usize,
    pub n_eval: usize,
    /// Worker threads for independent runs (0: one per available core).
    pub jobs: usize,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub rl: RlConfig,
    pub paths: Paths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            seeds: vec![1, 2, 3],
            alphas: vec![0.0, 0.7],
            n_train: 2000,
            n_eval: 500,
            jobs: 0,
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig {
                eval_every: 126,
                ..TrainConfig::default()
            },
            rl: RlConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ExpError::Config(m));
        self.world.validate().map_err(ExpError::Config)?;
        self.model.validate()?;
        self.train.validate()?;
        self.rl.validate()?;
        if self.n_train == 0 || self.n_eval == 0 {
            return bad(format!("n_train ({}) and n_eval ({}) must be positive", self.n_train, self.n_eval));
        }
        if self.model.n_regions != self.world.n_regions {
            return bad(format!(
                "model.n_regions {} differs from world.n_regions {}",
                self.model.n_regions, self.world.n_regions
            ));
        }
        let v = Vocabs::new(self.world.n_regions);
        if self.model.instr_vocab != v.input.len() || self.model.expl_vocab != v.explanation.len() {
            return bad(format!(
                "model vocab sizes must be ({}, {}) for this world",
                v.input.len(),
                v.explanation.len()
            ));
        }
        if self.seeds.is_empty() || self.alphas.is_empty() {
            return bad("seeds and alphas must be non-empty".into());
        }
        if let Some(a) = self.alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return bad(format!("alpha {a} outside [0, 1]"));
        }
        Ok(())
    }

    /// Parses a config document; the model's vocabulary sizes follow the
    /// world unless given explicitly.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: Value = serde_json::from_str(text).map_err(|e| ExpError::Config(e.to_string()))?;
        let mut cfg: Self = serde_json::from_value(raw.clone()).map_err(|e| ExpError::Config(e.to_string()))?;
        let model = raw.get("model");
        let given = |k: &str| model.and_then(|m| m.get(k)).is_some();
        let v = Vocabs::new(cfg.world.n_regions);
        if !given("n_regions") {
            cfg.model.n_regions = cfg.world.n_regions;
        }
        if !given("instr_vocab") {
            cfg.model.instr_vocab = v.input.len();
        }
        if !given("expl_vocab") {
            cfg.model.expl_vocab = v.explanation.len();
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ExpError::io(path, e))?;
        Self::from_json(&text)
    }

    fn jobs(&self) -> usize {
        match self.jobs {
            0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
            n => n,
        }
    }

    fn steps_per_epoch(&self) -> usize {
        self.n_train.div_ceil(self.train.batch_size)
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    std::fs::write(path, text).map_err(|e| ExpError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| ExpError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| ExpError::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| ExpError::io(path, e))
}

/// Writes the effective config next to a stage's outputs.
pub fn echo_config(cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    mkdir(dir)?;
    write_json(&dir.join("config.json"), cfg)
}

pub fn gen_data(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<()> {
    cfg.validate()?;
    mkdir(dir)?;
    let train = gen_dataset(seed, cfg.n_train, Split::Train, &cfg.world);
    let eval = gen_dataset(seed, cfg.n_eval, Split::Eval, &cfg.world);
    write_dataset(&train, &dir.join("train.jsonl"))?;
    write_dataset(&eval, &dir.join("eval.jsonl"))?;
    write_vocab(&Vocabs::new(cfg.world.n_regions), &dir.join("vocab.json"))?;
    Ok(())
}

pub fn load_split(data: &Path, split: Split) -> Result<Vec<DatasetRecord>> {
    let name = match split {
        Split::Train => "train.jsonl",
        Split::Eval => "eval.jsonl",
    };
    let path = data.join(name);
    if !path.exists() {
        return Err(ExpError::io(&path, "no such file"));
    }
    Ok(read_dataset(&path)?)
}

pub fn load_model(cfg: &ExperimentConfig, dir: &Path) -> Result<JrmModel> {
    if !dir.join("manifest.json").exists() {
        return Err(ExpError::io(dir, "no checkpoint here"));
    }
    Ok(load_checkpoint(dir, Some(&cfg.model))?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestEval {
    pub step: usize,
    pub metrics: EvalMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub alpha: f64,
    pub seed: u64,
    pub steps: usize,
    pub last: EvalMetrics,
    pub best: Option<BestEval>,
    /// Mean ranking loss over the final epoch's steps.
    pub final_epoch_rank_loss: f64,
    pub max_group_grad: GroupGradStats,
}

/// Trains one model with `cfg.train.alpha` and `cfg.seed`; writes
/// `checkpoint/`, `best/`, `metrics.csv`, `eval.json`, `train_report.json`.
pub fn train_run(cfg: &ExperimentConfig, data: &Path, out: &Path) -> Result<TrainReport> {
    cfg.validate()?;
    mkdir(out)?;
    let train_records = load_split(data, Split::Train)?;
    let eval_records = load_split(data, Split::Eval)?;
    let mut model = JrmModel::new(cfg.model.clone(), cfg.seed)?;
    let mc = cfg.world.max_clauses;
    let train = trainer::prepare(&model, &train_records, mc)?;
    let eval = trainer::prepare(&model, &eval_records, mc)?;
    let tc = TrainConfig {
        seed: cfg.seed,
        ..cfg.train.clone()
    };
    log::info!("train alpha={} seed={} -> {}", tc.alpha, tc.seed, out.display());
    let fit = trainer::fit(&mut model, &train, Some(&eval), &tc)?;
    trainer::write_metrics(&fit.metrics, &out.join("metrics.csv"))?;
    save_checkpoint(&model, &out.join("checkpoint"))?;
    let best = match &fit.best {
        Some((step, metrics, m)) => {
            save_checkpoint(m, &out.join("best"))?;
            Some(BestEval {
                step: *step,
                metrics: metrics.clone(),
            })
        }
        None => None,
    };
    let last = fit.last_eval.clone().unwrap_or_default();
    let spe = train.len().div_ceil(tc.batch_size).min(fit.metrics.len());
    let tail = &fit.metrics[fit.metrics.len() - spe..];
    let report = TrainReport {
        alpha: tc.alpha,
        seed: tc.seed,
        steps: fit.metrics.len(),
        last: last.clone(),
        best,
        final_epoch_rank_loss: tail.iter().map(|r| r.loss_rank).sum::<f64>() / tail.len() as f64,
        max_group_grad: fit.max_group_grad.clone(),
    };
    write_json(&out.join("eval.json"), &EvalFile::new("checkpoint", eval.len(), last))?;
    write_json(&out.join("train_report.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalFile {
    pub checkpoint: String,
    pub n_pairs: usize,
    #[serde(flatten)]
    pub metrics: EvalMetrics,
}

impl EvalFile {
    fn new(checkpoint: &str, n_pairs: usize, metrics: EvalMetrics) -> Self {
        Self {
            checkpoint: checkpoint.to_string(),
            n_pairs,
            metrics,
        }
    }
}

pub fn eval_run(cfg: &ExperimentConfig, checkpoint: &Path, data: &Path, out: &Path) -> Result<EvalFile> {
    let model = load_model(cfg, checkpoint)?;
    let records = load_split(data, Split::Eval)?;
    let pairs = trainer::prepare(&model, &records, cfg.world.max_clauses)?;
    let m = trainer::evaluate(&model, &pairs)?;
    let file = EvalFile::new(&checkpoint.display().to_string(), pairs.len(), m);
    mkdir(out)?;
    write_json(&out.join("eval.json"), &file)?;
    Ok(file)
}

/// Representation statistics of several checkpoints on the eval split.
pub fn analyze_run(cfg: &ExperimentConfig, models: &[(String, PathBuf)], data: &Path, out: &Path) -> Result<ReprReport> {
    if models.is_empty() {
        return Err(ExpError::Config("analyze needs at least one checkpoint".into()));
    }
    let loaded: Vec<(String, JrmModel)> = models
        .iter()
        .map(|(label, dir)| Ok((label.clone(), load_model(cfg, dir)?)))
        .collect::<Result<_>>()?;
    let records = load_split(data, Split::Eval)?;
    let pairs = trainer::prepare(&loaded[0].1, &records, cfg.world.max_clauses)?;
    let refs: Vec<(&str, &JrmModel)> = loaded.iter().map(|(l, m)| (l.as_str(), m)).collect();
    let (report, points) = reprlab::analyze(&refs, &pairs)?;
    mkdir(out)?;
    reprlab::write_repr_outputs(&report, &points, out)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlFile {
    /// `"oracle"` or the reward checkpoint path.
    pub reward: String,
    pub seed: u64,
    pub iterations: usize,
    pub initial: PolicyEval,
    #[serde(rename = "final")]
    pub final_eval: PolicyEval,
    pub policy: EditorPolicy,
}

/// GRPO against the oracle rubric (`reward == None`) or a trained model.
pub fn rl_run(cfg: &ExperimentConfig, reward: Option<&Path>, out: &Path) -> Result<RlFile> {
    cfg.validate()?;
    let model = reward.map(|p| load_model(cfg, p)).transpose()?;
    let source = match &model {
        Some(m) => RewardSource::Model(m),
        None => RewardSource::GroundTruthIf,
    };
    let rc = RlConfig {
        seed: cfg.seed,
        ..cfg.rl.clone()
    };
    let policy = EditorPolicy::base(cfg.world.n_regions, rc.artifact_sd);
    log::info!("rl seed={} reward={:?} -> {}", rc.seed, reward, out.display());
    let report = rl::rl_train(policy, source, &cfg.world, &rc)?;
    mkdir(out)?;
    rl::write_rl_metrics(&report.metrics, &out.join("rl_metrics.csv"))?;
    let file = RlFile {
        reward: reward.map_or("oracle".into(), |p| p.display().to_string()),
        seed: rc.seed,
        iterations: rc.iterations,
        initial: report.initial,
        final_eval: report.final_eval,
        policy: report.policy,
    };
    write_json(&out.join("rl_report.json"), &file)?;
    Ok(file)
}

/// Self-correction on the eval split; the score calibration is fitted on the
/// training split.
pub fn selfcorrect_run(cfg: &ExperimentConfig, checkpoint: &Path, data: &Path, out: &Path) -> Result<SelfCorrectReport> {
    let model = load_model(cfg, checkpoint)?;
    let mc = cfg.world.max_clauses;
    let cal: Calibration = Calibration::fit(&model, &load_split(data, Split::Train)?, mc)?;
    let report = selfcorrect::self_correct(&model, &load_split(data, Split::Eval)?, cal, mc)?;
    mkdir(out)?;
    selfcorrect::write_report(&report, &out.join("selfcorrect_report.json"))?;
    Ok(report)
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed_{seed}"))
}

pub fn alpha_dir(out: &Path, seed: u64, alpha: f64) -> PathBuf {
    seed_dir(out, seed).join(format!("alpha_{alpha}"))
}

/// Runs `f` over `items` on up to `jobs` threads; results keep input order.
fn par_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("result slots")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|r| r.expect("every item ran"))
        .collect()
}

/// The full comparison: data, training, evaluation, representation analysis,
/// RL with each learned reward and self-correction, for every seed and
/// alpha, followed by [`report`].
pub fn standard(cfg: &ExperimentConfig, out: &Path) -> Result<Value> {
    cfg.validate()?;
    echo_config(cfg, out)?;
    let jobs = cfg.jobs();
    par_map(&cfg.seeds, jobs, |&s| gen_data(cfg, s, &seed_dir(out, s).join("data")))?;

    let runs: Vec<(u64, f64)> = cfg
        .seeds
        .iter()
        .flat_map(|&s| cfg.alphas.iter().map(move |&a| (s, a)))
        .collect();
    let run_cfg = |s: u64, a: f64| ExperimentConfig {
        seed: s,
        train: TrainConfig {
            alpha: a,
            ..cfg.train.clone()
        },
        ..cfg.clone()
    };
    par_map(&runs, jobs, |&(s, a)| {
        train_run(&run_cfg(s, a), &seed_dir(out, s).join("data"), &alpha_dir(out, s, a)).map(|_| ())
    })?;
    par_map(&runs, jobs, |&(s, a)| {
        let c = run_cfg(s, a);
        let dir = alpha_dir(out, s, a);
        rl_run(&c, Some(&dir.join("checkpoint")), &dir)?;
        selfcorrect_run(&c, &dir.join("checkpoint"), &seed_dir(out, s).join("data"), &dir)?;
        Ok(())
    })?;
    par_map(&cfg.seeds, jobs, |&s| {
        let models: Vec<(String, PathBuf)> = cfg
            .alphas
            .iter()
            .map(|&a| (format!("alpha={a}"), alpha_dir(out, s, a).join("checkpoint")))
            .collect();
        analyze_run(cfg, &models, &seed_dir(out, s).join("data"), &seed_dir(out, s).join("analyze")).map(|_| ())
    })?;
    report(out)
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

const ABSENT: &str = "absent";

/// Per-alpha medians over seeds of `get`, or `"absent"` when any input file
/// is missing. `holds` compares the last alpha against the first.
fn comparison(
    cfg: &ExperimentConfig,
    out: &Path,
    file: &str,
    higher_is_better: bool,
    get: impl Fn(&Path, u64, f64) -> Result<f64>,
) -> Result<Value> {
    let mut per_alpha = serde_json::Map::new();
    let mut medians = Vec::new();
    for &a in &cfg.alphas {
        let mut vals = Vec::new();
        for &s in &cfg.seeds {
            let path = if file.starts_with("analyze/") {
                seed_dir(out, s).join(file)
            } else {
                alpha_dir(out, s, a).join(file)
            };
            if !path.exists() {
                return Ok(json!(ABSENT));
            }
            vals.push(get(&path, s, a)?);
        }
        let m = median(&vals);
        medians.push(m);
        per_alpha.insert(a.to_string(), json!({ "per_seed": vals, "median": m }));
    }
    let (first, last) = (medians[0], medians[medians.len() - 1]);
    let holds = if higher_is_better { last >= first } else { last <= first };
    Ok(json!({ "by_alpha": per_alpha, "holds": holds }))
}

/// Aggregates a standard-run directory into `summary.json`. Sections whose
/// inputs are missing are recorded as `"absent"`.
pub fn report(out: &Path) -> Result<Value> {
    let cfg_path = out.join("config.json");
    if !cfg_path.exists() {
        return Err(ExpError::io(&cfg_path, "no such file"));
    }
    let cfg: ExperimentConfig = read_json(&cfg_path)?;
    let label = |a: f64| format!("alpha={a}");

    let joint_benefit = comparison(&cfg, out, "train_report.json", true, |p, _, _| {
        Ok(read_json::<TrainReport>(p)?.last.pref_acc_if)
    })?;
    let best_if = comparison(&cfg, out, "train_report.json", true, |p, _, _| {
        let r = read_json::<TrainReport>(p)?;
        Ok(r.best.map_or(r.last.pref_acc_if, |b| b.metrics.pref_acc_if))
    })?;
    let representation = comparison(&cfg, out, "analyze/repr_stats.json", true, |p, _, a| {
        let r: ReprReport = read_json(p)?;
        r.models
            .iter()
            .find(|m| m.model == label(a))
            .map(|m| m.effective_rank)
            .ok_or_else(|| ExpError::io(p, format!("no stats for {}", label(a))))
    })?;
    let spe = cfg.steps_per_epoch();
    let loss_dynamics = comparison(&cfg, out, "metrics.csv", false, |p, _, _| {
        let rows = trainer::read_metrics(p)?;
        let tail = &rows[rows.len().saturating_sub(spe)..];
        if tail.is_empty() {
            return Err(ExpError::io(p, "no rows"));
        }
        Ok(tail.iter().map(|r| r.loss_rank).sum::<f64>() / tail.len() as f64)
    })?;
    let rl_section = if cfg
        .seeds
        .iter()
        .all(|&s| cfg.alphas.iter().all(|&a| alpha_dir(out, s, a).join("rl_metrics.csv").exists()))
    {
        comparison(&cfg, out, "rl_report.json", true, |p, _, _| {
            Ok(read_json::<RlFile>(p)?.final_eval.mean_gt_if)
        })?
    } else {
        json!(ABSENT)
    };
    let selfcorrect_section = selfcorrect_summary(&cfg, out)?;

    let summary = json!({
        "seeds": cfg.seeds,
        "alphas": cfg.alphas,
        "heldout_if_accuracy_last": joint_benefit,
        "heldout_if_accuracy_best": best_if,
        "effective_rank": representation,
        "final_epoch_rank_loss": loss_dynamics,
        "rl_final_gt_if": rl_section,
        "selfcorrect": selfcorrect_section,
    });
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

fn selfcorrect_summary(cfg: &ExperimentConfig, out: &Path) -> Result<Value> {
    let mut by_alpha = serde_json::Map::new();
    for &a in &cfg.alphas {
        let mut reports = Vec::new();
        for &s in &cfg.seeds {
            let p = alpha_dir(out, s, a).join("selfcorrect_report.json");
            if !p.exists() {
                return Ok(json!(ABSENT));
            }
            reports.push(read_json::<SelfCorrectReport>(&p)?);
        }
        let buckets: Vec<Value> = selfcorrect::THRESHOLDS
            .iter()
            .enumerate()
            .map(|(k, &t)| {
                let deltas: Vec<f64> = reports.iter().filter_map(|r| r.buckets[k].mean_score_delta).collect();
                let gt: Vec<f64> = reports.iter().filter_map(|r| r.buckets[k].mean_gt_if_delta).collect();
                let med = (!deltas.is_empty()).then(|| median(&deltas));
                json!({
                    "threshold": t,
                    "counts": reports.iter().map(|r| r.buckets[k].count).collect::<Vec<_>>(),
                    "median_score_delta": med,
                    "median_gt_if_delta": (!gt.is_empty()).then(|| median(&gt)),
                    "nonnegative": med.is_none_or(|m| m >= 0.0),
                })
            })
            .collect();
        let all = buckets.iter().all(|b| b["nonnegative"] == json!(true));
        by_alpha.insert(a.to_string(), json!({ "buckets": buckets, "all_nonnegative": all }));
    }
    Ok(json!({ "by_alpha": by_alpha }))
}

/// Checks the directional claims recorded in a summary; returns the names of
/// those that do not hold. Absent sections are skipped.
pub fn failed_checks(summary: &Value) -> Vec<String> {
    let mut failed = Vec::new();
    for key in [
        "heldout_if_accuracy_last",
        "effective_rank",
        "final_epoch_rank_loss",
        "rl_final_gt_if",
    ] {
        if summary[key]["holds"] == json!(false) {
            failed.push(key.to_string());
        }
    }
    if let (Some(sc), Some(last)) = (
        summary["selfcorrect"]["by_alpha"].as_object(),
        summary["alphas"].as_array().and_then(|a| a.last()),
    ) {
        let key = last.as_f64().map(|a| a.to_string()).unwrap_or_default();
        if sc.get(&key).is_some_and(|v| v["all_nonnegative"] == json!(false)) {
            failed.push("selfcorrect".into());
        }
    }
    failed
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"seed": 3, "bogus": 1}"#),
            Err(ExpError::Config(_))
        ));
        assert!(matches!(
            ExperimentConfig::from_json(r#"{"train": {"alpah": 0.5}}"#),
            Err(ExpError::Config(_))
        ));
    }

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(ExperimentConfig::from_json("{}").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn model_vocab_follows_world() {
        let c = ExperimentConfig::from_json(r#"{"world": {"n_regions": 6}}"#).unwrap();
        assert_eq!(c.model.n_regions, 6);
        assert_eq!(c.model.expl_vocab, Vocabs::new(6).explanation.len());
        c.validate().unwrap();
    }

    #[test]
    fn zero_records_is_a_config_error() {
        let c = ExperimentConfig {
            n_train: 0,
            ..Default::default()
        };
        let e = c.validate().unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn par_map_keeps_order_and_propagates_errors() {
        let xs: Vec<u64> = (0..20).collect();
        assert_eq!(par_map(&xs, 3, |&x| Ok(x * 2)).unwrap(), xs.iter().map(|x| x * 2).collect::<Vec<_>>());
        let r = par_map(&xs, 3, |&x| {
            if x == 7 {
                Err(ExpError::Numerical("boom".into()))
            } else {
                Ok(x)
            }
        });
        assert!(matches!(r, Err(ExpError::Numerical(_))));
    }
}
