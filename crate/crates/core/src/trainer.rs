//! Joint-loss training: AdamW with a warmup-cosine schedule, gradient
//! clipping, evaluation and metric logging.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Binding, JrmModel, ModelError, ParamGroup};
use crate::objectives::{self, ObjectiveError, PreferencePairBatch};
use crate::rng::SeedStream;
use crate::synthworld::{DatasetRecord, PrefLabel, Vocabs};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step} (rank {rank}, lm {lm})")]
    NonFiniteLoss { step: usize, rank: f64, lm: f64 },
    #[error("non-finite gradient for parameter `{name}` at step {step}")]
    NonFiniteGrad { step: usize, name: String },
    #[error("record {index}: {message}")]
    Data { index: usize, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("writing {path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub lr_peak: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub seed: u64,
    /// Evaluate every this many steps (0: only after the last step).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            lr_peak: 3e-4,
            betas: (0.9, 0.95),
            eps: 1e-8,
            weight_decay: 0.1,
            warmup_ratio: 0.05,
            epochs: 10,
            batch_size: 32,
            grad_clip: 1.0,
            seed: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad(format!("warmup_ratio {} outside [0, 1)", self.warmup_ratio));
        }
        if !(self.lr_peak > 0.0) || self.batch_size == 0 || self.epochs == 0 {
            return bad("lr_peak, batch_size and epochs must be positive".into());
        }
        if !(self.grad_clip > 0.0) || self.weight_decay < 0.0 || !(self.eps > 0.0) {
            return bad("grad_clip and eps must be positive, weight_decay nonnegative".into());
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("betas {:?} outside [0, 1)", self.betas));
        }
        Ok(())
    }
}

/// One logged optimizer step. Eval columns are empty on steps without an
/// evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_rank: f64,
    pub loss_lm: f64,
    pub grad_norm: f64,
    pub eval_pref_acc_if: Option<f64>,
    pub eval_pref_acc_vq: Option<f64>,
    pub eval_lm_ppl: Option<f64>,
}

pub fn write_metrics(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let io = |e: &dyn std::fmt::Display| TrainError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| io(&e))?;
    for r in rows {
        w.serialize(r).map_err(|e| io(&e))?;
    }
    w.flush().map_err(|e| io(&e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let io = |e: &dyn std::fmt::Display| TrainError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| io(&e))?;
    r.deserialize().map(|row| row.map_err(|e| io(&e))).collect()
}

/// Linear warmup to `lr_peak`, then half-cosine decay to zero.
pub fn cosine_lr(step: usize, total_steps: usize, config: &TrainConfig) -> f64 {
    let total = total_steps.max(1) as f64;
    let s = step.min(total_steps) as f64;
    let warm = (config.warmup_ratio * total).round();
    if s < warm {
        return config.lr_peak * s / warm;
    }
    let rest = total - warm;
    if rest <= 0.0 {
        return config.lr_peak;
    }
    let t = (s - warm) / rest;
    config.lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

/// One decoupled-weight-decay Adam update in place.
pub fn adamw_step(
    param: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
    config: &TrainConfig,
) {
    if state.m.is_empty() {
        state.m = vec![0.0; param.len()];
        state.v = vec![0.0; param.len()];
    }
    assert_eq!(param.len(), grad.len(), "parameter and gradient lengths differ");
    assert_eq!(param.len(), state.m.len(), "parameter and optimizer state lengths differ");
    let (b1, b2) = config.betas;
    state.t += 1;
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        param[i] -= lr * (mh / (vh.sqrt() + config.eps) + weight_decay * param[i]);
    }
}

/// A record turned into model inputs.
#[derive(Clone, Debug)]
pub struct PreparedPair {
    pub seq_a: Vec<usize>,
    pub seq_b: Vec<usize>,
    pub expl_a: Vec<usize>,
    pub expl_b: Vec<usize>,
    pub labels: [PrefLabel; 2],
}

pub fn prepare(model: &JrmModel, records: &[DatasetRecord], max_clauses: usize) -> Result<Vec<PreparedPair>> {
    let vocabs = Vocabs::new(model.config().n_regions);
    records
        .iter()
        .enumerate()
        .map(|(index, r)| {
            let data = |message: String| TrainError::Data { index, message };
            let seq = |res| -> Result<Vec<usize>> {
                let (i, s, e) = vocabs.encode_inputs(&r.scene, &r.instruction, res, max_clauses);
                Ok(model.layout_tokens(&i, &s, &e)?)
            };
            Ok(PreparedPair {
                seq_a: seq(&r.result_a)?,
                seq_b: seq(&r.result_b)?,
                expl_a: vocabs.expl_ids(&r.expl_a).map_err(data)?,
                expl_b: vocabs.expl_ids(&r.expl_b).map_err(data)?,
                labels: [r.labels.instruction, r.labels.visual],
            })
        })
        .collect()
}

fn lm_io(expl: &[&Vec<usize>]) -> (Vec<Vec<usize>>, Vec<usize>) {
    let inputs = expl.iter().map(|e| e[..e.len() - 1].to_vec()).collect();
    let targets = expl.iter().flat_map(|e| e.iter().copied()).collect();
    (inputs, targets)
}

/// Losses of one forward pass. A loss whose weight is zero is still measured
/// for logging, on a detached copy of `h` with frozen parameters.
struct StepGraph {
    total: Var,
    rank_value: f64,
    lm_value: f64,
}

fn build_step<'m>(
    model: &'m JrmModel,
    tape: &mut Tape,
    bind: &mut Binding<'m>,
    batch: &[&PreparedPair],
    alpha: f64,
) -> Result<StepGraph> {
    let n = batch.len();
    let seqs: Vec<Vec<usize>> = batch
        .iter()
        .map(|p| p.seq_a.clone())
        .chain(batch.iter().map(|p| p.seq_b.clone()))
        .collect();
    let h = model.encode_batch(tape, bind, &seqs)?;
    let h_detached = tape.constant(&tape.tensor(h));
    let mut frozen = model.bind(false);

    let labels: Vec<[PrefLabel; 2]> = batch.iter().map(|p| p.labels).collect();
    let has_labels = labels.iter().flatten().any(|l| *l != PrefLabel::Skip);
    let rank = if has_labels {
        let (src, b) = if alpha < 1.0 { (h, &mut *bind) } else { (h_detached, &mut frozen) };
        let rv = model.reward_vars(tape, b, src)?;
        let first: Vec<usize> = (0..n).collect();
        let second: Vec<usize> = (n..2 * n).collect();
        let pb = PreferencePairBatch {
            mu_a: tape.select_rows(rv.mu, &first)?,
            sigma_a: tape.select_rows(rv.sigma, &first)?,
            mu_b: tape.select_rows(rv.mu, &second)?,
            sigma_b: tape.select_rows(rv.sigma, &second)?,
            labels: &labels,
        };
        Some(objectives::rank_loss(tape, &pb)?)
    } else {
        None
    };

    let expl: Vec<&Vec<usize>> = batch
        .iter()
        .map(|p| &p.expl_a)
        .chain(batch.iter().map(|p| &p.expl_b))
        .collect();
    let (inputs, targets) = lm_io(&expl);
    let (src, b) = if alpha > 0.0 { (h, &mut *bind) } else { (h_detached, &mut frozen) };
    let logits = model.lm_forward(tape, b, src, &inputs)?;
    let lm = objectives::lm_loss(tape, logits, &targets)?;

    let rank_value = rank.map(|r| tape.item(r)).unwrap_or(0.0);
    let lm_value = tape.item(lm);
    let total = if alpha == 0.0 {
        match rank {
            Some(r) => r,
            // A batch with every label tied carries no ranking signal.
            None => tape.scale(lm, 0.0)?,
        }
    } else if alpha == 1.0 || rank.is_none() {
        let w = if alpha == 1.0 { 1.0 } else { alpha };
        tape.scale(lm, w)?
    } else {
        objectives::joint_loss(tape, rank, Some(lm), alpha)?
    };
    Ok(StepGraph {
        total,
        rank_value,
        lm_value,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub pref_acc_if: f64,
    pub pref_acc_vq: f64,
    pub lm_ppl: f64,
}

fn accuracy(pairs: &[PreparedPair], scores_a: &[[f64; 2]], scores_b: &[[f64; 2]]) -> [f64; 2] {
    let mut out = [0.0; 2];
    for (d, o) in out.iter_mut().enumerate() {
        let mut hit = 0usize;
        let mut n = 0usize;
        for (i, p) in pairs.iter().enumerate() {
            let diff = scores_a[i][d] - scores_b[i][d];
            match p.labels[d] {
                PrefLabel::A => hit += (diff > 0.0) as usize,
                PrefLabel::B => hit += (diff < 0.0) as usize,
                PrefLabel::Skip => continue,
            }
            n += 1;
        }
        *o = if n == 0 { f64::NAN } else { hit as f64 / n as f64 };
    }
    out
}

/// Mean reward `μ` per candidate, as `[if, vq]`, using only the encoder and
/// reward head.
pub fn score_pairs(model: &JrmModel, pairs: &[PreparedPair]) -> Result<(Vec<[f64; 2]>, Vec<[f64; 2]>)> {
    let seqs_a: Vec<Vec<usize>> = pairs.iter().map(|p| p.seq_a.clone()).collect();
    let seqs_b: Vec<Vec<usize>> = pairs.iter().map(|p| p.seq_b.clone()).collect();
    let mu = |seqs: &[Vec<usize>]| -> Result<Vec<[f64; 2]>> {
        Ok(model
            .score_batch(seqs)?
            .iter()
            .map(|o| [o.mu_if, o.mu_vq])
            .collect())
    };
    Ok((mu(&seqs_a)?, mu(&seqs_b)?))
}

/// Token-weighted mean cross-entropy of both explanations of every pair.
pub fn lm_cross_entropy(model: &JrmModel, pairs: &[PreparedPair]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in pairs.chunks(64) {
        let seqs: Vec<Vec<usize>> = chunk
            .iter()
            .map(|p| p.seq_a.clone())
            .chain(chunk.iter().map(|p| p.seq_b.clone()))
            .collect();
        let expl: Vec<&Vec<usize>> = chunk
            .iter()
            .map(|p| &p.expl_a)
            .chain(chunk.iter().map(|p| &p.expl_b))
            .collect();
        let (inputs, targets) = lm_io(&expl);
        let mut tape = Tape::new();
        let mut bind = model.bind(false);
        let h = model.encode_batch(&mut tape, &mut bind, &seqs)?;
        let logits = model.lm_forward(&mut tape, &mut bind, h, &inputs)?;
        let ce = tape.softmax_ce(logits, &targets)?;
        total += tape.item(ce) * targets.len() as f64;
        count += targets.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Preference accuracy per dimension (μ only) and language-head perplexity.
pub fn evaluate(model: &JrmModel, pairs: &[PreparedPair]) -> Result<EvalMetrics> {
    if pairs.is_empty() {
        return Err(TrainError::Config("evaluation split is empty".into()));
    }
    let (a, b) = score_pairs(model, pairs)?;
    let [pref_acc_if, pref_acc_vq] = accuracy(pairs, &a, &b);
    Ok(EvalMetrics {
        pref_acc_if,
        pref_acc_vq,
        lm_ppl: lm_cross_entropy(model, pairs)?.exp(),
    })
}

/// Largest per-group gradient norm seen over a run, before clipping.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupGradStats {
    pub encoder: f64,
    pub reward_head: f64,
    pub lm_head: f64,
}

impl GroupGradStats {
    fn observe(&mut self, group: ParamGroup, norm: f64) {
        let slot = match group {
            ParamGroup::Encoder => &mut self.encoder,
            ParamGroup::RewardHead => &mut self.reward_head,
            ParamGroup::LmHead => &mut self.lm_head,
        };
        *slot = slot.max(norm);
    }
}

pub struct FitReport {
    pub metrics: Vec<MetricsRow>,
    pub max_group_grad: GroupGradStats,
    /// Largest global gradient norm after clipping.
    pub max_clipped_norm: f64,
    /// Step and model with the highest held-out IF accuracy, if evaluated.
    pub best: Option<(usize, EvalMetrics, JrmModel)>,
    pub last_eval: Option<EvalMetrics>,
}

pub fn total_steps(n_records: usize, config: &TrainConfig) -> usize {
    n_records.div_ceil(config.batch_size) * config.epochs
}

fn weight_decay_applies(t: &Tensor) -> bool {
    t.shape().len() >= 2
}

/// Trains `model` in place on `train`, evaluating on `eval` when given.
pub fn fit(
    model: &mut JrmModel,
    train: &[PreparedPair],
    eval: Option<&[PreparedPair]>,
    config: &TrainConfig,
) -> Result<FitReport> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    let total = total_steps(train.len(), config);
    let n_params = model.params().len();
    let mut adam: Vec<AdamState> = vec![AdamState::default(); n_params];
    let root = SeedStream::new(config.seed).split("fit");
    let mut report = FitReport {
        metrics: Vec::with_capacity(total),
        max_group_grad: GroupGradStats::default(),
        max_clipped_norm: 0.0,
        best: None,
        last_eval: None,
    };
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        root.split("epoch").split_index(epoch as u64).shuffle(&mut order);
        for idx in order.chunks(config.batch_size) {
            let batch: Vec<&PreparedPair> = idx.iter().map(|&i| &train[i]).collect();
            let mut tape = Tape::new();
            let mut bind = model.bind(true);
            let graph = match build_step(model, &mut tape, &mut bind, &batch, config.alpha) {
                Err(TrainError::Tensor(TensorError::NonFinite { .. })) => {
                    return Err(TrainError::NonFiniteLoss {
                        step,
                        rank: f64::NAN,
                        lm: f64::NAN,
                    })
                }
                r => r?,
            };
            let loss_total = tape.item(graph.total);
            if !loss_total.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    step,
                    rank: graph.rank_value,
                    lm: graph.lm_value,
                });
            }
            tape.backward(graph.total)?;
            let bound: Vec<(usize, Var)> = bind.bound().collect();
            drop(bind);
            let mut grads: Vec<(usize, Vec<f64>)> = Vec::with_capacity(bound.len());
            let mut group_sq = [0.0f64; 3];
            for (id, var) in bound {
                let Some(g) = tape.take_grad(var) else { continue };
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(TrainError::NonFiniteGrad {
                        step,
                        name: model.params().name(id).to_string(),
                    });
                }
                let gi = ParamGroup::ALL.iter().position(|&x| x == model.params().group(id)).unwrap();
                group_sq[gi] += g.iter().map(|x| x * x).sum::<f64>();
                grads.push((id, g));
            }
            drop(tape);
            for (gi, sq) in group_sq.iter().enumerate() {
                report.max_group_grad.observe(ParamGroup::ALL[gi], sq.sqrt());
            }
            let norm = group_sq.iter().sum::<f64>().sqrt();
            let scale = if norm > config.grad_clip { config.grad_clip / norm } else { 1.0 };
            report.max_clipped_norm = report.max_clipped_norm.max(norm * scale);
            let lr = cosine_lr(step + 1, total, config);
            for (id, mut g) in grads {
                if scale != 1.0 {
                    g.iter_mut().for_each(|x| *x *= scale);
                }
                let t = model.params_mut().tensor_mut(id);
                let wd = if weight_decay_applies(t) { config.weight_decay } else { 0.0 };
                adamw_step(t.data_mut(), &g, &mut adam[id], lr, wd, config);
            }
            step += 1;
            let mut row = MetricsRow {
                step,
                lr,
                loss_total,
                loss_rank: graph.rank_value,
                loss_lm: graph.lm_value,
                grad_norm: norm,
                eval_pref_acc_if: None,
                eval_pref_acc_vq: None,
                eval_lm_ppl: None,
            };
            let due = step == total || (config.eval_every > 0 && step.is_multiple_of(config.eval_every));
            if let (true, Some(ev)) = (due, eval) {
                let m = evaluate(model, ev)?;
                row.eval_pref_acc_if = Some(m.pref_acc_if);
                row.eval_pref_acc_vq = Some(m.pref_acc_vq);
                row.eval_lm_ppl = Some(m.lm_ppl);
                let better = match &report.best {
                    None => true,
                    Some((_, b, _)) => m.pref_acc_if > b.pref_acc_if,
                };
                if better {
                    report.best = Some((step, m.clone(), model.clone()));
                }
                report.last_eval = Some(m);
            }
            log::debug!(
                "step {step}/{total} lr {lr:.3e} loss {loss_total:.4} rank {:.4} lm {:.4} |g| {norm:.3}",
                graph.rank_value,
                graph.lm_value
            );
            report.metrics.push(row);
        }
    }
    Ok(report)
}
