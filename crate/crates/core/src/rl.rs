//! Group-relative policy optimization of a stochastic toy editor against a
//! frozen reward signal.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{overall_score, JrmModel, ModelError};
use crate::rng::SeedStream;
use crate::synthworld::{
    gen_instruction, gen_scene, other_value, score_ground_truth, third_value, Attribute, ClauseOutcome,
    ClauseStatus, EditResult, Instruction, OverEdit, Scene, Split, Vocabs, WorldConfig,
};
use crate::tensor::{scalar, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum RlError {
    #[error("invalid RL config: {0}")]
    Config(String),
    #[error("non-finite probability ratio for rollout {index}")]
    NonFiniteRatio { index: usize },
    #[error("non-finite reward at iteration {iteration}")]
    NonFiniteReward { iteration: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, RlError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    pub group_size: usize,
    pub eps_low: f64,
    pub eps_high: f64,
    pub kl_beta: f64,
    /// Adam step size. Chosen for the toy policy; large-model recipes use
    /// far smaller rates.
    pub lr: f64,
    pub iterations: usize,
    pub prompts_per_batch: usize,
    pub seed: u64,
    /// Standard deviation of the artifact logit; 0 makes it deterministic.
    pub artifact_sd: f64,
    pub eval_prompts: usize,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            group_size: 12,
            eps_low: 0.2,
            eps_high: 0.2,
            kl_beta: 0.04,
            lr: 1e-2,
            iterations: 300,
            prompts_per_batch: 8,
            seed: 42,
            artifact_sd: 0.5,
            eval_prompts: 512,
        }
    }
}

impl RlConfig {
    /// Tight asymmetric trust region of the large-scale recipe.
    pub fn large_scale() -> Self {
        Self {
            eps_low: 1e-4,
            eps_high: 5e-4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(RlError::Config(m.into()));
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if !(self.eps_low > 0.0 && self.eps_high > 0.0) {
            return bad("eps_low and eps_high must be positive");
        }
        if !(self.kl_beta >= 0.0) {
            return bad("kl_beta must be nonnegative");
        }
        if !(self.lr > 0.0) || self.prompts_per_batch == 0 || self.eval_prompts == 0 {
            return bad("lr, prompts_per_batch and eval_prompts must be positive");
        }
        if !(self.artifact_sd >= 0.0) {
            return bad("artifact_sd must be nonnegative");
        }
        Ok(())
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Context-independent editor: per-attribute execution and wrong-value
/// logits, per-slot over-edit logits, and the mean of the artifact logit.
/// The artifact level is `sigmoid(z)` with `z ~ N(mean, artifact_sd²)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditorPolicy {
    pub n_regions: usize,
    /// `[exec(3), wrong(3), overedit(3·n_regions)]`.
    pub logits: Vec<f64>,
    pub artifact_mean: f64,
    pub artifact_sd: f64,
}

impl EditorPolicy {
    /// Mediocre editor: executes 60% of clauses, half the failures are wrong
    /// values, 10% over-edit rate, artifact level around 0.3.
    pub fn base(n_regions: usize, artifact_sd: f64) -> Self {
        let mut logits = vec![logit(0.6); 3];
        logits.extend([0.0; 3]);
        logits.extend(vec![logit(0.1); 3 * n_regions]);
        Self {
            n_regions,
            logits,
            artifact_mean: logit(0.3),
            artifact_sd,
        }
    }

    pub fn n_logits(&self) -> usize {
        self.logits.len()
    }

    fn exec_idx(a: Attribute) -> usize {
        a.index()
    }

    fn wrong_idx(a: Attribute) -> usize {
        3 + a.index()
    }

    fn over_idx(region: usize, a: Attribute) -> usize {
        6 + 3 * region + a.index()
    }

    /// Flattened parameters, logits followed by the artifact mean.
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.logits.clone();
        v.push(self.artifact_mean);
        v
    }
}

/// A sampled edit with the sufficient statistics of its log-probability.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub result: EditResult,
    pub log_prob: f64,
    /// Per logit, how often its Bernoulli came out 1 and 0.
    pub pos: Vec<f64>,
    pub neg: Vec<f64>,
    pub z: f64,
    /// Log-probability of the uniform value choices.
    pub choice_logp: f64,
}

fn log_prob_of(policy: &EditorPolicy, pos: &[f64], neg: &[f64], z: f64, choice_logp: f64) -> f64 {
    let mut lp = choice_logp;
    for (i, &l) in policy.logits.iter().enumerate() {
        if pos[i] != 0.0 {
            lp -= pos[i] * scalar::softplus(-l);
        }
        if neg[i] != 0.0 {
            lp -= neg[i] * scalar::softplus(l);
        }
    }
    lp + gauss_logpdf(z, policy.artifact_mean, policy.artifact_sd)
}

fn gauss_logpdf(z: f64, m: f64, sd: f64) -> f64 {
    if sd == 0.0 {
        return 0.0;
    }
    let u = (z - m) / sd;
    -0.5 * u * u - (sd * (2.0 * std::f64::consts::PI).sqrt()).ln()
}

impl Rollout {
    /// Log-probability of this rollout under another policy.
    pub fn log_prob_under(&self, policy: &EditorPolicy) -> f64 {
        log_prob_of(policy, &self.pos, &self.neg, self.z, self.choice_logp)
    }
}

pub fn sample_rollout(policy: &EditorPolicy, scene: &Scene, instruction: &Instruction, rng: &mut SeedStream) -> Rollout {
    let p = policy.n_logits();
    let mut pos = vec![0.0; p];
    let mut neg = vec![0.0; p];
    let mut choice_logp = 0.0;
    let mut draw = |i: usize, rng: &mut SeedStream| {
        let hit = rng.uniform() < scalar::sigmoid(policy.logits[i]);
        if hit {
            pos[i] += 1.0;
        } else {
            neg[i] += 1.0;
        }
        hit
    };
    let mut defects = Vec::with_capacity(instruction.clauses.len());
    for &clause in &instruction.clauses {
        let a = clause.attribute;
        let status = if draw(EditorPolicy::exec_idx(a), rng) {
            ClauseStatus::Executed
        } else if draw(EditorPolicy::wrong_idx(a), rng) {
            let src = scene.regions[clause.region].get(a);
            choice_logp -= ((a.cardinality() - 2) as f64).ln();
            ClauseStatus::WrongValue {
                value: third_value(rng, a, src, clause.target),
            }
        } else {
            ClauseStatus::Missed
        };
        defects.push(ClauseOutcome { clause, status });
    }
    let mut overedits = Vec::new();
    for (r, region) in scene.regions.iter().enumerate() {
        for a in Attribute::ALL {
            if instruction.clauses.iter().any(|c| c.region == r && c.attribute == a) {
                continue;
            }
            if draw(EditorPolicy::over_idx(r, a), rng) {
                let from = region.get(a);
                choice_logp -= ((a.cardinality() - 1) as f64).ln();
                overedits.push(OverEdit {
                    region: r,
                    attribute: a,
                    from,
                    to: other_value(rng, a, from),
                });
            }
        }
    }
    let z = policy.artifact_mean + policy.artifact_sd * rng.normal();
    let result = EditResult::assemble(scene, defects, overedits, scalar::sigmoid(z));
    let log_prob = log_prob_of(policy, &pos, &neg, z, choice_logp);
    Rollout {
        result,
        log_prob,
        pos,
        neg,
        z,
        choice_logp,
    }
}

pub fn sample_group(
    policy: &EditorPolicy,
    scene: &Scene,
    instruction: &Instruction,
    group_size: usize,
    rng: &mut SeedStream,
) -> Vec<Rollout> {
    assert!(group_size >= 2, "group size must be at least 2");
    (0..group_size)
        .map(|_| sample_rollout(policy, scene, instruction, rng))
        .collect()
}

/// `(r − mean) / (std + 1e-8)` with the population standard deviation.
pub fn group_advantages(rewards: &[f64]) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    rewards.iter().map(|r| (r - mean) / (sd + 1e-8)).collect()
}

/// Log-probabilities of `rollouts` as an `R×1` tape value, differentiable in
/// `logits` (`1×P`) and `mean` (`1×1`).
pub fn log_probs_on_tape(
    tape: &mut Tape,
    logits: Var,
    mean: Var,
    artifact_sd: f64,
    rollouts: &[Rollout],
) -> Result<Var> {
    let r = rollouts.len();
    let p = tape.shape(logits)[1];
    let pos = Tensor::new(vec![r, p], rollouts.iter().flat_map(|x| x.pos.iter().copied()).collect())?;
    let neg = Tensor::new(vec![r, p], rollouts.iter().flat_map(|x| x.neg.iter().copied()).collect())?;
    let col = tape.reshape(logits, &[p, 1])?;
    let ls_pos = tape.log_sigmoid(col)?;
    let ncol = tape.neg(col)?;
    let ls_neg = tape.log_sigmoid(ncol)?;
    let pos = tape.constant(&pos);
    let neg = tape.constant(&neg);
    let a = tape.matmul(pos, ls_pos)?;
    let b = tape.matmul(neg, ls_neg)?;
    let mut lp = tape.add(a, b)?;
    let mut offset: Vec<f64> = rollouts.iter().map(|x| x.choice_logp).collect();
    if artifact_sd > 0.0 {
        let z = tape.constant(&Tensor::new(vec![r, 1], rollouts.iter().map(|x| x.z).collect())?);
        let m = tape.expand_rows(mean, r)?;
        let d = tape.sub(z, m)?;
        let sq = tape.mul(d, d)?;
        let g = tape.scale(sq, -0.5 / (artifact_sd * artifact_sd))?;
        lp = tape.add(lp, g)?;
        let c = (artifact_sd * (2.0 * std::f64::consts::PI).sqrt()).ln();
        offset.iter_mut().for_each(|o| *o -= c);
    }
    let off = tape.constant(&Tensor::new(vec![r, 1], offset)?);
    Ok(tape.add(lp, off)?)
}

pub struct GrpoTerms {
    pub loss: Var,
    pub surrogate: f64,
    pub kl: f64,
}

/// Clipped surrogate plus `kl_beta` times the mean of the non-negative
/// estimator `exp(ref − new) − (ref − new) − 1` of KL(new ‖ ref).
pub fn grpo_loss(
    tape: &mut Tape,
    new_logp: Var,
    old_logp: &[f64],
    ref_logp: &[f64],
    advantages: &[f64],
    config: &RlConfig,
) -> Result<GrpoTerms> {
    let n = old_logp.len();
    if tape.shape(new_logp) != [n, 1] || ref_logp.len() != n || advantages.len() != n {
        return Err(RlError::Config(format!(
            "grpo_loss inputs disagree in length ({:?}, {n}, {}, {})",
            tape.shape(new_logp),
            ref_logp.len(),
            advantages.len()
        )));
    }
    let new_vals = tape.value(new_logp).to_vec();
    let mut active = Vec::with_capacity(n);
    let mut clipped_const = Vec::with_capacity(n);
    let mut surrogate = 0.0;
    for i in 0..n {
        let rho = (new_vals[i] - old_logp[i]).exp();
        if !rho.is_finite() {
            return Err(RlError::NonFiniteRatio { index: i });
        }
        let a = advantages[i];
        let unclipped = rho * a;
        let clipped = rho.clamp(1.0 - config.eps_low, 1.0 + config.eps_high) * a;
        if unclipped <= clipped {
            active.push(a);
            clipped_const.push(0.0);
            surrogate += unclipped;
        } else {
            active.push(0.0);
            clipped_const.push(clipped);
            surrogate += clipped;
        }
    }
    let old = tape.constant(&Tensor::new(vec![n, 1], old_logp.to_vec())?);
    let diff = tape.sub(new_logp, old)?;
    let rho = tape.exp(diff).map_err(|_| RlError::NonFiniteRatio {
        index: new_vals
            .iter()
            .zip(old_logp)
            .position(|(a, b)| !(a - b).exp().is_finite())
            .unwrap_or(0),
    })?;
    let act = tape.constant(&Tensor::new(vec![n, 1], active)?);
    let weighted = tape.mul(rho, act)?;
    let cc = tape.constant(&Tensor::new(vec![n, 1], clipped_const)?);
    let surr = tape.add(weighted, cc)?;
    let surr = tape.mean(surr)?;
    let surr = tape.neg(surr)?;

    let refc = tape.constant(&Tensor::new(vec![n, 1], ref_logp.to_vec())?);
    let d = tape.sub(refc, new_logp)?;
    let e = tape.exp(d)?;
    let k = tape.sub(e, d)?;
    let k = tape.add_scalar(k, -1.0)?;
    let kl = tape.mean(k)?;
    let kl_value = tape.item(kl);
    let pen = tape.scale(kl, config.kl_beta)?;
    let loss = tape.add(surr, pen)?;
    Ok(GrpoTerms {
        loss,
        surrogate: -surrogate / n as f64,
        kl: kl_value,
    })
}

/// Where rollout rewards come from.
#[derive(Clone, Copy)]
pub enum RewardSource<'a> {
    /// Hidden ground-truth instruction-following score.
    GroundTruthIf,
    /// `overall_score` of a frozen reward model (encoder and reward head only).
    Model(&'a JrmModel),
}

pub fn score_results(
    source: RewardSource,
    world: &WorldConfig,
    contexts: &[(&Scene, &Instruction, &EditResult)],
) -> Result<Vec<f64>> {
    match source {
        RewardSource::GroundTruthIf => Ok(contexts
            .iter()
            .map(|(_, _, r)| score_ground_truth(r).instruction as f64)
            .collect()),
        RewardSource::Model(model) => {
            let vocabs = Vocabs::new(world.n_regions);
            let seqs = contexts
                .iter()
                .map(|(s, i, r)| {
                    let (a, b, c) = vocabs.encode_inputs(s, i, r, world.max_clauses);
                    model.layout_tokens(&a, &b, &c)
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            Ok(model.score_batch(&seqs)?.iter().map(overall_score).collect())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlMetricsRow {
    pub iteration: usize,
    pub mean_reward: f64,
    pub mean_gt_if: f64,
    pub mean_gt_vq: f64,
    pub kl: f64,
    pub surrogate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyEval {
    pub mean_reward: f64,
    pub mean_gt_if: f64,
    pub mean_gt_vq: f64,
}

fn prompt(rng: &mut SeedStream, world: &WorldConfig) -> (Scene, Instruction) {
    let scene = gen_scene(rng, world);
    let instr = gen_instruction(rng, &scene, world, Split::Train);
    (scene, instr)
}

/// One sampled edit for each of `n` fixed prompts derived from `seed`.
pub fn eval_policy(
    policy: &EditorPolicy,
    world: &WorldConfig,
    reward: RewardSource,
    n: usize,
    seed: u64,
) -> Result<PolicyEval> {
    if n == 0 {
        return Err(RlError::Config("eval_policy needs n >= 1".into()));
    }
    let root = SeedStream::new(seed).split("policy-eval");
    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = root.split_index(i as u64);
        let (scene, instr) = prompt(&mut rng, world);
        let roll = sample_rollout(policy, &scene, &instr, &mut rng);
        items.push((scene, instr, roll.result));
    }
    let ctx: Vec<_> = items.iter().map(|(s, i, r)| (s, i, r)).collect();
    let rewards = score_results(reward, world, &ctx)?;
    let gt: Vec<_> = items.iter().map(|(_, _, r)| score_ground_truth(r)).collect();
    let nf = n as f64;
    Ok(PolicyEval {
        mean_reward: rewards.iter().sum::<f64>() / nf,
        mean_gt_if: gt.iter().map(|s| s.instruction as f64).sum::<f64>() / nf,
        mean_gt_vq: gt.iter().map(|s| s.visual as f64).sum::<f64>() / nf,
    })
}

pub struct RlReport {
    pub policy: EditorPolicy,
    pub metrics: Vec<RlMetricsRow>,
    pub initial: PolicyEval,
    pub final_eval: PolicyEval,
}

#[derive(Clone, Debug, Default)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn step(&mut self, x: &mut [f64], g: &[f64], lr: f64) {
        if self.m.is_empty() {
            self.m = vec![0.0; x.len()];
            self.v = vec![0.0; x.len()];
        }
        self.t += 1;
        let (b1, b2) = (0.9f64, 0.999f64);
        let (c1, c2) = (1.0 - b1.powi(self.t), 1.0 - b2.powi(self.t));
        for i in 0..x.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
            x[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

/// Trains `policy` from its current parameters; the starting point is the
/// frozen KL reference.
pub fn rl_train(
    policy: EditorPolicy,
    reward: RewardSource,
    world: &WorldConfig,
    config: &RlConfig,
) -> Result<RlReport> {
    config.validate()?;
    let reference = policy.clone();
    let mut policy = policy;
    let eval_seed = config.seed;
    let initial = eval_policy(&policy, world, reward, config.eval_prompts, eval_seed)?;
    let root = SeedStream::new(config.seed).split("rl");
    let mut adam = Adam::default();
    let mut metrics = Vec::with_capacity(config.iterations);
    let p = policy.n_logits();
    for it in 0..config.iterations {
        let mut rng = root.split_index(it as u64);
        let mut prompts = Vec::with_capacity(config.prompts_per_batch);
        let mut rollouts = Vec::with_capacity(config.prompts_per_batch * config.group_size);
        for _ in 0..config.prompts_per_batch {
            let (scene, instr) = prompt(&mut rng, world);
            rollouts.extend(sample_group(&policy, &scene, &instr, config.group_size, &mut rng));
            prompts.push((scene, instr));
        }
        let ctx: Vec<_> = rollouts
            .iter()
            .enumerate()
            .map(|(k, r)| {
                let (s, i) = &prompts[k / config.group_size];
                (s, i, &r.result)
            })
            .collect();
        let rewards = score_results(reward, world, &ctx)?;
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(RlError::NonFiniteReward { iteration: it });
        }
        let advantages: Vec<f64> = rewards
            .chunks(config.group_size)
            .flat_map(group_advantages)
            .collect();
        let old: Vec<f64> = rollouts.iter().map(|r| r.log_prob).collect();
        let refs: Vec<f64> = rollouts.iter().map(|r| r.log_prob_under(&reference)).collect();

        let mut tape = Tape::new();
        let lv = tape.param(&Tensor::matrix(1, p, policy.logits.clone())?);
        let mv = tape.param(&Tensor::matrix(1, 1, vec![policy.artifact_mean])?);
        let new = log_probs_on_tape(&mut tape, lv, mv, policy.artifact_sd, &rollouts)?;
        let terms = grpo_loss(&mut tape, new, &old, &refs, &advantages, config)?;
        tape.backward(terms.loss)?;
        let mut grad = tape.take_grad(lv).unwrap_or_else(|| vec![0.0; p]);
        grad.push(tape.take_grad(mv).map(|g| g[0]).unwrap_or(0.0));
        let mut flat = policy.flat();
        adam.step(&mut flat, &grad, config.lr);
        policy.artifact_mean = flat.pop().unwrap();
        policy.logits = flat;

        let gt: Vec<_> = rollouts.iter().map(|r| score_ground_truth(&r.result)).collect();
        let nr = rollouts.len() as f64;
        metrics.push(RlMetricsRow {
            iteration: it + 1,
            mean_reward: rewards.iter().sum::<f64>() / nr,
            mean_gt_if: gt.iter().map(|s| s.instruction as f64).sum::<f64>() / nr,
            mean_gt_vq: gt.iter().map(|s| s.visual as f64).sum::<f64>() / nr,
            kl: terms.kl,
            surrogate: terms.surrogate,
        });
    }
    let final_eval = eval_policy(&policy, world, reward, config.eval_prompts, eval_seed)?;
    Ok(RlReport {
        policy,
        metrics,
        initial,
        final_eval,
    })
}

pub fn write_rl_metrics(rows: &[RlMetricsRow], path: &Path) -> Result<()> {
    let io = |e: &dyn std::fmt::Display| RlError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| io(&e))?;
    for r in rows {
        w.serialize(r).map_err(|e| io(&e))?;
    }
    w.flush().map_err(|e| io(&e))
}

pub fn read_rl_metrics(path: &Path) -> Result<Vec<RlMetricsRow>> {
    let io = |e: &dyn std::fmt::Display| RlError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| io(&e))?;
    r.deserialize().map(|row| row.map_err(|e| io(&e))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advantages_of_two() {
        let a = group_advantages(&[1.0, 3.0]);
        assert!((a[0] + 1.0).abs() < 1e-7 && (a[1] - 1.0).abs() < 1e-7);
        assert_eq!(group_advantages(&[2.5; 6]), vec![0.0; 6]);
    }

    #[test]
    fn advantages_are_shift_invariant_and_scale_invariant_up_to_the_stabilizer() {
        let r = [0.3, 2.0, -1.0, 4.5, 0.0];
        let a = group_advantages(&r);
        assert!(a.iter().sum::<f64>().abs() < 1e-9);
        let shifted: Vec<f64> = r.iter().map(|x| x - 11.0).collect();
        for (x, y) in a.iter().zip(group_advantages(&shifted)) {
            assert!((x - y).abs() < 1e-12);
        }
        let mean = r.iter().sum::<f64>() / 5.0;
        let sd = (r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 5.0).sqrt();
        for c in [0.5, 3.7, 100.0] {
            let scaled: Vec<f64> = r.iter().map(|x| c * x + 2.0).collect();
            for (x, y) in a.iter().zip(group_advantages(&scaled)) {
                let bound = 1e-8 * x.abs() * (1.0 - 1.0 / c).abs() / sd + 1e-12;
                assert!((x - y).abs() <= bound, "c={c}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn saturated_policy_is_deterministic() {
        let w = WorldConfig::default();
        let mut pol = EditorPolicy::base(4, 0.0);
        pol.logits[..3].fill(60.0);
        pol.logits[6..].fill(-60.0);
        let mut rng = SeedStream::new(3);
        let (scene, instr) = prompt(&mut rng, &w);
        let g = sample_group(&pol, &scene, &instr, 12, &mut rng);
        assert!(g.iter().all(|r| r.result == g[0].result));
        assert_eq!(score_ground_truth(&g[0].result).instruction, 4);
    }

    #[test]
    fn on_policy_ratio_gives_mean_advantage_surrogate() {
        let cfg = RlConfig::default();
        let mut tape = Tape::new();
        let lp = [-1.0, -2.0, -0.5, -3.0];
        let new = tape.param(&Tensor::matrix(4, 1, lp.to_vec()).unwrap());
        let adv = group_advantages(&[1.0, 2.0, 0.0, 5.0]);
        let t = grpo_loss(&mut tape, new, &lp, &lp, &adv, &cfg).unwrap();
        assert!(t.surrogate.abs() < 1e-9);
        assert!(t.kl.abs() < 1e-15);
        assert!(tape.item(t.loss).abs() < 1e-9);
    }
}
