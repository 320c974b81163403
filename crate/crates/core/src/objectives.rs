//! Training objectives: Gaussian preference probability, the ranking and
//! language losses, and their convex combination.

use std::f64::consts::PI;

use thiserror::Error;

use crate::synthworld::PrefLabel;
use crate::tensor::{scalar, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

fn check_sigmas(sigma_i: f64, sigma_j: f64) -> Result<()> {
    if !(sigma_i > 0.0 && sigma_j > 0.0) {
        return Err(ObjectiveError::Domain(format!(
            "sigma must be positive, got ({sigma_i}, {sigma_j})"
        )));
    }
    Ok(())
}

/// `P(r_i > r_j)` for independent Gaussian rewards, via the probit
/// approximation `sigmoid(μ_d / sqrt(1 + π σ_d² / 8))`.
pub fn pref_prob(mu_i: f64, sigma_i: f64, mu_j: f64, sigma_j: f64) -> Result<f64> {
    check_sigmas(sigma_i, sigma_j)?;
    let var = sigma_i * sigma_i + sigma_j * sigma_j;
    Ok(scalar::sigmoid((mu_i - mu_j) / (1.0 + PI * var / 8.0).sqrt()))
}

/// Nodes and weights of `n`-point Gauss–Hermite quadrature (weight `e^{-x²}`),
/// found by Newton iteration on the orthonormal recurrence.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let pim4 = PI.powf(-0.25);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let dz = p1 / pp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// Direct quadrature of `∫ sigmoid(z) N(z | μ_i − μ_j, σ_i² + σ_j²) dz`.
pub fn pref_prob_oracle(mu_i: f64, sigma_i: f64, mu_j: f64, sigma_j: f64, nodes: usize) -> Result<f64> {
    check_sigmas(sigma_i, sigma_j)?;
    if nodes < 8 {
        return Err(ObjectiveError::Contract(format!("need at least 8 nodes, got {nodes}")));
    }
    let mu = mu_i - mu_j;
    let sd = (sigma_i * sigma_i + sigma_j * sigma_j).sqrt();
    let (x, w) = gauss_hermite(nodes);
    let s: f64 = x
        .iter()
        .zip(&w)
        .map(|(&xi, &wi)| wi * scalar::sigmoid(mu + std::f64::consts::SQRT_2 * sd * xi))
        .sum();
    Ok(s / PI.sqrt())
}

/// Pairs of reward outputs on a tape. `mu_*` and `sigma_*` are `n×2`
/// (instruction following, visual quality); `labels[p][d]` says which side
/// of pair `p` is preferred on dimension `d`.
pub struct PreferencePairBatch<'a> {
    pub mu_a: Var,
    pub sigma_a: Var,
    pub mu_b: Var,
    pub sigma_b: Var,
    pub labels: &'a [[PrefLabel; 2]],
}

/// Mean over non-skipped (pair, dimension) entries of `-log P(preferred ≻ other)`.
pub fn rank_loss(tape: &mut Tape, batch: &PreferencePairBatch) -> Result<Var> {
    let n = batch.labels.len();
    if n == 0 {
        return Err(ObjectiveError::Contract("empty preference batch".into()));
    }
    for v in [batch.mu_a, batch.sigma_a, batch.mu_b, batch.sigma_b] {
        if tape.shape(v) != [n, 2] {
            return Err(ObjectiveError::Contract(format!(
                "reward outputs have shape {:?}, expected [{n}, 2]",
                tape.shape(v)
            )));
        }
    }
    if tape.value(batch.sigma_a).iter().chain(tape.value(batch.sigma_b)).any(|&s| !(s > 0.0)) {
        return Err(ObjectiveError::Domain("sigma must be positive".into()));
    }
    let mut sign = Vec::with_capacity(2 * n);
    for l in batch.labels {
        for d in l {
            sign.push(match d {
                PrefLabel::A => 1.0,
                PrefLabel::B => -1.0,
                PrefLabel::Skip => 0.0,
            });
        }
    }
    let active = sign.iter().filter(|s| **s != 0.0).count();
    if active == 0 {
        return Err(ObjectiveError::Contract("every label in the batch is skip".into()));
    }
    let diff = tape.sub(batch.mu_a, batch.mu_b)?;
    let va = tape.mul(batch.sigma_a, batch.sigma_a)?;
    let vb = tape.mul(batch.sigma_b, batch.sigma_b)?;
    let var = tape.add(va, vb)?;
    let var = tape.scale(var, PI / 8.0)?;
    let var = tape.add_scalar(var, 1.0)?;
    let den = tape.sqrt(var)?;
    let z = tape.div(diff, den)?;
    let s = tape.constant(&Tensor::new(vec![n, 2], sign)?);
    let z = tape.mul(z, s)?;
    // Skipped entries have z = 0 and are removed after the softplus.
    let nz = tape.neg(z)?;
    let l = tape.softplus(nz)?;
    let mask: Vec<f64> = tape.value(s).iter().map(|&x| (x != 0.0) as u8 as f64).collect();
    let m = tape.constant(&Tensor::new(vec![n, 2], mask)?);
    let l = tape.mul(l, m)?;
    let total = tape.sum(l)?;
    Ok(tape.scale(total, 1.0 / active as f64)?)
}

/// Token-level mean cross-entropy.
pub fn lm_loss(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    Ok(tape.softmax_ce(logits, targets)?)
}

/// `(1 − α)·rank + α·lm`. At the endpoints the other term is left off the
/// tape entirely so no gradient can flow through it.
pub fn joint_loss(tape: &mut Tape, rank: Option<Var>, lm: Option<Var>, alpha: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(ObjectiveError::Contract(format!("alpha {alpha} outside [0, 1]")));
    }
    let missing = |what: &str| ObjectiveError::Contract(format!("alpha {alpha} requires the {what} loss"));
    if alpha == 0.0 {
        return rank.ok_or_else(|| missing("ranking"));
    }
    if alpha == 1.0 {
        return lm.ok_or_else(|| missing("language"));
    }
    let r = rank.ok_or_else(|| missing("ranking"))?;
    let l = lm.ok_or_else(|| missing("language"))?;
    let r = tape.scale(r, 1.0 - alpha)?;
    let l = tape.scale(l, alpha)?;
    Ok(tape.add(r, l)?)
}

/// Scalar version of [`joint_loss`] for logging.
pub fn joint_value(rank: f64, lm: f64, alpha: f64) -> f64 {
    (1.0 - alpha) * rank + alpha * lm
}
