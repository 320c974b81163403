//! Representation diagnostics over populations of hidden states: singular
//! spectrum, effective rank, spectral entropy, isotropy, PCA and Procrustes
//! alignment.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{JrmModel, ModelError};
use crate::trainer::PreparedPair;

#[derive(Debug, Error)]
pub enum ReprError {
    #[error("SVD did not converge on a {rows}x{cols} matrix (max |entry| {max_abs:e})")]
    Numerical { rows: usize, cols: usize, max_abs: f64 },
    #[error("spectrum has no positive value; rank is undefined")]
    UndefinedRank,
    #[error("contract violated: {0}")]
    Contract(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, ReprError>;

/// `N×d` hidden states, row-major, with a free-form provenance stamp.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub provenance: String,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>, provenance: impl Into<String>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(ReprError::Contract(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(ReprError::Contract("feature matrix has non-finite entries".into()));
        }
        Ok(Self {
            rows,
            cols,
            data,
            provenance: provenance.into(),
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    fn centered(&self) -> DMatrix<f64> {
        let mut m = self.to_matrix();
        for j in 0..self.cols {
            let mean = m.column(j).sum() / self.rows as f64;
            m.column_mut(j).add_scalar_mut(-mean);
        }
        m
    }
}

struct Svd {
    u: DMatrix<f64>,
    s: Vec<f64>,
    v_t: DMatrix<f64>,
}

/// Thin SVD with singular values sorted descending.
fn svd(m: DMatrix<f64>, vectors: bool) -> Result<Svd> {
    let (rows, cols) = m.shape();
    let max_abs = m.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let d = m
        .try_svd(vectors, vectors, f64::EPSILON, 10_000)
        .ok_or(ReprError::Numerical { rows, cols, max_abs })?;
    let k = d.singular_values.len();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| d.singular_values[b].total_cmp(&d.singular_values[a]));
    let s = order.iter().map(|&i| d.singular_values[i]).collect();
    if !vectors {
        return Ok(Svd {
            u: DMatrix::zeros(0, 0),
            s,
            v_t: DMatrix::zeros(0, 0),
        });
    }
    let (u0, vt0) = (d.u.unwrap(), d.v_t.unwrap());
    let u = DMatrix::from_fn(rows, k, |r, c| u0[(r, order[c])]);
    let v_t = DMatrix::from_fn(k, cols, |r, c| vt0[(order[r], c)]);
    Ok(Svd { u, s, v_t })
}

/// Descending singular values of the column-centered matrix.
pub fn singular_spectrum(h: &FeatureMatrix) -> Result<Vec<f64>> {
    if h.rows < 2 {
        return Err(ReprError::Contract(format!("need at least 2 rows, got {}", h.rows)));
    }
    if h.rows < h.cols {
        log::warn!("{}: {} samples for {} dimensions", h.provenance, h.rows, h.cols);
    }
    Ok(svd(h.centered(), false)?.s)
}

/// Normalized distribution over the numerically nonzero singular values.
fn spectrum_distribution(spectrum: &[f64]) -> Result<Vec<f64>> {
    let max = spectrum.iter().fold(0.0f64, |a, &x| a.max(x));
    if !(max > 0.0) {
        return Err(ReprError::UndefinedRank);
    }
    let tol = max * spectrum.len() as f64 * f64::EPSILON;
    let kept: Vec<f64> = spectrum.iter().copied().filter(|&x| x > tol).collect();
    let total: f64 = kept.iter().sum();
    Ok(kept.into_iter().map(|x| x / total).collect())
}

pub fn spectral_entropy(spectrum: &[f64]) -> Result<f64> {
    let p = spectrum_distribution(spectrum)?;
    Ok(-p.iter().map(|&x| x * x.ln()).sum::<f64>())
}

pub fn effective_rank(spectrum: &[f64]) -> Result<f64> {
    Ok(spectral_entropy(spectrum)?.exp())
}

/// Participation ratio `(Σλ)² / (d·Σλ²)` of the eigenvalues `λ = σ²` in
/// ambient dimension `d`.
pub fn isotropy(spectrum: &[f64], d: usize) -> Result<f64> {
    if d == 0 || spectrum.len() > d {
        return Err(ReprError::Contract(format!(
            "ambient dimension {d} smaller than spectrum length {}",
            spectrum.len()
        )));
    }
    let lam: Vec<f64> = spectrum.iter().map(|s| s * s).collect();
    let s1: f64 = lam.iter().sum();
    let s2: f64 = lam.iter().map(|l| l * l).sum();
    if !(s2 > 0.0) {
        return Err(ReprError::UndefinedRank);
    }
    Ok(s1 * s1 / (d as f64 * s2))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    /// `N×k`, row-major.
    pub coords: Vec<f64>,
    pub k: usize,
    pub explained: Vec<f64>,
    /// `k×d` principal directions, row-major.
    pub components: Vec<f64>,
}

impl Pca {
    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.k..(i + 1) * self.k]
    }
}

/// Projection onto the top-`k` principal directions. Each direction's
/// largest-magnitude loading is made positive.
pub fn pca_project(h: &FeatureMatrix, k: usize) -> Result<Pca> {
    if k == 0 || k > h.cols {
        return Err(ReprError::Contract(format!("k={k} must be in 1..={}", h.cols)));
    }
    if h.rows < 2 {
        return Err(ReprError::Contract(format!("need at least 2 rows, got {}", h.rows)));
    }
    let c = h.centered();
    let d = svd(c.clone(), true)?;
    let total: f64 = d.s.iter().map(|s| s * s).sum();
    let avail = d.s.len().min(k);
    let mut comps = DMatrix::<f64>::zeros(k, h.cols);
    for r in 0..avail {
        let row = d.v_t.row(r);
        let mut best = 0;
        for j in 0..h.cols {
            if row[j].abs() > row[best].abs() {
                best = j;
            }
        }
        let sign = if row[best] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..h.cols {
            comps[(r, j)] = sign * row[j];
        }
    }
    let proj = &c * comps.transpose();
    let explained = (0..k)
        .map(|r| {
            if r < avail && total > 0.0 {
                d.s[r] * d.s[r] / total
            } else {
                0.0
            }
        })
        .collect();
    let mut coords = Vec::with_capacity(h.rows * k);
    for i in 0..h.rows {
        coords.extend(proj.row(i).iter());
    }
    let mut components = Vec::with_capacity(k * h.cols);
    for r in 0..k {
        components.extend(comps.row(r).iter());
    }
    Ok(Pca {
        coords,
        k,
        explained,
        components,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Procrustes {
    /// `k×k` orthogonal matrix, row-major.
    pub rotation: Vec<f64>,
    /// `‖AR − B‖_F / ‖B‖_F`.
    pub residual: f64,
    pub degenerate: bool,
}

/// Orthogonal `R` minimizing `‖AR − B‖_F` for row-major `N×k` `a` and `b`.
pub fn procrustes_align(a: &[f64], b: &[f64], n: usize, k: usize) -> Result<Procrustes> {
    if a.len() != n * k || b.len() != n * k {
        return Err(ReprError::Contract(format!(
            "both matrices must be {n}x{k} (got {} and {} entries)",
            a.len(),
            b.len()
        )));
    }
    if n < k {
        return Err(ReprError::Contract(format!("need N >= k, got N={n}, k={k}")));
    }
    let am = DMatrix::from_row_slice(n, k, a);
    let bm = DMatrix::from_row_slice(n, k, b);
    let m = am.transpose() * &bm;
    let d = svd(m, true)?;
    let degenerate = d.s.last().copied().unwrap_or(0.0) <= d.s[0] * k as f64 * f64::EPSILON;
    if degenerate {
        log::warn!("Procrustes cross-covariance is rank deficient; rotation is not unique");
    }
    let r = &d.u * &d.v_t;
    let diff = &am * &r - &bm;
    let bn = bm.norm();
    let residual = if bn > 0.0 { diff.norm() / bn } else { diff.norm() };
    let mut rotation = Vec::with_capacity(k * k);
    for i in 0..k {
        rotation.extend(r.row(i).iter());
    }
    Ok(Procrustes {
        rotation,
        residual,
        degenerate,
    })
}

/// Hidden states for both candidates of every pair, ordered `a0, b0, a1, b1, ...`.
pub fn collect_hidden(model: &JrmModel, pairs: &[PreparedPair], provenance: &str) -> Result<FeatureMatrix> {
    if pairs.is_empty() {
        return Err(ReprError::Contract("no records to collect from".into()));
    }
    let seqs: Vec<Vec<usize>> = pairs
        .iter()
        .flat_map(|p| [p.seq_a.clone(), p.seq_b.clone()])
        .collect();
    let hs = model.hidden_states(&seqs)?;
    let d = model.config().d_model;
    let data = hs.into_iter().flat_map(|h| h.0).collect();
    FeatureMatrix::new(seqs.len(), d, data, provenance)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReprStats {
    pub model: String,
    pub n_samples: usize,
    pub dim: usize,
    pub spectrum: Vec<f64>,
    pub effective_rank: f64,
    pub spectral_entropy: f64,
    pub isotropy: f64,
}

pub fn repr_stats(h: &FeatureMatrix, label: &str) -> Result<ReprStats> {
    let spectrum = singular_spectrum(h)?;
    Ok(ReprStats {
        model: label.to_string(),
        n_samples: h.rows,
        dim: h.cols,
        effective_rank: effective_rank(&spectrum)?,
        spectral_entropy: spectral_entropy(&spectrum)?,
        isotropy: isotropy(&spectrum, h.cols)?,
        spectrum,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PcaPoint {
    pub model: String,
    pub index: usize,
    pub pc1: f64,
    pub pc2: f64,
    pub pc3: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReprReport {
    pub models: Vec<ReprStats>,
    /// Variance fractions of the first three components, per model.
    pub pca_explained: Vec<Vec<f64>>,
    /// Relative residual after rotating each later cloud onto the first.
    pub procrustes_residual: Vec<f64>,
}

/// Statistics for every model on the same records, plus 3-D PCA clouds
/// rotated onto the first model's cloud.
pub fn analyze(models: &[(&str, &JrmModel)], pairs: &[PreparedPair]) -> Result<(ReprReport, Vec<PcaPoint>)> {
    let mut report = ReprReport {
        models: Vec::new(),
        pca_explained: Vec::new(),
        procrustes_residual: Vec::new(),
    };
    let mut points = Vec::new();
    let mut reference: Option<Vec<f64>> = None;
    for (label, model) in models {
        let h = collect_hidden(model, pairs, label)?;
        report.models.push(repr_stats(&h, label)?);
        let k = 3.min(h.cols);
        let pca = pca_project(&h, k)?;
        report.pca_explained.push(pca.explained.clone());
        let coords = match &reference {
            None => {
                reference = Some(pca.coords.clone());
                pca.coords
            }
            Some(r) => {
                let p = procrustes_align(&pca.coords, r, h.rows, k)?;
                report.procrustes_residual.push(p.residual);
                let a = DMatrix::from_row_slice(h.rows, k, &pca.coords);
                let rot = DMatrix::from_row_slice(k, k, &p.rotation);
                let al = a * rot;
                (0..h.rows).flat_map(|i| al.row(i).iter().copied().collect::<Vec<_>>()).collect()
            }
        };
        for i in 0..h.rows {
            let c = &coords[i * k..(i + 1) * k];
            points.push(PcaPoint {
                model: label.to_string(),
                index: i,
                pc1: c[0],
                pc2: c.get(1).copied().unwrap_or(0.0),
                pc3: c.get(2).copied().unwrap_or(0.0),
            });
        }
    }
    Ok((report, points))
}

pub fn write_repr_outputs(report: &ReprReport, points: &[PcaPoint], dir: &Path) -> Result<()> {
    let io = |p: &Path, e: &dyn std::fmt::Display| ReprError::Io {
        path: p.display().to_string(),
        message: e.to_string(),
    };
    let stats = dir.join("repr_stats.json");
    let text = serde_json::to_string_pretty(report).expect("stats serialize") + "\n";
    std::fs::write(&stats, text).map_err(|e| io(&stats, &e))?;
    let pts = dir.join("pca_points.csv");
    let mut w = csv::Writer::from_path(&pts).map_err(|e| io(&pts, &e))?;
    for p in points {
        w.serialize(p).map_err(|e| io(&pts, &e))?;
    }
    w.flush().map_err(|e| io(&pts, &e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example_three_one() {
        let s = [3.0, 1.0];
        let h = spectral_entropy(&s).unwrap();
        let expected = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        assert!((h - expected).abs() < 1e-15);
        assert!((h - 0.56234).abs() < 5e-6);
        assert!((effective_rank(&s).unwrap() - 1.75477).abs() < 5e-6);
    }

    #[test]
    fn uniform_and_rank_one() {
        assert!((effective_rank(&[2.0; 5]).unwrap() - 5.0).abs() < 1e-12);
        assert!((spectral_entropy(&[2.0; 5]).unwrap() - 5f64.ln()).abs() < 1e-12);
        assert_eq!(effective_rank(&[4.0, 0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(spectral_entropy(&[4.0]).unwrap(), 0.0);
        assert!(matches!(effective_rank(&[0.0, 0.0]), Err(ReprError::UndefinedRank)));
    }

    #[test]
    fn isotropy_cases() {
        assert!((isotropy(&[1.5; 8], 8).unwrap() - 1.0).abs() < 1e-15);
        assert!((isotropy(&[7.0], 64).unwrap() - 1.0 / 64.0).abs() < 1e-15);
        let s = [2.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert!((isotropy(&s, 8).unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn identical_rows_have_zero_spectrum() {
        let row = [0.1, -2.3, 7.7];
        let data: Vec<f64> = (0..5).flat_map(|_| row).collect();
        let h = FeatureMatrix::new(5, 3, data, "t").unwrap();
        assert!(singular_spectrum(&h).unwrap().iter().all(|&s| s < 1e-14));
    }

    #[test]
    fn balanced_axis_rows_are_rank_one() {
        let data: Vec<f64> = (0..6)
            .flat_map(|i| {
                let s = if i % 2 == 0 { 1.0 } else { -1.0 };
                [s, 0.0, 0.0, 0.0]
            })
            .collect();
        let h = FeatureMatrix::new(6, 4, data, "t").unwrap();
        let s = singular_spectrum(&h).unwrap();
        assert!((s[0] - 6f64.sqrt()).abs() < 1e-12);
        assert!(s[1..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn pca_rejects_large_k() {
        let h = FeatureMatrix::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 7.0], "t").unwrap();
        assert!(matches!(pca_project(&h, 3), Err(ReprError::Contract(_))));
    }

    #[test]
    fn procrustes_identity() {
        let a = [1.0, 0.0, 0.0, 2.0, 3.0, 1.0];
        let p = procrustes_align(&a, &a, 3, 2).unwrap();
        assert!(p.residual < 1e-14);
        let eye = [1.0, 0.0, 0.0, 1.0];
        for (x, y) in p.rotation.iter().zip(eye) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
