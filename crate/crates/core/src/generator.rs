//! Synthetic dense-support matrices with controlled numerical sparsity and,
//! optionally, a prescribed spectrum.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::DenseOracle;
use crate::rng::stream;
use crate::sparse_matrix::{RowMatrix, DENSE_ORACLE_LIMIT};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub n: usize,
    pub d: usize,
    pub target_s: f64,
    /// Power-law exponent of `|a_j| ∝ j^(−decay)`; solved from `target_s`
    /// when absent.
    pub decay: Option<f64>,
    /// Target singular values, `d` of them. Takes precedence over `row_norm`.
    pub spectrum: Option<Vec<f64>>,
    pub row_norm: f64,
    pub seed: u64,
}

impl GenSpec {
    pub fn new(n: usize, d: usize, target_s: f64, seed: u64) -> Self {
        GenSpec { n, d, target_s, decay: None, spectrum: None, row_norm: 1.0, seed }
    }
}

/// Numerical sparsity of the profile `j^(−α)`, `j = 1..=d`.
pub fn profile_sparsity(d: usize, alpha: f64) -> f64 {
    let (mut l1, mut l2) = (0.0, 0.0);
    for j in 1..=d {
        let p = (j as f64).powf(-alpha);
        l1 += p;
        l2 += p * p;
    }
    l1 * l1 / l2
}

/// Exponent with `profile_sparsity(d, α) = s`, by bisection on `[0, 40]`.
pub fn solve_decay(d: usize, s: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 40.0f64);
    if s >= d as f64 {
        return 0.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if profile_sparsity(d, mid) > s {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn base_matrix(spec: &GenSpec, alpha: f64) -> Vec<Vec<f64>> {
    let (n, d) = (spec.n, spec.d);
    let mut rng = stream(spec.seed, 0x9e4);
    let mut perm: Vec<usize> = (0..d).collect();
    perm.shuffle(&mut rng);
    let mut profile: Vec<f64> = (1..=d).map(|j| (j as f64).powf(-alpha)).collect();
    let pn = profile.iter().map(|p| p * p).sum::<f64>().sqrt();
    profile.iter_mut().for_each(|p| *p *= spec.row_norm / pn);
    (0..n)
        .map(|i| {
            // cyclic placement keeps every column's share of each rank equal
            let shift = i + 7 * (i / d);
            let mut row = vec![0.0; d];
            for (r, &p) in profile.iter().enumerate() {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                row[(perm[r] + shift) % d] = sign * p;
            }
            row
        })
        .collect()
}

fn to_matrix(rows: &[Vec<f64>]) -> Result<RowMatrix> {
    RowMatrix::from_dense(rows, 0.0)
}

/// Rotates `A` to `A·T` with `T = V diag(√(t/w)) Vᵀ` so `AᵀA` has eigenvalues
/// `t` (matched in descending order to the current eigenvalues `w`).
fn match_spectrum(rows: &[Vec<f64>], sv: &[f64]) -> Result<Vec<Vec<f64>>> {
    let mat = to_matrix(rows)?;
    let oracle = DenseOracle::with_limit(&mat, DENSE_ORACLE_LIMIT)?;
    let (w, v) = oracle.eigenvectors_desc();
    let mut t: Vec<f64> = sv.iter().map(|s| s * s).collect();
    t.sort_by(|a, b| b.total_cmp(a));
    let d = w.len();
    if w[d - 1] <= 1e-12 * w[0] {
        return Err(Error::config("spectrum matching needs a full-rank base matrix (n ≥ d)"));
    }
    let scale = DMatrix::from_fn(d, d, |r, c| if r == c { (t[r] / w[r]).sqrt() } else { 0.0 });
    let tm = &v * scale * v.transpose();
    Ok(rows
        .iter()
        .map(|row| (0..d).map(|c| (0..d).map(|k| row[k] * tm[(k, c)]).sum()).collect())
        .collect())
}

/// Dense rows (nnz = d) with mean numerical sparsity near `target_s`.
pub fn generate(spec: &GenSpec) -> Result<RowMatrix> {
    let d = spec.d;
    if spec.n == 0 || d == 0 {
        return Err(Error::config("generator needs n, d ≥ 1"));
    }
    if !(spec.target_s >= 1.0 && spec.target_s <= d as f64) {
        return Err(Error::config(format!("target_s = {} must lie in [1, d = {d}]", spec.target_s)));
    }
    if !(spec.row_norm > 0.0) {
        return Err(Error::config("row_norm must be positive"));
    }
    let Some(sv) = &spec.spectrum else {
        let alpha = spec.decay.unwrap_or_else(|| solve_decay(d, spec.target_s));
        return to_matrix(&base_matrix(spec, alpha));
    };
    if sv.len() != d || sv.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::config("spectrum must hold d positive singular values"));
    }
    if spec.decay.is_some() {
        let rows = match_spectrum(&base_matrix(spec, spec.decay.unwrap()), sv)?;
        return to_matrix(&rows);
    }
    // the rotation mixes coordinates and raises s; re-aim the profile
    let mut aim = spec.target_s;
    let mut best: Option<(f64, RowMatrix)> = None;
    for _ in 0..5 {
        let rows = match_spectrum(&base_matrix(spec, solve_decay(d, aim)), sv)?;
        let m = to_matrix(&rows)?;
        let got = m.mean_num_sparsity();
        let err = (got / spec.target_s).ln().abs();
        if best.as_ref().is_none_or(|b| err < b.0) {
            best = Some((err, m));
        }
        if err < 1e-3 {
            break;
        }
        aim = (aim * spec.target_s / got).clamp(1.0, d as f64);
    }
    Ok(best.expect("at least one pass").1)
}

/// Singular values giving `AᵀA` eigenvalues `λ₁`, `(1 − gap)λ₁`, then a
/// geometric decay down to `lambda_min`.
pub fn gapped_spectrum(d: usize, lambda1: f64, gap: f64, lambda_min: f64) -> Vec<f64> {
    let mut ev = vec![lambda1];
    if d >= 2 {
        let l2 = (1.0 - gap) * lambda1;
        let rest = d - 1;
        for i in 0..rest {
            let t = if rest == 1 { 0.0 } else { i as f64 / (rest - 1) as f64 };
            ev.push(l2 * (lambda_min / l2).powf(t));
        }
    }
    ev.iter().map(|e| e.sqrt()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FamilySummary {
    pub n: usize,
    pub d: usize,
    pub nnz: usize,
    pub mean_s: f64,
    pub frob_sq: f64,
    pub stable_rank: Option<f64>,
    pub kappa: Option<f64>,
    pub gap: Option<f64>,
    pub lambda1: Option<f64>,
    pub mu: Option<f64>,
}

/// Size, sparsity and (at desk scale) spectral statistics.
pub fn measure_family(mat: &RowMatrix) -> FamilySummary {
    let mut out = FamilySummary {
        n: mat.n_rows,
        d: mat.n_cols,
        nnz: mat.nnz(),
        mean_s: mat.mean_num_sparsity(),
        frob_sq: mat.frob_sq,
        stable_rank: None,
        kappa: None,
        gap: None,
        lambda1: None,
        mu: None,
    };
    if let Ok(o) = DenseOracle::new(mat) {
        let sp = o.spectrum();
        if sp.lambda1 > 0.0 {
            out.stable_rank = Some(mat.frob_sq / sp.lambda1);
            out.gap = Some(sp.gap);
            out.lambda1 = Some(sp.lambda1);
            let mu = sp.lambda_min.max(0.0);
            out.mu = Some(mu);
            out.kappa = Some(if mu > 0.0 { mat.frob_sq / mu } else { f64::INFINITY });
        }
    }
    out
}

/// Right-hand side `b = A·x_true + noise` for a random `x_true`.
pub fn planted_rhs(mat: &RowMatrix, seed: u64, noise: f64) -> Vec<f64> {
    let mut rng = stream(seed, 0xb0);
    let x: Vec<f64> = (0..mat.n_cols).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    mat.mul_vec(&x).into_iter().map(|v| v + noise * (rng.random::<f64>() * 2.0 - 1.0)).collect()
}
