//! Brute-force ground truth: dense factorizations, exact enumeration of
//! estimator sample spaces, and Monte Carlo moment checks.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::sampling::{self, AliasTable, DrawSource, RowSampler, SamplingPlan};
use crate::sparse_matrix::{RowMatrix, SparseRow, DENSE_ORACLE_LIMIT};

/// Dense `AᵀA` with its eigendecomposition.
pub struct DenseOracle {
    pub gram: DMatrix<f64>,
    eig: SymmetricEigen<f64, nalgebra::Dyn>,
    pub limit: usize,
}

/// Eigenvalues of `AᵀA` in descending order plus derived quantities.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Spectrum {
    pub eigenvalues: Vec<f64>,
    /// Unit top eigenvector, largest-magnitude coordinate positive.
    pub top_vector: Vec<f64>,
    pub lambda1: f64,
    pub lambda_min: f64,
    /// `(λ₁ − λ₂)/λ₁`; 1 when `d = 1`, 0 for the zero matrix.
    pub gap: f64,
}

impl DenseOracle {
    pub fn new(mat: &RowMatrix) -> Result<Self> {
        Self::with_limit(mat, DENSE_ORACLE_LIMIT)
    }

    pub fn with_limit(mat: &RowMatrix, limit: usize) -> Result<Self> {
        let entries = mat.n_rows * mat.n_cols;
        if entries > limit {
            return Err(Error::OracleLimit { entries, limit });
        }
        let d = mat.n_cols;
        let mut gram = DMatrix::<f64>::zeros(d, d);
        for r in &mat.rows {
            for (p, (&i, &vi)) in r.indices.iter().zip(&r.values).enumerate() {
                for (&j, &vj) in r.indices[p..].iter().zip(&r.values[p..]) {
                    gram[(i, j)] += vi * vj;
                }
            }
        }
        for i in 0..d {
            for j in 0..i {
                gram[(i, j)] = gram[(j, i)];
            }
        }
        let eig = SymmetricEigen::new(gram.clone());
        Ok(DenseOracle { gram, eig, limit })
    }

    pub fn spectrum(&self) -> Spectrum {
        let d = self.gram.nrows();
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| self.eig.eigenvalues[b].total_cmp(&self.eig.eigenvalues[a]));
        let eigenvalues: Vec<f64> = order.iter().map(|&i| self.eig.eigenvalues[i]).collect();
        let mut top_vector: Vec<f64> = if d > 0 {
            self.eig.eigenvectors.column(order[0]).iter().copied().collect()
        } else {
            vec![]
        };
        fix_sign(&mut top_vector);
        let lambda1 = eigenvalues.first().copied().unwrap_or(0.0);
        let lambda_min = eigenvalues.last().copied().unwrap_or(0.0);
        let gap = if lambda1 <= 0.0 {
            0.0
        } else if d == 1 {
            1.0
        } else {
            ((lambda1 - eigenvalues[1]) / lambda1).max(0.0)
        };
        Spectrum { eigenvalues, top_vector, lambda1, lambda_min, gap }
    }

    /// Eigenvectors of `AᵀA` as columns, ordered by descending eigenvalue.
    pub fn eigenvectors_desc(&self) -> (Vec<f64>, DMatrix<f64>) {
        let d = self.gram.nrows();
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| self.eig.eigenvalues[b].total_cmp(&self.eig.eigenvalues[a]));
        let vals = order.iter().map(|&i| self.eig.eigenvalues[i]).collect();
        let vecs = DMatrix::from_fn(d, d, |r, c| self.eig.eigenvectors[(r, order[c])]);
        (vals, vecs)
    }

    /// Solves `gram · x = rhs`; singular when `λ_min ≤ 1e-12·λ₁`.
    pub fn solve_gram(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let spec = self.spectrum();
        if !(spec.lambda_min > 1e-12 * spec.lambda1) {
            return Err(Error::Singular(format!(
                "AᵀA is singular (λ_min = {:e}, λ₁ = {:e})",
                spec.lambda_min, spec.lambda1
            )));
        }
        let chol = self
            .gram
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Singular("Cholesky factorization failed".into()))?;
        let mut x = chol.solve(&DVector::from_column_slice(rhs));
        // one refinement step keeps the residual at the 1e-12 level
        let r = DVector::from_column_slice(rhs) - &self.gram * &x;
        x += chol.solve(&r);
        Ok(x.iter().copied().collect())
    }

    /// Solves `(lam·I − gram) x = rhs` via the eigendecomposition.
    pub fn solve_shifted(&self, lam: f64, rhs: &[f64]) -> Result<Vec<f64>> {
        let v = &self.eig.eigenvectors;
        let r = DVector::from_column_slice(rhs);
        let mut coef = v.transpose() * r;
        for (i, c) in coef.iter_mut().enumerate() {
            let den = lam - self.eig.eigenvalues[i];
            if !(den > 0.0) {
                return Err(Error::NotPositiveDefinite(format!("lam = {lam} is not above λ₁")));
            }
            *c /= den;
        }
        Ok((v * coef).iter().copied().collect())
    }

    /// `xᵀ M x` for the dense Gram matrix.
    pub fn gram_norm_sq(&self, x: &[f64]) -> f64 {
        let xv = DVector::from_column_slice(x);
        (xv.transpose() * &self.gram * &xv)[(0, 0)]
    }
}

/// Makes the largest-magnitude coordinate positive (ties to the lower index).
pub fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Least-squares solution via the normal equations.
pub fn dense_solve(mat: &RowMatrix, b: &[f64]) -> Result<Vec<f64>> {
    if b.len() != mat.n_rows {
        return Err(Error::dim("b must have one entry per row"));
    }
    DenseOracle::new(mat)?.solve_gram(&mat.tmul_vec(b))
}

pub fn dense_spectrum(mat: &RowMatrix) -> Result<Spectrum> {
    Ok(DenseOracle::new(mat)?.spectrum())
}

/// `(f(x) − f(x*), ‖A(x − x*)‖²)` for `f(x) = ½‖Ax − b‖²`.
pub fn function_gap(mat: &RowMatrix, b: &[f64], x: &[f64]) -> Result<(f64, f64)> {
    let xs = dense_solve(mat, b)?;
    let f = |z: &[f64]| -> f64 { 0.5 * mat.mul_vec(z).iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>() };
    let diff: Vec<f64> = x.iter().zip(&xs).map(|(p, q)| p - q).collect();
    let ad = mat.mul_vec(&diff);
    Ok((f(x) - f(&xs), ad.iter().map(|v| v * v).sum()))
}

/// Draw source that walks one root-to-leaf path of the decision tree of an
/// estimator, recording the table probabilities it meets.
pub struct PathSource {
    prefix: Vec<usize>,
    choices: Vec<usize>,
    probs: Vec<Vec<f64>>,
    weight: f64,
}

impl DrawSource for PathSource {
    fn pick(&mut self, table: &AliasTable) -> usize {
        let p = table.table_probabilities();
        let pos = self.choices.len();
        let j = if pos < self.prefix.len() {
            self.prefix[pos]
        } else {
            p.iter().position(|&q| q > 0.0).expect("table has positive mass")
        };
        self.weight *= p[j];
        self.choices.push(j);
        self.probs.push(p);
        j
    }
}

/// Runs `run` on every outcome of its draw sequence (ordered tuples) and
/// returns `(probability, value)` pairs. Refuses more than `budget` outcomes.
pub fn enumerate_paths<F>(budget: usize, mut run: F) -> Result<Vec<(f64, Vec<f64>)>>
where
    F: FnMut(&mut PathSource) -> Vec<f64>,
{
    let mut out = Vec::new();
    let mut prefix = Vec::new();
    loop {
        let mut src = PathSource { prefix, choices: Vec::new(), probs: Vec::new(), weight: 1.0 };
        let val = run(&mut src);
        out.push((src.weight, val));
        if out.len() > budget {
            return Err(Error::EnumerationBudget { size: out.len() as f64, budget });
        }
        let (mut choices, probs) = (src.choices, src.probs);
        prefix = loop {
            match choices.pop() {
                None => return Ok(out),
                Some(last) => {
                    let p = &probs[choices.len()];
                    if let Some(next) = (last + 1..p.len()).find(|&j| p[j] > 0.0) {
                        choices.push(next);
                        break choices;
                    }
                }
            }
        };
    }
}

/// Which estimator to enumerate, on which instance.
pub enum EstimatorSpec<'a> {
    Vec { row: &'a SparseRow, c: usize },
    Dot { row: &'a SparseRow, c: usize, x: &'a [f64] },
    RankOne { row: &'a SparseRow, c: usize, x: &'a [f64] },
    Mat { mat: &'a RowMatrix, k: f64, x: &'a [f64] },
}

/// Exact first and second moments next to the target and the bound, both
/// computed from the definitions rather than from sampler state.
#[derive(Clone, Debug)]
pub struct Enumeration {
    pub mean: Vec<f64>,
    pub second_moment: f64,
    pub target: Vec<f64>,
    pub bound: f64,
    pub outcomes: usize,
    pub total_probability: f64,
}

impl Enumeration {
    pub fn mean_rel_err(&self) -> f64 {
        let num: f64 = self.mean.iter().zip(&self.target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = self.target.iter().map(|v| v * v).sum::<f64>().sqrt();
        if den > 0.0 { num / den } else { num }
    }
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn dense_dot(row: &SparseRow, x: &[f64]) -> f64 {
    row.indices.iter().zip(&row.values).map(|(&j, &v)| v * x[j]).sum()
}

/// `‖a − a_{↑c}‖²` from a plain sort of the magnitudes.
pub fn tail_l2sq(row: &SparseRow, c: usize) -> f64 {
    let mut sq: Vec<f64> = row.values.iter().map(|v| v * v).collect();
    sq.sort_by(|a, b| b.total_cmp(a));
    sq.iter().skip(c).sum()
}

/// Second-moment bound for the `a` estimate.
pub fn bound_vec(row: &SparseRow, c: usize) -> f64 {
    row.l2sq * (1.0 + row.num_sparsity / c as f64)
}

/// Second-moment bound for the `aᵀx` estimate.
pub fn bound_dot(row: &SparseRow, c: usize, x: &[f64]) -> f64 {
    dense_dot(row, x).powi(2) + tail_l2sq(row, c) * norm_sq(x) / c as f64
}

/// Second-moment bound for the `aaᵀx` estimate.
pub fn bound_rank_one(row: &SparseRow, c: usize, x: &[f64]) -> f64 {
    let s = row.num_sparsity;
    let cf = c as f64;
    row.l2sq * (1.0 + s / cf) * (dense_dot(row, x).powi(2) + s * row.l2sq * norm_sq(x) / (cf * cf))
}

/// `M` with budgets `c_i = clamp(⌈√s_i·k⌉, 1, d)`.
pub fn normalizer(mat: &RowMatrix, k: f64) -> f64 {
    mat.rows
        .iter()
        .filter(|r| !r.is_empty())
        .map(|r| {
            let c = ((r.num_sparsity.sqrt() * k).ceil() as usize).clamp(1, mat.n_cols);
            r.l2sq * (1.0 + r.num_sparsity / c as f64)
        })
        .sum()
}

/// Second-moment bound for the `AᵀAx` estimate.
pub fn bound_mat(mat: &RowMatrix, k: f64, x: &[f64]) -> f64 {
    normalizer(mat, k) * (norm_sq(&mat.mul_vec(x)) + mat.frob_sq * norm_sq(x) / (k * k))
}

pub fn enumerate_estimator(spec: &EstimatorSpec<'_>, budget: usize) -> Result<Enumeration> {
    let (paths, target, bound) = match *spec {
        EstimatorSpec::Vec { row, c } => {
            let s = RowSampler::new(row, 0, c);
            let d = row.indices.last().map_or(0, |j| j + 1);
            let paths = enumerate_paths(budget, |src| {
                let mut v = vec![0.0; d];
                for (j, x) in sampling::samplevec(&s, src) {
                    v[j] += x;
                }
                v
            })?;
            (paths, row.to_dense(d), bound_vec(row, c))
        }
        EstimatorSpec::Dot { row, c, x } => {
            let s = RowSampler::new(row, 0, c);
            let paths = enumerate_paths(budget, |src| vec![sampling::sampledotproduct(&s, x, src)])?;
            (paths, vec![dense_dot(row, x)], bound_dot(row, c, x))
        }
        EstimatorSpec::RankOne { row, c, x } => {
            let s = RowSampler::new(row, 0, c);
            let d = x.len();
            let paths = enumerate_paths(budget, |src| sampling::samplerankonemat(&s, x, src).to_dense(d))?;
            let t = dense_dot(row, x);
            (paths, row.to_dense(d).iter().map(|v| v * t).collect(), bound_rank_one(row, c, x))
        }
        EstimatorSpec::Mat { mat, k, x } => {
            let plan = SamplingPlan::new(mat, k)?;
            let d = mat.n_cols;
            let paths = enumerate_paths(budget, |src| sampling::samplemat(&plan, x, src).to_dense(d))?;
            (paths, mat.gram_mul(x), bound_mat(mat, k, x))
        }
    };
    let dim = target.len();
    let mut mean = vec![0.0; dim];
    let mut second_moment = 0.0;
    let mut total_probability = 0.0;
    for (p, v) in &paths {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += p * x;
        }
        second_moment += p * norm_sq(v);
        total_probability += p;
    }
    Ok(Enumeration { mean, second_moment, target, bound, outcomes: paths.len(), total_probability })
}

/// Monte Carlo moment check of one estimator against a second-moment bound.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MomentReport {
    pub mean_err: f64,
    pub mean_stderr: f64,
    pub second_moment: f64,
    pub bound: f64,
    pub stderr: f64,
    pub draws: usize,
    pub pass: bool,
}

/// Pass iff `second_moment ≤ bound + 3·stderr` and the mean lies within
/// three standard errors of the target.
pub fn monte_carlo_moments<F, R>(mut estimator: F, target: &[f64], bound: f64, draws: usize, rng: &mut R) -> MomentReport
where
    F: FnMut(&mut R) -> Vec<f64>,
{
    let dim = target.len();
    let mut sum = vec![0.0; dim];
    let mut sumsq = vec![0.0; dim];
    let (mut m2, mut m4) = (0.0, 0.0);
    for _ in 0..draws {
        let v = estimator(rng);
        let q = norm_sq(&v);
        m2 += q;
        m4 += q * q;
        for j in 0..dim {
            sum[j] += v[j];
            sumsq[j] += v[j] * v[j];
        }
    }
    let n = draws as f64;
    let second_moment = m2 / n;
    let stderr = ((m4 / n - second_moment * second_moment).max(0.0) / n).sqrt();
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let mean_err = mean.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let trace_var: f64 = (0..dim).map(|j| (sumsq[j] / n - mean[j] * mean[j]).max(0.0)).sum();
    let mean_stderr = (trace_var / n).sqrt();
    let slack = 1e-12 * norm_sq(target).sqrt().max(1e-300);
    let pass = second_moment <= bound + 3.0 * stderr && mean_err <= 3.0 * mean_stderr + slack;
    MomentReport { mean_err, mean_stderr, second_moment, bound, stderr, draws, pass }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn row(v: &[f64]) -> SparseRow {
        let (i, v): (Vec<usize>, Vec<f64>) =
            v.iter().enumerate().filter(|(_, x)| **x != 0.0).map(|(i, x)| (i, *x)).unzip();
        SparseRow::new(i, v)
    }

    #[test]
    fn dense_solve_examples() {
        assert_eq!(dense_solve(&RowMatrix::identity(2), &[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
        let m = RowMatrix::from_dense(&[vec![1.0, 0.0], vec![0.0, 2.0]], 0.0).unwrap();
        let x = dense_solve(&m, &[1.0, 2.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 1.0).abs() < 1e-14);
        let def = RowMatrix::from_dense(&[vec![1.0, 0.0], vec![1.0, 0.0]], 0.0).unwrap();
        assert!(matches!(dense_solve(&def, &[1.0, 1.0]), Err(Error::Singular(_))));
    }

    #[test]
    fn spectrum_examples() {
        let m = RowMatrix::from_dense(&[vec![3.0, 0.0], vec![0.0, 1.0]], 0.0).unwrap();
        let s = dense_spectrum(&m).unwrap();
        assert!((s.eigenvalues[0] - 9.0).abs() < 1e-12 && (s.eigenvalues[1] - 1.0).abs() < 1e-12);
        assert!((s.gap - 8.0 / 9.0).abs() < 1e-12);
        assert_eq!(s.top_vector, vec![1.0, 0.0]);

        let id = dense_spectrum(&RowMatrix::identity(3)).unwrap();
        assert!(id.eigenvalues.iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(id.gap.abs() < 1e-12);

        let one = dense_spectrum(&RowMatrix::from_dense(&[vec![5.0]], 0.0).unwrap()).unwrap();
        assert_eq!(one.eigenvalues, vec![25.0]);
    }

    #[test]
    fn oracle_limit() {
        let m = RowMatrix::identity(20);
        assert!(matches!(DenseOracle::with_limit(&m, 100), Err(Error::OracleLimit { .. })));
    }

    #[test]
    fn enumeration_examples() {
        let a = row(&[1.0, -2.0]);
        let e = enumerate_estimator(&EstimatorSpec::Vec { row: &a, c: 1 }, 100_000).unwrap();
        assert_eq!(e.outcomes, 2);
        assert!(e.mean_rel_err() < 1e-15);
        assert!((e.second_moment - 9.0).abs() < 1e-12);
        assert!((e.bound - 14.0).abs() < 1e-12);

        let m = RowMatrix::from_dense(&[vec![1.0, 0.0], vec![0.0, 2.0]], 0.0).unwrap();
        let x = [1.0, 1.0];
        let e = enumerate_estimator(&EstimatorSpec::Mat { mat: &m, k: 1.0, x: &x }, 100_000).unwrap();
        assert_eq!(e.target, vec![1.0, 4.0]);
        assert!(e.mean_rel_err() < 1e-14);

        let x = [1.0, 0.0];
        let e = enumerate_estimator(&EstimatorSpec::RankOne { row: &a, c: 1, x: &x }, 100_000).unwrap();
        // the one-entry tail makes the dot draw deterministic
        assert_eq!(e.outcomes, 2);
        assert!(e.mean_rel_err() < 1e-14);

        // head-only row: one outcome, zero variance
        let e = enumerate_estimator(&EstimatorSpec::Dot { row: &a, c: 2, x: &x }, 100_000).unwrap();
        assert_eq!(e.outcomes, 1);
        assert!((e.second_moment - 1.0).abs() < 1e-15);
    }

    #[test]
    fn enumeration_budget_refuses() {
        let a = row(&[1.0; 10]);
        let r = enumerate_estimator(&EstimatorSpec::Vec { row: &a, c: 6 }, 100_000);
        assert!(matches!(r, Err(Error::EnumerationBudget { .. })));
    }

    #[test]
    fn monte_carlo_examples() {
        let mut r = stream(1, 0);
        let t = [1.0, 2.0];
        let rep = monte_carlo_moments(|_| t.to_vec(), &t, 5.0, 10_000, &mut r);
        assert!(rep.pass && rep.mean_err == 0.0 && (rep.second_moment - 5.0).abs() < 1e-12);

        let vals: Vec<f64> = (0..30).map(|j| ((j * 7 % 11) as f64 - 5.0) / (1.0 + j as f64)).collect();
        let a = row(&vals);
        let s = RowSampler::new(&a, 0, 4);
        let target = a.to_dense(30);
        let est = |r: &mut _| {
            let mut v = vec![0.0; 30];
            for (j, x) in sampling::samplevec(&s, r) {
                v[j] += x;
            }
            v
        };
        let rep = monte_carlo_moments(est, &target, bound_vec(&a, 4), 100_000, &mut r);
        assert!(rep.pass, "{rep:?}");
        let rep = monte_carlo_moments(est, &target, bound_vec(&a, 4) / 10.0, 100_000, &mut r);
        assert!(!rep.pass);
    }

    #[test]
    fn function_gap_examples() {
        let (g, q) = function_gap(&RowMatrix::identity(2), &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!((g, q), (1.0, 2.0));
        let m = RowMatrix::from_dense(&[vec![1.0, 2.0], vec![0.0, 1.0], vec![3.0, 1.0]], 0.0).unwrap();
        let b = [1.0, 0.0, 2.0];
        let xs = dense_solve(&m, &b).unwrap();
        let (g, q) = function_gap(&m, &b, &xs).unwrap();
        assert!(g.abs() < 1e-14 && q < 1e-26);
    }
}
