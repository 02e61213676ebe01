//! Row-major sparse storage with the per-row statistics the samplers need.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::oracle::DenseOracle;
use crate::rng::stream;

/// Default cap on `n * d` for anything that densifies the matrix.
pub const DENSE_ORACLE_LIMIT: usize = 250_000;

/// One row: strictly increasing coordinates, nonzero values, cached norms.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseRow {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
    pub l1: f64,
    pub l2sq: f64,
    /// `l1^2 / l2sq`; zero for an empty row.
    pub num_sparsity: f64,
}

impl SparseRow {
    /// Builds a row from sorted, deduplicated, nonzero entries.
    pub fn new(indices: Vec<usize>, values: Vec<f64>) -> Self {
        debug_assert_eq!(indices.len(), values.len());
        debug_assert!(indices.windows(2).all(|w| w[0] < w[1]));
        let l1: f64 = values.iter().map(|v| v.abs()).sum();
        let l2sq: f64 = values.iter().map(|v| v * v).sum();
        let num_sparsity = if l2sq > 0.0 { l1 * l1 / l2sq } else { 0.0 };
        SparseRow { indices, values, l1, l2sq, num_sparsity }
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn dot(&self, x: &[f64]) -> f64 {
        self.indices.iter().zip(&self.values).map(|(&j, &v)| v * x[j]).sum()
    }

    /// Dense copy of the row in dimension `d`.
    pub fn to_dense(&self, d: usize) -> Vec<f64> {
        let mut out = vec![0.0; d];
        for (&j, &v) in self.indices.iter().zip(&self.values) {
            out[j] = v;
        }
        out
    }
}

/// Immutable sparse matrix stored by rows.
#[derive(Clone, Debug, PartialEq)]
pub struct RowMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub rows: Vec<SparseRow>,
    pub frob_sq: f64,
    pub row_l2sq_max: f64,
    nnz: usize,
}

/// Spectral summary of `AᵀA`. Fields that need the dense oracle are `None`
/// above the size limit unless supplied by the caller.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpectralStats {
    pub lambda1_est: f64,
    pub mu_est: Option<f64>,
    pub stable_rank_est: f64,
    pub kappa_est: Option<f64>,
    pub gap_est: Option<f64>,
}

impl RowMatrix {
    /// Assembles a matrix from already-built rows.
    pub fn from_rows(n_cols: usize, rows: Vec<SparseRow>) -> Result<Self> {
        for (i, r) in rows.iter().enumerate() {
            if let Some(&last) = r.indices.last() {
                if last >= n_cols {
                    return Err(Error::dim(format!("row {i} has column {last} >= {n_cols}")));
                }
            }
            if let Some(p) = r.values.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { row: i, col: r.indices[p] });
            }
        }
        let frob_sq = rows.iter().map(|r| r.l2sq).sum();
        let row_l2sq_max = rows.iter().map(|r| r.l2sq).fold(0.0, f64::max);
        let nnz = rows.iter().map(|r| r.nnz()).sum();
        Ok(RowMatrix { n_rows: rows.len(), n_cols, rows, frob_sq, row_l2sq_max, nnz })
    }

    /// Keeps entries with `|v| > drop_tol`.
    pub fn from_dense(values: &[Vec<f64>], drop_tol: f64) -> Result<Self> {
        if !(drop_tol >= 0.0) {
            return Err(Error::config("drop_tol must be nonnegative"));
        }
        let n_cols = values.first().map_or(0, |r| r.len());
        let mut rows = Vec::with_capacity(values.len());
        for (i, row) in values.iter().enumerate() {
            if row.len() != n_cols {
                return Err(Error::dim(format!("row {i} has {} entries, expected {n_cols}", row.len())));
            }
            let mut idx = Vec::new();
            let mut val = Vec::new();
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite { row: i, col: j });
                }
                if v.abs() > drop_tol {
                    idx.push(j);
                    val.push(v);
                }
            }
            rows.push(SparseRow::new(idx, val));
        }
        Self::from_rows(n_cols, rows)
    }

    /// Builds from `(row, col, value)` triplets; duplicates are summed and
    /// exact zeros dropped.
    pub fn from_triplets(n_rows: usize, n_cols: usize, triplets: &[(usize, usize, f64)]) -> Result<Self> {
        let mut per_row: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_rows];
        for &(i, j, v) in triplets {
            if i >= n_rows || j >= n_cols {
                return Err(Error::dim(format!("entry ({i}, {j}) outside {n_rows}x{n_cols}")));
            }
            if !v.is_finite() {
                return Err(Error::NonFinite { row: i, col: j });
            }
            per_row[i].push((j, v));
        }
        let rows = per_row
            .into_iter()
            .map(|mut es| {
                es.sort_by_key(|e| e.0);
                let mut idx: Vec<usize> = Vec::with_capacity(es.len());
                let mut val: Vec<f64> = Vec::with_capacity(es.len());
                for (j, v) in es {
                    if idx.last() == Some(&j) {
                        *val.last_mut().unwrap() += v;
                    } else {
                        idx.push(j);
                        val.push(v);
                    }
                }
                let (idx, val): (Vec<_>, Vec<_>) =
                    idx.into_iter().zip(val).filter(|&(_, v)| v != 0.0).unzip();
                SparseRow::new(idx, val)
            })
            .collect();
        Self::from_rows(n_cols, rows)
    }

    pub fn identity(d: usize) -> Self {
        let rows = (0..d).map(|i| SparseRow::new(vec![i], vec![1.0])).collect();
        Self::from_rows(d, rows).expect("identity is well formed")
    }

    pub fn nnz(&self) -> usize {
        self.nnz
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| r.to_dense(self.n_cols)).collect()
    }

    /// `A x`.
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n_cols);
        self.rows.iter().map(|r| r.dot(x)).collect()
    }

    /// `Aᵀ y`.
    pub fn tmul_vec(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.n_rows);
        let mut out = vec![0.0; self.n_cols];
        for (r, &yi) in self.rows.iter().zip(y) {
            if yi != 0.0 {
                for (&j, &v) in r.indices.iter().zip(&r.values) {
                    out[j] += v * yi;
                }
            }
        }
        out
    }

    /// `AᵀA x` in one pass over the rows.
    pub fn gram_mul(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n_cols);
        let mut out = vec![0.0; self.n_cols];
        for r in &self.rows {
            let t = r.dot(x);
            if t != 0.0 {
                for (&j, &v) in r.indices.iter().zip(&r.values) {
                    out[j] += v * t;
                }
            }
        }
        out
    }

    /// Mean numerical sparsity over nonzero rows.
    pub fn mean_num_sparsity(&self) -> f64 {
        let (sum, cnt) = self
            .rows
            .iter()
            .filter(|r| !r.is_empty())
            .fold((0.0, 0usize), |(s, c), r| (s + r.num_sparsity, c + 1));
        if cnt == 0 { 0.0 } else { sum / cnt as f64 }
    }
}

/// Appends `√lam·e_j` rows so that `‖Ãx − b̃‖² = ‖Ax − b‖² + lam‖x − x0‖²`.
pub fn augment_ridge(mat: &RowMatrix, b: &[f64], lam: f64, x0: &[f64]) -> Result<(RowMatrix, Vec<f64>)> {
    if !(lam > 0.0) {
        return Err(Error::config("ridge weight must be positive"));
    }
    if b.len() != mat.n_rows || x0.len() != mat.n_cols {
        return Err(Error::dim("augment_ridge: b or x0 has the wrong length"));
    }
    let s = lam.sqrt();
    let mut rows = mat.rows.clone();
    rows.extend((0..mat.n_cols).map(|j| SparseRow::new(vec![j], vec![s])));
    let mut bt = b.to_vec();
    bt.extend(x0.iter().map(|v| s * v));
    Ok((RowMatrix::from_rows(mat.n_cols, rows)?, bt))
}

/// Power iteration for `λ₁`, dense oracle for `μ` and the gap when small
/// enough. `mu_user` overrides the oracle.
pub fn estimate_spectral(mat: &RowMatrix, power_iters: usize, seed: u64) -> Result<SpectralStats> {
    estimate_spectral_with(mat, power_iters, seed, None, DENSE_ORACLE_LIMIT)
}

pub fn estimate_spectral_with(
    mat: &RowMatrix,
    power_iters: usize,
    seed: u64,
    mu_user: Option<f64>,
    dense_limit: usize,
) -> Result<SpectralStats> {
    if power_iters == 0 {
        return Err(Error::config("power_iters must be at least 1"));
    }
    if mat.frob_sq == 0.0 {
        return Err(Error::ZeroMatrix);
    }
    let d = mat.n_cols;
    let mut rng = stream(seed, 0x5eed);
    let mut x: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
    normalize(&mut x);
    let mut lambda1: f64 = 0.0;
    for _ in 0..power_iters {
        let y = mat.gram_mul(&x);
        let rq: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        lambda1 = lambda1.max(rq);
        x = y;
        if normalize(&mut x) == 0.0 {
            break;
        }
    }
    let (mut mu_est, mut gap_est) = (mu_user, None);
    if mat.n_rows * d <= dense_limit {
        let oracle = DenseOracle::with_limit(mat, dense_limit)?;
        let spec = oracle.spectrum();
        lambda1 = lambda1.max(spec.eigenvalues[0]);
        gap_est = Some(spec.gap);
        if mu_est.is_none() {
            mu_est = Some(spec.eigenvalues[d - 1].max(0.0));
        }
    }
    let stable_rank_est = mat.frob_sq / lambda1;
    let kappa_est = mu_est.map(|m| if m > 0.0 { mat.frob_sq / m } else { f64::INFINITY });
    Ok(SpectralStats { lambda1_est: lambda1, mu_est, stable_rank_est, kappa_est, gap_est })
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn normalize(x: &mut [f64]) -> f64 {
    let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v /= n);
    }
    n
}

pub fn load_matrix_market(path: impl AsRef<Path>) -> Result<RowMatrix> {
    read_matrix_market(File::open(path)?)
}

/// Reads coordinate or array `real general` Matrix Market content.
pub fn read_matrix_market(reader: impl Read) -> Result<RowMatrix> {
    let reader = BufReader::new(reader);
    let mut lines = reader.lines().enumerate().map(|(i, l)| (i + 1, l));
    let perr = |line: usize, msg: &str| Error::Parse { line, msg: msg.to_string() };

    let (ln, header) = match lines.next() {
        Some((ln, l)) => (ln, l?),
        None => return Err(perr(1, "empty file")),
    };
    let toks: Vec<String> = header.split_whitespace().map(|t| t.to_ascii_lowercase()).collect();
    if toks.len() != 5 || toks[0] != "%%matrixmarket" || toks[1] != "matrix" {
        return Err(perr(ln, "expected '%%MatrixMarket matrix <format> <field> <symmetry>'"));
    }
    let coordinate = match toks[2].as_str() {
        "coordinate" => true,
        "array" => false,
        _ => return Err(perr(ln, "format must be coordinate or array")),
    };
    if toks[3] != "real" && toks[3] != "integer" {
        return Err(perr(ln, "only real or integer fields are supported"));
    }
    if toks[4] != "general" {
        return Err(perr(ln, "only general symmetry is supported"));
    }

    let mut data = lines.filter(|(_, l)| match l {
        Ok(s) => !s.trim().is_empty() && !s.trim_start().starts_with('%'),
        Err(_) => true,
    });
    let (ln, size) = match data.next() {
        Some((ln, l)) => (ln, l?),
        None => return Err(perr(ln + 1, "missing size line")),
    };
    let dims: Vec<usize> = size
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| perr(ln, "size line must hold integers")))
        .collect::<Result<_>>()?;
    let expect = if coordinate { 3 } else { 2 };
    if dims.len() != expect {
        return Err(perr(ln, &format!("size line must hold {expect} integers")));
    }
    let (n, d) = (dims[0], dims[1]);
    let entries = if coordinate { dims[2] } else { n * d };

    let mut triplets = Vec::with_capacity(entries);
    let mut last_ln = ln;
    for k in 0..entries {
        let (ln, line) = match data.next() {
            Some((ln, l)) => (ln, l?),
            None => return Err(perr(last_ln + 1, &format!("expected {entries} entries, found {k}"))),
        };
        last_ln = ln;
        let t: Vec<&str> = line.split_whitespace().collect();
        let parse_f = |s: &str| -> Result<f64> {
            let v: f64 = s.parse().map_err(|_| perr(ln, "bad numeric value"))?;
            if v.is_finite() { Ok(v) } else { Err(perr(ln, "non-finite value")) }
        };
        if coordinate {
            if t.len() != 3 {
                return Err(perr(ln, "coordinate entry must be 'row col value'"));
            }
            let i: usize = t[0].parse().map_err(|_| perr(ln, "bad row index"))?;
            let j: usize = t[1].parse().map_err(|_| perr(ln, "bad column index"))?;
            if i == 0 || j == 0 || i > n || j > d {
                return Err(perr(ln, "index out of range"));
            }
            triplets.push((i - 1, j - 1, parse_f(t[2])?));
        } else {
            if t.len() != 1 {
                return Err(perr(ln, "array entry must be a single value"));
            }
            // column-major order
            triplets.push((k % n, k / n, parse_f(t[0])?));
        }
    }
    if let Some((ln, _)) = data.next() {
        return Err(perr(ln, "more entries than declared"));
    }
    RowMatrix::from_triplets(n, d, &triplets)
}

pub fn write_matrix_market(mat: &RowMatrix, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_matrix_market_to(mat, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Coordinate format; values use the shortest round-tripping decimal form.
pub fn write_matrix_market_to(mat: &RowMatrix, w: &mut impl Write) -> Result<()> {
    writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
    writeln!(w, "{} {} {}", mat.n_rows, mat.n_cols, mat.nnz())?;
    for (i, r) in mat.rows.iter().enumerate() {
        for (&j, &v) in r.indices.iter().zip(&r.values) {
            writeln!(w, "{} {} {:e}", i + 1, j + 1, v)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_dense_statistics() {
        let m = RowMatrix::from_dense(&[vec![3.0, 4.0, 0.0], vec![0.0, 0.0, 5.0]], 0.0).unwrap();
        assert!((m.rows[0].num_sparsity - 49.0 / 25.0).abs() < 1e-15);
        assert_eq!(m.rows[1].num_sparsity, 1.0);
        assert_eq!(m.frob_sq, 50.0);
        assert_eq!(m.nnz(), 3);

        let id = RowMatrix::from_dense(&[vec![1., 0., 0.], vec![0., 1., 0.], vec![0., 0., 1.]], 0.0).unwrap();
        assert!(id.rows.iter().all(|r| r.num_sparsity == 1.0));
        assert_eq!(id.frob_sq, 3.0);

        let ones = RowMatrix::from_dense(&[vec![1.0; 4]], 0.0).unwrap();
        assert_eq!(ones.rows[0].num_sparsity, 4.0);
    }

    #[test]
    fn from_dense_drop_and_reject() {
        let m = RowMatrix::from_dense(&[vec![1e-3, 1.0]], 1e-2).unwrap();
        assert_eq!(m.rows[0].indices, vec![1]);
        match RowMatrix::from_dense(&[vec![1.0, 0.0], vec![0.0, f64::NAN]], 0.0) {
            Err(Error::NonFinite { row: 1, col: 1 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn matrix_market_examples() {
        let m = read_matrix_market("%%MatrixMarket matrix coordinate real general\n2 2 1\n1 1 2.0\n".as_bytes()).unwrap();
        assert_eq!(m.to_dense(), vec![vec![2.0, 0.0], vec![0.0, 0.0]]);

        let dup = "%%MatrixMarket matrix coordinate real general\n% comment\n2 3 3\n1 2 1.5\n2 3 -1\n1 2 2.5\n";
        let m = read_matrix_market(dup.as_bytes()).unwrap();
        let expect = RowMatrix::from_dense(&[vec![0.0, 4.0, 0.0], vec![0.0, 0.0, -1.0]], 0.0).unwrap();
        assert_eq!(m, expect);

        let empty = read_matrix_market("%%MatrixMarket matrix coordinate real general\n3 3 0\n".as_bytes()).unwrap();
        assert_eq!((empty.n_rows, empty.n_cols, empty.frob_sq), (3, 3, 0.0));

        let arr = read_matrix_market("%%MatrixMarket matrix array real general\n2 2\n1\n2\n3\n4\n".as_bytes()).unwrap();
        assert_eq!(arr.to_dense(), vec![vec![1.0, 3.0], vec![2.0, 4.0]]);
    }

    #[test]
    fn matrix_market_errors_carry_lines() {
        let cases = [
            ("%%MatrixMarket matrix coordinate complex general\n1 1 0\n", 1),
            ("%%MatrixMarket matrix coordinate real general\n2 2\n", 2),
            ("%%MatrixMarket matrix coordinate real general\n2 2 2\n1 1 1\n3 1 1\n", 4),
            ("%%MatrixMarket matrix coordinate real general\n2 2 2\n1 1 1\n", 4),
            ("%%MatrixMarket matrix coordinate real general\n2 2 1\n1 1 x\n", 3),
            ("%%MatrixMarket matrix array real general\n1 1\n1\n2\n", 4),
        ];
        for (text, want) in cases {
            match read_matrix_market(text.as_bytes()) {
                Err(Error::Parse { line, .. }) => assert_eq!(line, want, "{text}"),
                other => panic!("expected parse error for {text:?}, got {other:?}"),
            }
        }
    }

    #[test]
    fn augment_ridge_example() {
        let a = RowMatrix::from_dense(&[vec![1.0, 0.0]], 0.0).unwrap();
        let (at, bt) = augment_ridge(&a, &[1.0], 4.0, &[0.0, 0.0]).unwrap();
        assert_eq!(at.to_dense(), vec![vec![1.0, 0.0], vec![2.0, 0.0], vec![0.0, 2.0]]);
        assert_eq!(bt, vec![1.0, 0.0, 0.0]);
        // at x = (1,1): ‖Ax−b‖² = 0, penalty 4·2 = 8
        let r: f64 = at.mul_vec(&[1.0, 1.0]).iter().zip(&bt).map(|(p, q)| (p - q).powi(2)).sum();
        assert_eq!(r, 8.0);

        let empty = RowMatrix::from_rows(2, vec![]).unwrap();
        let (at, bt) = augment_ridge(&empty, &[], 1.0, &[1.0, 0.0]).unwrap();
        assert_eq!(at.to_dense(), vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(bt, vec![1.0, 0.0]);
    }

    #[test]
    fn spectral_examples() {
        let m = RowMatrix::from_dense(&[vec![3.0, 0.0], vec![0.0, 1.0]], 0.0).unwrap();
        let s = estimate_spectral(&m, 50, 1).unwrap();
        assert!((s.lambda1_est - 9.0).abs() < 1e-9);
        assert!((s.stable_rank_est - 10.0 / 9.0).abs() < 1e-9);
        assert!((s.mu_est.unwrap() - 1.0).abs() < 1e-9);

        let id = estimate_spectral(&RowMatrix::identity(2), 5, 1).unwrap();
        assert!((id.lambda1_est - 1.0).abs() < 1e-12 && (id.mu_est.unwrap() - 1.0).abs() < 1e-12);
        assert!((id.stable_rank_est - 2.0).abs() < 1e-12);

        let def = RowMatrix::from_dense(&[vec![1.0, 0.0], vec![1.0, 0.0]], 0.0).unwrap();
        assert!(estimate_spectral(&def, 5, 1).unwrap().mu_est.unwrap().abs() < 1e-12);

        let zero = RowMatrix::from_rows(2, vec![SparseRow::new(vec![], vec![])]).unwrap();
        assert!(matches!(estimate_spectral(&zero, 5, 1), Err(Error::ZeroMatrix)));
    }
}
