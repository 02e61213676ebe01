//! Coordinate- and row-subsampled estimators of `a`, `aᵀx`, `aaᵀx` and `AᵀAx`.

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::sparse_matrix::{RowMatrix, SparseRow};

/// Walker/Vose alias table: O(n) build, one uniform per draw.
#[derive(Clone, Debug)]
pub struct AliasTable {
    probs: Vec<f64>,
    threshold: Vec<f64>,
    alias: Vec<u32>,
}

impl AliasTable {
    pub fn new(weights: &[f64]) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::config("alias table needs at least one weight"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config("alias weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::config("alias weights are all zero"));
        }
        let n = weights.len();
        let probs: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let mut scaled: Vec<f64> = probs.iter().map(|p| p * n as f64).collect();
        let mut threshold = vec![1.0; n];
        let mut alias: Vec<u32> = (0..n as u32).collect();
        let (mut small, mut large): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| scaled[i] < 1.0);
        while let (Some(s), Some(&l)) = (small.pop(), large.last()) {
            threshold[s] = scaled[s];
            alias[s] = l as u32;
            scaled[l] = (scaled[l] + scaled[s]) - 1.0;
            if scaled[l] < 1.0 {
                large.pop();
                small.push(l);
            }
        }
        // leftovers are 1 up to rounding
        for i in small.into_iter().chain(large) {
            threshold[i] = 1.0;
            alias[i] = i as u32;
        }
        Ok(AliasTable { probs, threshold, alias })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Normalized input weights.
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Probabilities implied by the table itself (what `draw` realizes).
    pub fn table_probabilities(&self) -> Vec<f64> {
        let n = self.len() as f64;
        let mut p: Vec<f64> = self.threshold.iter().map(|t| t / n).collect();
        for (i, &a) in self.alias.iter().enumerate() {
            p[a as usize] += (1.0 - self.threshold[i]) / n;
        }
        p
    }

    /// Maps a uniform `u ∈ [0, 1)` to an index.
    #[inline]
    pub fn draw(&self, u: f64) -> usize {
        let x = u * self.threshold.len() as f64;
        let i = (x as usize).min(self.threshold.len() - 1);
        if x - (i as f64) < self.threshold[i] { i } else { self.alias[i] as usize }
    }
}

pub fn build_alias(weights: &[f64]) -> Result<AliasTable> {
    AliasTable::new(weights)
}

/// Source of categorical draws. Every `RngCore` qualifies; tests and the
/// oracle substitute scripted sources.
pub trait DrawSource {
    fn pick(&mut self, table: &AliasTable) -> usize;
}

impl<R: RngCore> DrawSource for R {
    #[inline]
    fn pick(&mut self, table: &AliasTable) -> usize {
        table.draw(self.random::<f64>())
    }
}

/// O(1) coordinate access to a vector that may be stored implicitly.
pub trait CoordRead {
    fn coord(&self, j: usize) -> f64;
}

impl CoordRead for [f64] {
    #[inline]
    fn coord(&self, j: usize) -> f64 {
        self[j]
    }
}

impl CoordRead for Vec<f64> {
    #[inline]
    fn coord(&self, j: usize) -> f64 {
        self[j]
    }
}

/// Splits `a` into its `c` largest-magnitude entries (ties to the lower
/// coordinate) and the rest. Both parts keep coordinate order.
pub fn top_c_split(a: &SparseRow, c: usize) -> (SparseRow, SparseRow) {
    let mut order: Vec<usize> = (0..a.nnz()).collect();
    order.sort_by(|&p, &q| {
        a.values[q].abs().total_cmp(&a.values[p].abs()).then(a.indices[p].cmp(&a.indices[q]))
    });
    let mut in_head = vec![false; a.nnz()];
    order.iter().take(c).for_each(|&p| in_head[p] = true);
    let part = |keep: bool| {
        let (i, v): (Vec<usize>, Vec<f64>) = (0..a.nnz())
            .filter(|&p| in_head[p] == keep)
            .map(|p| (a.indices[p], a.values[p]))
            .unzip();
        SparseRow::new(i, v)
    };
    (part(true), part(false))
}

/// Per-row sampling state for budget `c`.
#[derive(Clone, Debug)]
pub struct RowSampler {
    pub row_id: usize,
    pub c: usize,
    /// `c ≥ nnz`: the estimators return exact values.
    pub exact: bool,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
    pub head_idx: Vec<usize>,
    pub head_vals: Vec<f64>,
    pub tail_idx: Vec<usize>,
    pub tail_vals: Vec<f64>,
    pub tail_l2sq: f64,
    pub l1: f64,
    pub l2sq: f64,
    pub num_sparsity: f64,
    /// over all entries, weight `|a_j|`
    pub tail_alias_l1: Option<AliasTable>,
    /// over tail entries, weight `a_j²`
    pub tail_alias_l2: Option<AliasTable>,
    vec_out: Vec<f64>,
    tail_coef: Vec<f64>,
}

impl RowSampler {
    pub fn new(row: &SparseRow, row_id: usize, c: usize) -> Self {
        let c = c.max(1);
        let exact = c >= row.nnz();
        let (head, tail) = top_c_split(row, c);
        let tail_l2sq = tail.l2sq;
        let (mut l1_table, mut l2_table) = (None, None);
        let (mut vec_out, mut tail_coef) = (Vec::new(), Vec::new());
        if !exact {
            let absw: Vec<f64> = row.values.iter().map(|v| v.abs()).collect();
            l1_table = Some(AliasTable::new(&absw).expect("nonempty row"));
            vec_out = row.values.iter().map(|v| v.signum() * row.l1 / c as f64).collect();
            let sq: Vec<f64> = tail.values.iter().map(|v| v * v).collect();
            l2_table = Some(AliasTable::new(&sq).expect("nonempty tail"));
            tail_coef = tail.values.iter().map(|v| tail_l2sq / (c as f64 * v)).collect();
        }
        RowSampler {
            row_id,
            c,
            exact,
            indices: row.indices.clone(),
            values: row.values.clone(),
            head_idx: head.indices,
            head_vals: head.values,
            tail_idx: tail.indices,
            tail_vals: tail.values,
            tail_l2sq,
            l1: row.l1,
            l2sq: row.l2sq,
            num_sparsity: row.num_sparsity,
            tail_alias_l1: l1_table,
            tail_alias_l2: l2_table,
            vec_out,
            tail_coef,
        }
    }

    /// Touches of one rank-one estimate: reads, draws and emitted entries.
    pub fn touch_cost(&self) -> usize {
        if self.exact { 2 * self.indices.len() } else { 4 * self.c }
    }

    /// Estimate of `aᵀx`; returns `(value, touches)`.
    #[inline]
    pub fn dot_estimate<X, S>(&self, x: &X, src: &mut S) -> (f64, usize)
    where
        X: CoordRead + ?Sized,
        S: DrawSource + ?Sized,
    {
        let mut acc = 0.0;
        for (&j, &v) in self.head_idx.iter().zip(&self.head_vals) {
            acc += v * x.coord(j);
        }
        let mut touches = self.head_idx.len();
        if let Some(t) = &self.tail_alias_l2 {
            for _ in 0..self.c {
                let p = src.pick(t);
                acc += x.coord(self.tail_idx[p]) * self.tail_coef[p];
            }
            touches += self.c;
        }
        (acc, touches)
    }

    /// Emits the entries of the `a` estimate scaled by `scale`; duplicates
    /// are emitted separately. Returns the number of draws.
    #[inline]
    pub fn emit_vec<S, F>(&self, scale: f64, src: &mut S, mut emit: F) -> usize
    where
        S: DrawSource + ?Sized,
        F: FnMut(usize, f64),
    {
        match &self.tail_alias_l1 {
            None => {
                for (&j, &v) in self.indices.iter().zip(&self.values) {
                    emit(j, v * scale);
                }
                0
            }
            Some(t) => {
                for _ in 0..self.c {
                    let p = src.pick(t);
                    emit(self.indices[p], self.vec_out[p] * scale);
                }
                self.c
            }
        }
    }

    /// Emits `scale · (â)(âᵀx)`; returns `(dot estimate, touches)`. The dot
    /// draws come first, then the independent vector draws.
    #[inline]
    pub fn emit_rank_one<X, S, F>(&self, x: &X, scale: f64, src: &mut S, emit: F) -> (f64, usize)
    where
        X: CoordRead + ?Sized,
        S: DrawSource + ?Sized,
        F: FnMut(usize, f64),
    {
        let (dot, t1) = self.dot_estimate(x, src);
        if dot == 0.0 {
            // still consume the vector draws so streams stay aligned
            let t2 = self.emit_vec(0.0, src, |_, _| {});
            return (0.0, t1 + t2);
        }
        let t2 = self.emit_vec(scale * dot, src, emit);
        (dot, t1 + t2)
    }
}

/// Samplevec: unbiased estimate of `a`, merged and sorted by coordinate.
pub fn samplevec<S: DrawSource + ?Sized>(sampler: &RowSampler, src: &mut S) -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    sampler.emit_vec(1.0, src, |j, v| out.push((j, v)));
    merge_entries(out)
}

/// Sampledotproduct: unbiased estimate of `aᵀx`.
pub fn sampledotproduct<X, S>(sampler: &RowSampler, x: &X, src: &mut S) -> f64
where
    X: CoordRead + ?Sized,
    S: DrawSource + ?Sized,
{
    sampler.dot_estimate(x, src).0
}

/// Sampled rank-one product with cost accounting.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientEstimate {
    pub row_id: usize,
    /// Unmerged `(coordinate, value)` pairs.
    pub coords: Vec<(usize, f64)>,
    pub scalar_dot: f64,
    pub touch_count: usize,
}

impl GradientEstimate {
    pub fn to_dense(&self, d: usize) -> Vec<f64> {
        let mut out = vec![0.0; d];
        for &(j, v) in &self.coords {
            out[j] += v;
        }
        out
    }
}

/// Samplerankonemat: unbiased estimate of `aaᵀx`.
pub fn samplerankonemat<X, S>(sampler: &RowSampler, x: &X, src: &mut S) -> GradientEstimate
where
    X: CoordRead + ?Sized,
    S: DrawSource + ?Sized,
{
    let mut coords = Vec::with_capacity(sampler.c.min(sampler.indices.len()));
    let (dot, t) = sampler.emit_rank_one(x, 1.0, src, |j, v| coords.push((j, v)));
    GradientEstimate { row_id: sampler.row_id, touch_count: t + coords.len(), coords, scalar_dot: dot }
}

fn merge_entries(mut e: Vec<(usize, f64)>) -> Vec<(usize, f64)> {
    e.sort_by_key(|p| p.0);
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(e.len());
    for (j, v) in e {
        match out.last_mut() {
            Some(last) if last.0 == j => last.1 += v,
            _ => out.push((j, v)),
        }
    }
    out
}

/// Problem-level sampling configuration: per-row budgets, the row
/// distribution, and the normalizer `M`.
#[derive(Clone, Debug)]
pub struct SamplingPlan {
    pub k: f64,
    pub c_per_row: Vec<usize>,
    pub exact_rows: Vec<bool>,
    /// `p_i`, zero for empty rows.
    pub row_probs: Vec<f64>,
    pub m_norm: f64,
    /// Set by the consuming solver.
    pub sigma_sq: f64,
    pub samplers: Vec<RowSampler>,
    row_alias: AliasTable,
    active: Vec<usize>,
    inv_p: Vec<f64>,
}

impl SamplingPlan {
    /// `c_i = clamp(⌈√s_i·k⌉, 1, d)`.
    pub fn new(mat: &RowMatrix, k: f64) -> Result<Self> {
        if !(k > 0.0) || !k.is_finite() {
            return Err(Error::config(format!("sampling parameter k must be positive and finite, got {k}")));
        }
        let d = mat.n_cols.max(1);
        let c = mat
            .rows
            .iter()
            .map(|r| ((r.num_sparsity.sqrt() * k).ceil() as usize).clamp(1, d))
            .collect();
        Self::with_budgets(mat, k, c)
    }

    /// Every row sampled exactly (plain row-sampled SVRG).
    pub fn exact(mat: &RowMatrix) -> Result<Self> {
        let d = mat.n_cols.max(1);
        Self::with_budgets(mat, d as f64, vec![d; mat.n_rows])
    }

    pub fn with_budgets(mat: &RowMatrix, k: f64, c_per_row: Vec<usize>) -> Result<Self> {
        if c_per_row.len() != mat.n_rows {
            return Err(Error::dim("one budget per row required"));
        }
        let mut weights = Vec::new();
        let mut active = Vec::new();
        let mut row_w = vec![0.0; mat.n_rows];
        for (i, r) in mat.rows.iter().enumerate() {
            if !r.is_empty() {
                let w = r.l2sq * (1.0 + r.num_sparsity / c_per_row[i] as f64);
                row_w[i] = w;
                weights.push(w);
                active.push(i);
            }
        }
        if active.is_empty() {
            return Err(Error::ZeroMatrix);
        }
        let m_norm: f64 = weights.iter().sum();
        let row_alias = AliasTable::new(&weights)?;
        let inv_p = weights.iter().map(|w| m_norm / w).collect();
        let row_probs = row_w.iter().map(|w| w / m_norm).collect();
        let samplers: Vec<RowSampler> =
            mat.rows.iter().enumerate().map(|(i, r)| RowSampler::new(r, i, c_per_row[i])).collect();
        let exact_rows = samplers.iter().map(|s| s.exact).collect();
        Ok(SamplingPlan {
            k,
            c_per_row,
            exact_rows,
            row_probs,
            m_norm,
            sigma_sq: f64::NAN,
            samplers,
            row_alias,
            active,
            inv_p,
        })
    }

    pub fn row_alias(&self) -> &AliasTable {
        &self.row_alias
    }

    /// Row ids in the order used by the row alias table.
    pub fn active_rows(&self) -> &[usize] {
        &self.active
    }

    /// `Σ_i p_i · (touches of row i) + 1`.
    pub fn expected_touches(&self) -> f64 {
        1.0 + self
            .active
            .iter()
            .map(|&i| self.row_probs[i] * self.samplers[i].touch_cost() as f64)
            .sum::<f64>()
    }

    /// Draws a row and emits `(1/p_i)·(âaᵀx)` entries scaled by `scale`.
    /// Returns `(row id, dot estimate, touches)`; touches include the row
    /// draw and one per emitted entry.
    #[inline]
    pub fn emit_samplemat<X, S, F>(&self, x: &X, scale: f64, src: &mut S, emit: F) -> (usize, f64, usize)
    where
        X: CoordRead + ?Sized,
        S: DrawSource + ?Sized,
        F: FnMut(usize, f64),
    {
        let a = src.pick(&self.row_alias);
        let i = self.active[a];
        let s = &self.samplers[i];
        let (dot, t) = s.emit_rank_one(x, scale * self.inv_p[a], src, emit);
        let written = if s.exact { s.indices.len() } else { s.c };
        (i, dot, 1 + t + written)
    }
}

/// Samplemat: unbiased estimate of `AᵀAx`.
pub fn samplemat<X, S>(plan: &SamplingPlan, x: &X, src: &mut S) -> GradientEstimate
where
    X: CoordRead + ?Sized,
    S: DrawSource + ?Sized,
{
    let mut coords = Vec::new();
    let (row_id, dot, touch_count) = plan.emit_samplemat(x, 1.0, src, |j, v| coords.push((j, v)));
    GradientEstimate { row_id, coords, scalar_dot: dot, touch_count }
}

/// Draw source that replays fixed indices; used for hand-checked traces.
pub struct Scripted {
    pub picks: Vec<usize>,
    pos: usize,
}

impl Scripted {
    pub fn new(picks: Vec<usize>) -> Self {
        Scripted { picks, pos: 0 }
    }
}

impl DrawSource for Scripted {
    fn pick(&mut self, table: &AliasTable) -> usize {
        let p = self.picks[self.pos];
        self.pos += 1;
        assert!(p < table.len(), "scripted pick out of range");
        p
    }
}
