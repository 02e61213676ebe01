//! Epoch-structured SVRG on quadratics with an implicit iterate, so an inner
//! step costs O(touched coordinates) rather than O(d).

use serde::Serialize;

use crate::error::{Error, Result};
use crate::report::SolveReport;
use crate::sampling::{CoordRead, DrawSource, SamplingPlan};
use crate::sparse_matrix::RowMatrix;

/// Optional replacements for the derived step size and epoch length.
#[derive(Clone, Debug, Serialize)]
pub struct ParamOverrides {
    pub eta: Option<f64>,
    pub m: Option<u64>,
    /// `η = 1/(step_const·σ²)`
    pub step_const: f64,
    /// `m = ⌈epoch_const·σ²/μ⌉`
    pub epoch_const: f64,
}

impl Default for ParamOverrides {
    fn default() -> Self {
        ParamOverrides { eta: None, m: None, step_const: 8.0, epoch_const: 64.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SvrgParams {
    pub eta: f64,
    pub m: u64,
    pub sigma_sq: f64,
    pub mu: f64,
    pub renorm_threshold: f64,
}

impl SvrgParams {
    /// `(1/(1 − 2ησ²))·(1/(mημ) + 2ησ²)`, the expected per-epoch contraction
    /// of the average iterate's function gap.
    pub fn rate_factor(&self) -> f64 {
        let t = 2.0 * self.eta * self.sigma_sq;
        (1.0 / (1.0 - t)) * (1.0 / (self.m as f64 * self.eta * self.mu) + t)
    }
}

pub fn derive_params(sigma_sq: f64, mu: f64, overrides: &ParamOverrides) -> Result<SvrgParams> {
    if !(mu > 0.0) {
        return Err(Error::NotStronglyConvex(mu));
    }
    if !(sigma_sq > 0.0) || !sigma_sq.is_finite() {
        return Err(Error::config(format!("variance parameter must be positive and finite, got {sigma_sq}")));
    }
    let eta = overrides.eta.unwrap_or(1.0 / (overrides.step_const * sigma_sq));
    let m = match overrides.m {
        Some(m) => m,
        None => {
            let m = (overrides.epoch_const * sigma_sq / mu).ceil();
            if !(m < 1e15) {
                return Err(Error::config(format!("epoch length {m:e} is out of range")));
            }
            m as u64
        }
    };
    if m == 0 || !(eta > 0.0) {
        return Err(Error::config("epoch length and step size must be positive"));
    }
    let p = SvrgParams { eta, m, sigma_sq, mu, renorm_threshold: 1e-6 };
    if 2.0 * eta * sigma_sq >= 1.0 || p.rate_factor() >= 1.0 {
        return Err(Error::config(format!(
            "parameters do not contract: eta = {eta:e}, m = {m}, rate factor = {:.4}",
            p.rate_factor()
        )));
    }
    Ok(p)
}

/// A strongly convex quadratic with a sampled gradient-difference estimator.
pub trait Objective {
    fn dim(&self) -> usize;
    /// `∇f(x)` and its touch cost.
    fn gradient(&self, x: &[f64]) -> (Vec<f64>, u64);
    /// Coefficient `λ` of the dense term `λ(x − x₀)` in the estimated gradient
    /// difference.
    fn shift(&self) -> f64;
    /// Emits the sparse part of `∇g(x) − ∇g(x₀)` given `Δ = x − x₀`, using
    /// one draw for both points. Returns touches.
    fn emit_difference<X, S, F>(&self, delta: &X, src: &mut S, emit: F) -> u64
    where
        X: CoordRead + ?Sized,
        S: DrawSource + ?Sized,
        F: FnMut(usize, f64);
}

/// `f(x) = ½xᵀ(shift·I + sign·AᵀA)x − rhsᵀx` with estimator
/// `∇g(x) = shift·x + sign·samplemat(x) − rhs`.
pub struct QuadObjective<'a> {
    pub mat: &'a RowMatrix,
    pub plan: &'a SamplingPlan,
    pub shift: f64,
    pub sign: f64,
    pub rhs: Vec<f64>,
}

impl QuadObjective<'_> {
    pub fn value(&self, x: &[f64]) -> f64 {
        let h = self.mat.gram_mul(x);
        let quad: f64 = x.iter().zip(&h).map(|(a, b)| self.shift * a * a + self.sign * a * b).sum();
        0.5 * quad - self.rhs.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
    }
}

impl Objective for QuadObjective<'_> {
    fn dim(&self) -> usize {
        self.mat.n_cols
    }

    fn gradient(&self, x: &[f64]) -> (Vec<f64>, u64) {
        let h = self.mat.gram_mul(x);
        let g = (0..x.len()).map(|j| self.shift * x[j] + self.sign * h[j] - self.rhs[j]).collect();
        (g, 2 * self.mat.nnz() as u64)
    }

    fn shift(&self) -> f64 {
        self.shift
    }

    #[inline]
    fn emit_difference<X, S, F>(&self, delta: &X, src: &mut S, emit: F) -> u64
    where
        X: CoordRead + ?Sized,
        S: DrawSource + ?Sized,
        F: FnMut(usize, f64),
    {
        self.plan.emit_samplemat(delta, self.sign, src, emit).2 as u64
    }
}

/// `x = γ·v + δ₀·anchor + δ₁·w`.
#[derive(Clone, Debug)]
pub struct ImplicitIterate<'a> {
    pub gamma: f64,
    pub v: Vec<f64>,
    pub delta0: f64,
    pub delta1: f64,
    pub anchor: &'a [f64],
    pub w: &'a [f64],
}

impl<'a> ImplicitIterate<'a> {
    /// Starts at `x = anchor`.
    pub fn new(anchor: &'a [f64], w: &'a [f64]) -> Self {
        ImplicitIterate { gamma: 1.0, v: vec![0.0; anchor.len()], delta0: 1.0, delta1: 0.0, anchor, w }
    }

    #[inline]
    pub fn coord(&self, j: usize) -> f64 {
        self.gamma * self.v[j] + self.delta0 * self.anchor[j] + self.delta1 * self.w[j]
    }

    pub fn materialize(&self) -> Vec<f64> {
        (0..self.v.len()).map(|j| self.coord(j)).collect()
    }

    /// `x ← (1 − ηλ)x + ηλ·anchor − η·w`.
    #[inline]
    pub fn scalar_step(&mut self, eta: f64, lam: f64) {
        let r = 1.0 - eta * lam;
        self.gamma *= r;
        self.delta0 = r * self.delta0 + eta * lam;
        self.delta1 = r * self.delta1 - eta;
    }

    /// `x_j ← x_j + val`.
    #[inline]
    pub fn add(&mut self, j: usize, val: f64) {
        self.v[j] += val / self.gamma;
    }

    /// Folds `γ` into `v`.
    pub fn renormalize(&mut self) {
        let g = self.gamma;
        self.v.iter_mut().for_each(|x| *x *= g);
        self.gamma = 1.0;
    }
}

/// Reads `x − anchor` from an implicit iterate.
struct DiffView<'b, 'a>(&'b ImplicitIterate<'a>);

impl CoordRead for DiffView<'_, '_> {
    #[inline]
    fn coord(&self, j: usize) -> f64 {
        let it = self.0;
        it.gamma * it.v[j] + (it.delta0 - 1.0) * it.anchor[j] + it.delta1 * it.w[j]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochResult {
    /// `(1/m)·Σ_{k<m} x_k`.
    pub output: Vec<f64>,
    pub touches: u64,
    pub dense_touches: u64,
    pub steps: u64,
    /// Filled in by the caller's error metric.
    pub residual: f64,
}

/// One epoch from anchor `x0`, computing `∇f(x0)` first. Returns the epoch
/// and the touches of that full gradient.
pub fn run_epoch<O: Objective, S: DrawSource + ?Sized>(
    obj: &O,
    x0: &[f64],
    params: &SvrgParams,
    src: &mut S,
) -> Result<(EpochResult, u64)> {
    let (w, t) = obj.gradient(x0);
    Ok((run_epoch_with_gradient(obj, x0, &w, params, src)?, t))
}

/// `m` steps of `x ← x − η(∇g(x) − ∇g(x₀) + ∇f(x₀))` on the implicit iterate,
/// averaging lazily. `w = ∇f(x0)`.
pub fn run_epoch_with_gradient<O: Objective, S: DrawSource + ?Sized>(
    obj: &O,
    x0: &[f64],
    w: &[f64],
    params: &SvrgParams,
    src: &mut S,
) -> Result<EpochResult> {
    let d = obj.dim();
    let lam = obj.shift();
    let eta = params.eta;
    let mut it = ImplicitIterate::new(x0, w);
    // running sums of γ_k, δ0_k, δ1_k and per-coordinate flushed Σγ_k v_k[j]
    let (mut big_g, mut d0_sum, mut d1_sum) = (0.0, 0.0, 0.0);
    let mut acc = vec![0.0; d];
    let mut mark = vec![0.0; d];
    let mut buf: Vec<(usize, f64)> = Vec::with_capacity(64);
    let mut touches = 0u64;
    let mut dense = d as u64;

    for step in 0..params.m {
        big_g += it.gamma;
        d0_sum += it.delta0;
        d1_sum += it.delta1;
        buf.clear();
        touches += obj.emit_difference(&DiffView(&it), src, |j, v| buf.push((j, v)));
        it.scalar_step(eta, lam);
        let scale = -eta / it.gamma;
        let mut bad = !scale.is_finite() || !it.delta1.is_finite();
        for &(j, e) in &buf {
            acc[j] += it.v[j] * (big_g - mark[j]);
            mark[j] = big_g;
            it.v[j] += scale * e;
            bad |= !it.v[j].is_finite();
        }
        if bad {
            return Err(Error::Diverged { step: step as usize });
        }
        if it.gamma.abs() < params.renorm_threshold {
            for j in 0..d {
                acc[j] += it.v[j] * (big_g - mark[j]);
                mark[j] = 0.0;
            }
            big_g = 0.0;
            it.renormalize();
            dense += d as u64;
        }
    }
    let m = params.m as f64;
    let output: Vec<f64> = (0..d)
        .map(|j| (acc[j] + it.v[j] * (big_g - mark[j]) + d0_sum * x0[j] + d1_sum * w[j]) / m)
        .collect();
    if output.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged { step: params.m as usize });
    }
    dense += d as u64;
    Ok(EpochResult { output, touches, dense_touches: dense, steps: params.m, residual: f64::NAN })
}

/// Chains epochs until `metric(x, ∇f(x)) / metric(x_init, ∇f(x_init)) ≤
/// target_ratio`. The metric receives the anchor's full gradient, which the
/// next epoch needs anyway.
pub fn solve_constant_factor<O, S, M>(
    obj: &O,
    params: &SvrgParams,
    x_init: &[f64],
    target_ratio: f64,
    max_epochs: u64,
    mut metric: M,
    src: &mut S,
) -> Result<(Vec<f64>, SolveReport)>
where
    O: Objective,
    S: DrawSource + ?Sized,
    M: FnMut(&[f64], &[f64]) -> f64,
{
    if !(target_ratio > 0.0 && target_ratio <= 1.0) {
        return Err(Error::config(format!("target ratio must lie in (0, 1], got {target_ratio}")));
    }
    let mut rep = SolveReport::new("error_ratio");
    let mut x = x_init.to_vec();
    let (mut g, t) = obj.gradient(&x);
    rep.add_full_gradient(t);
    let e0 = metric(&x, &g);
    if e0 == 0.0 {
        rep.converged = true;
        rep.final_metric = 0.0;
        return Ok((x, rep));
    }
    let mut best = (f64::INFINITY, x.clone());
    loop {
        let ratio = metric(&x, &g) / e0;
        rep.trace.push(ratio);
        rep.final_metric = ratio;
        if ratio < best.0 {
            best = (ratio, x.clone());
        }
        if ratio <= target_ratio {
            rep.converged = true;
            break;
        }
        if !ratio.is_finite() || ratio > 1e8 {
            rep.warn(format!("diverged: error ratio {ratio:e} after {} epochs (variance parameter likely too small)", rep.epochs));
            return Ok((best.1, rep));
        }
        if rep.epochs >= max_epochs {
            rep.warn(format!("epoch budget {max_epochs} exhausted at error ratio {ratio:e}"));
            break;
        }
        match run_epoch_with_gradient(obj, &x, &g, params, src) {
            Ok(ep) => {
                rep.epochs += 1;
                rep.inner_steps += ep.steps;
                rep.add_estimator(ep.touches);
                rep.add_dense(ep.dense_touches);
                x = ep.output;
            }
            Err(Error::Diverged { step }) => {
                rep.epochs += 1;
                rep.warn(format!("diverged: non-finite iterate at inner step {step}"));
                return Ok((best.1, rep));
            }
            Err(e) => return Err(e),
        }
        let (ng, t) = obj.gradient(&x);
        rep.add_full_gradient(t);
        g = ng;
    }
    Ok((x, rep))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::sampling::Scripted;

    #[test]
    fn derive_params_examples() {
        let p = derive_params(10.0, 1.0, &ParamOverrides::default()).unwrap();
        assert_eq!(p.eta, 1.0 / 80.0);
        assert_eq!(p.m, 640);
        assert!((p.rate_factor() - 0.5).abs() < 1e-15);

        assert_eq!(derive_params(3.0, 3.0, &ParamOverrides::default()).unwrap().m, 64);

        let o = ParamOverrides { m: Some(1), ..Default::default() };
        assert!(matches!(derive_params(10.0, 1.0, &o), Err(Error::Config(_))));
        assert!(matches!(derive_params(10.0, 0.0, &ParamOverrides::default()), Err(Error::NotStronglyConvex(_))));
    }

    #[test]
    fn implicit_iterate_matches_dense() {
        let anchor = vec![1.0, -2.0, 0.5, 3.0];
        let w = vec![0.25, 1.0, -1.0, 2.0];
        let mut it = ImplicitIterate::new(&anchor, &w);
        let mut x = anchor.clone();
        let mut r = stream(9, 0);
        use rand::Rng;
        for step in 0..500 {
            let (eta, lam) = (0.01 + 0.02 * r.random::<f64>(), if step % 2 == 0 { 3.0 } else { 0.0 });
            it.scalar_step(eta, lam);
            for j in 0..4 {
                x[j] = (1.0 - eta * lam) * x[j] + eta * lam * anchor[j] - eta * w[j];
            }
            let j = r.random_range(0..4);
            let val = r.random::<f64>() - 0.5;
            it.add(j, val);
            x[j] += val;
            if it.gamma.abs() < 1e-6 {
                let before = it.materialize();
                it.renormalize();
                assert_eq!(it.gamma, 1.0);
                for (a, b) in before.iter().zip(it.materialize()) {
                    assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
                }
            }
            for (a, b) in it.materialize().iter().zip(&x) {
                assert!((a - b).abs() <= 1e-10 * b.abs().max(1.0), "step {step}");
            }
        }
    }

    /// Tiny regression objective with exactly representable arithmetic.
    fn dyadic() -> (RowMatrix, SamplingPlan) {
        let m = RowMatrix::from_dense(&[vec![1.0, 0.0], vec![0.0, 2.0]], 0.0).unwrap();
        let plan = SamplingPlan::new(&m, 1.0).unwrap();
        (m, plan)
    }

    #[test]
    fn two_step_trace_is_exact() {
        let (m, plan) = dyadic();
        let obj = QuadObjective { mat: &m, plan: &plan, shift: 0.0, sign: 1.0, rhs: vec![1.0, 2.0] };
        let params = SvrgParams { eta: 0.125, m: 2, sigma_sq: 1.0, mu: 1.0, renorm_threshold: 1e-6 };
        let x0 = vec![2.0, 1.0];
        let (ep, _) = run_epoch(&obj, &x0, &params, &mut Scripted::new(vec![1, 0])).unwrap();
        // hand simulation: w = AᵀA x0 − rhs = (1, 2); p = (0.2, 0.8)
        // step 0: Δ = 0, estimate 0, x1 = x0 − w/8 = (1.875, 0.75)
        // step 1: row 0, Δ = (−0.125, −0.25), estimate 5·(−0.125)·e0 = (−0.625, 0)
        //         x2 unused; average of x0, x1 = (1.9375, 0.875)
        assert_eq!(ep.output, vec![1.9375, 0.875]);
        let (ep3, _) = run_epoch(
            &obj,
            &x0,
            &SvrgParams { m: 3, ..params.clone() },
            &mut Scripted::new(vec![1, 0, 1]),
        )
        .unwrap();
        // x2 = x1 − (Δ-estimate + w)/8 = (1.875 − (−0.625 + 1)/8, 0.75 − 2/8) = (1.828125, 0.5)
        assert_eq!(ep3.output, vec![(2.0 + 1.875 + 1.828125) / 3.0, (1.0 + 0.75 + 0.5) / 3.0]);
    }

    #[test]
    fn fixed_point_and_contraction_1d() {
        let m = RowMatrix::from_dense(&[vec![1.0]], 0.0).unwrap();
        let plan = SamplingPlan::new(&m, 1.0).unwrap();
        let obj = QuadObjective { mat: &m, plan: &plan, shift: 0.0, sign: 1.0, rhs: vec![0.0] };
        let params = derive_params(1.0, 1.0, &ParamOverrides::default()).unwrap();
        let mut r = stream(1, 0);
        let (ep, _) = run_epoch(&obj, &[1.0], &params, &mut r).unwrap();
        // f-gap ratio of the average of (1 − 1/8)^k, k < 64
        let gd: f64 = (0..64).map(|k| (7.0f64 / 8.0).powi(k)).sum::<f64>() / 64.0;
        assert!((ep.output[0] - gd).abs() < 1e-14);
        assert!(ep.output[0].powi(2) <= 0.5);

        let rhs = vec![0.5];
        let obj = QuadObjective { rhs, ..obj };
        let (ep, _) = run_epoch(&obj, &[0.5], &params, &mut r).unwrap();
        assert_eq!(ep.output, vec![0.5]);
    }

    #[test]
    fn target_one_returns_immediately() {
        let (m, plan) = dyadic();
        let obj = QuadObjective { mat: &m, plan: &plan, shift: 0.0, sign: 1.0, rhs: vec![1.0, 2.0] };
        let params = derive_params(2.0 * plan.m_norm, 1.0, &ParamOverrides::default()).unwrap();
        let (x, rep) = solve_constant_factor(&obj, &params, &[0.0, 0.0], 1.0, 10, |_, g| norm(g), &mut stream(0, 0))
            .unwrap();
        assert!(rep.converged);
        assert_eq!(rep.epochs, 0);
        assert_eq!(x, vec![0.0, 0.0]);
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn shifted_epoch_with_renormalization() {
        // f(x) = ½xᵀ(λI − AᵀA)x − rhsᵀx with tiny renorm threshold forcing many renormalizations
        let m = RowMatrix::from_dense(&[vec![1.0, 0.5, 0.0], vec![0.0, 1.0, 0.25], vec![0.3, 0.0, 1.0]], 0.0).unwrap();
        let plan = SamplingPlan::new(&m, 1.0).unwrap();
        let obj = QuadObjective { mat: &m, plan: &plan, shift: 4.0, sign: -1.0, rhs: vec![1.0, -1.0, 0.5] };
        let mut params = derive_params(200.0, 1.0, &ParamOverrides::default()).unwrap();
        let mut r1 = stream(4, 0);
        let mut r2 = stream(4, 0);
        let (a, _) = run_epoch(&obj, &[0.2, 0.1, 0.0], &params, &mut r1).unwrap();
        params.renorm_threshold = 0.999;
        let (b, _) = run_epoch(&obj, &[0.2, 0.1, 0.0], &params, &mut r2).unwrap();
        assert!(b.dense_touches > a.dense_touches + 100);
        for (p, q) in a.output.iter().zip(&b.output) {
            assert!((p - q).abs() < 1e-10 * p.abs().max(1.0));
        }
    }
}
