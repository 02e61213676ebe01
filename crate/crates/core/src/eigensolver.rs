//! Top eigenvector of `AᵀA` by shift-and-invert: SVRG solves systems in
//! `B = λI − AᵀA` inside an inverted power loop.

use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::oracle::fix_sign;
use crate::regression::solve_sub;
use crate::report::SolveReport;
use crate::rng::{stream, SolverRng};
use crate::sampling::SamplingPlan;
use crate::sparse_matrix::{norm, normalize, RowMatrix};
use crate::svrg_core::{derive_params, solve_constant_factor, ParamOverrides, QuadObjective, SvrgParams};

/// `B = lam·I − AᵀA` with its sampling plan and SVRG constants.
pub struct ShiftedSystem<'a> {
    pub mat: &'a RowMatrix,
    pub lam: f64,
    /// `None` only for the zero matrix, where `B = lam·I`.
    pub plan: Option<SamplingPlan>,
    pub gap_assumed: f64,
    /// Estimate of `λ₁` behind `mu_b = lam − lambda1_est`.
    pub lambda1_est: f64,
    pub mu_b: f64,
    pub sigma_sq: f64,
    pub max_epochs: u64,
    pub overrides: ParamOverrides,
}

impl<'a> ShiftedSystem<'a> {
    /// Plan with `k = √sr(A)`; `σ² = (lam² + max(M − 2lam, 0)λ₁ + M‖A‖_F²/k²)/(lam − λ₁)`.
    pub fn new(mat: &'a RowMatrix, lam: f64, gap_assumed: f64, lambda1_est: f64) -> Result<Self> {
        if !(lam > lambda1_est) || !lam.is_finite() {
            return Err(Error::NotPositiveDefinite(format!("shift {lam:e} does not exceed lambda1 estimate {lambda1_est:e}")));
        }
        let mu_b = lam - lambda1_est;
        let (plan, sigma_sq) = if mat.frob_sq == 0.0 {
            (None, lam * lam / mu_b)
        } else {
            let k = (mat.frob_sq / lambda1_est.max(f64::MIN_POSITIVE)).sqrt().max(1.0);
            let mut plan = SamplingPlan::new(mat, k)?;
            let m = plan.m_norm;
            let s = (lam * lam + (m - 2.0 * lam).max(0.0) * lambda1_est + m * mat.frob_sq / (k * k)) / mu_b;
            plan.sigma_sq = s;
            (Some(plan), s)
        };
        Ok(ShiftedSystem {
            mat,
            lam,
            plan,
            gap_assumed,
            lambda1_est,
            mu_b,
            sigma_sq,
            max_epochs: 200,
            overrides: ParamOverrides::default(),
        })
    }

    /// `(1 + gap/150)λ₁ ≤ lam ≤ 2λ₁` against the stored estimate.
    pub fn in_variance_window(&self) -> bool {
        let l1 = self.lambda1_est;
        self.lam >= (1.0 + self.gap_assumed / 150.0) * l1 && self.lam <= 2.0 * l1
    }

    pub fn params(&self) -> Result<SvrgParams> {
        derive_params(self.sigma_sq, self.mu_b, &self.overrides)
    }

    fn objective(&self, rhs: Vec<f64>) -> QuadObjective<'_> {
        QuadObjective { mat: self.mat, plan: self.plan.as_ref().expect("nonzero matrix"), shift: self.lam, sign: -1.0, rhs }
    }

    /// `lam·x − AᵀAx − rhs`.
    fn gradient(&self, x: &[f64], rhs: &[f64]) -> Vec<f64> {
        let h = self.mat.gram_mul(x);
        (0..x.len()).map(|j| self.lam * x[j] - h[j] - rhs[j]).collect()
    }
}

/// SVRG on `½xᵀBx − rhsᵀx` until the certified `B`-norm error ratio is at
/// most `target_ratio`: `‖∇‖/‖∇₀‖ ≤ target_ratio·√(μ_B/lam)`.
pub fn solve_shifted_system(
    sys: &ShiftedSystem<'_>,
    rhs: &[f64],
    x_init: &[f64],
    target_ratio: f64,
    rng: &mut SolverRng,
) -> Result<(Vec<f64>, SolveReport)> {
    let d = sys.mat.n_cols;
    if rhs.len() != d || x_init.len() != d {
        return Err(Error::dim("rhs and x_init need one entry per column"));
    }
    if !(target_ratio > 0.0 && target_ratio <= 1.0) {
        return Err(Error::config(format!("target ratio must lie in (0, 1], got {target_ratio}")));
    }
    let mut rep = SolveReport::new("b_norm_ratio_bound");
    if sys.plan.is_none() {
        rep.add_full_gradient(0);
        rep.add_dense(d as u64);
        rep.converged = true;
        return Ok((rhs.iter().map(|r| r / sys.lam).collect(), rep));
    }
    let cert = (sys.lam / sys.mu_b).sqrt();
    let obj = sys.objective(rhs.to_vec());
    let params = sys.params()?;
    let (x, inner) =
        solve_constant_factor(&obj, &params, x_init, (target_ratio / cert).min(1.0), sys.max_epochs, |_, g| norm(g), rng)?;
    rep.absorb(&inner);
    rep.converged = inner.converged;
    rep.trace = inner.trace.iter().map(|r| (r * cert).min(1.0)).collect();
    rep.final_metric = (inner.final_metric * cert).min(1.0);
    Ok((x, rep))
}

/// `√(2λ₁/nnz(A) · Σ‖a_i‖²(√s_i + √sr)√s_i)`.
pub fn balancing_gamma(mat: &RowMatrix, lambda1: f64) -> f64 {
    let sr = (mat.frob_sq / lambda1).sqrt();
    let sum: f64 = mat.rows.iter().map(|r| r.l2sq * (r.num_sparsity.sqrt() + sr) * r.num_sparsity.sqrt()).sum();
    (2.0 * lambda1 / mat.nnz() as f64 * sum).sqrt()
}

/// Catalyst over `B + γI` systems; same certificate as the plain solve.
#[allow(clippy::too_many_arguments)]
fn solve_shifted_accelerated(
    mat: &RowMatrix,
    lam: f64,
    lambda1: f64,
    gap: f64,
    rhs: &[f64],
    x_init: &[f64],
    target_ratio: f64,
    cfg: &EigenConfig,
    rng: &mut SolverRng,
) -> Result<(Vec<f64>, SolveReport)> {
    let d = mat.n_cols;
    let mut rep = SolveReport::new("b_norm_ratio_bound");
    let mu_b = lam - lambda1;
    let mut gamma = cfg.accel.gamma_override.unwrap_or_else(|| balancing_gamma(mat, lambda1));
    if gamma < 2.0 * mu_b {
        rep.warn("balancing gamma below 2(lam - lambda1); raised to that floor");
        gamma = 2.0 * mu_b;
    }
    let outer = ShiftedSystem::new(mat, lam, gap, lambda1)?;
    let mut sub = ShiftedSystem::new(mat, lam + gamma, gap, lambda1)?;
    sub.overrides = cfg.overrides.clone();
    let params = sub.params()?;
    let c_acc = 4.0 * ((2.0 * gamma + mu_b) / mu_b).powf(1.5);
    let sub_target = ((mu_b + gamma) / ((lam + gamma) * c_acc)).sqrt();
    let cert = (lam / mu_b).sqrt();
    let q = mu_b / (mu_b + gamma);
    let beta = (1.0 - q.sqrt()) / (1.0 + q.sqrt());

    let mut x = x_init.to_vec();
    let mut y = x.clone();
    let g0 = norm(&outer.gradient(&x, rhs));
    rep.add_full_gradient(2 * mat.nnz() as u64);
    if g0 == 0.0 {
        rep.converged = true;
        return Ok((x, rep));
    }
    loop {
        let gy = norm(&outer.gradient(&y, rhs));
        rep.add_full_gradient(2 * mat.nnz() as u64);
        let sub_rhs: Vec<f64> = (0..d).map(|j| rhs[j] + gamma * y[j]).collect();
        let (x_new, inner) = solve_sub(&sub.objective(sub_rhs), &params, &x, gy * sub_target, cfg.max_epochs, rng)?;
        rep.absorb(&inner);
        rep.outer_iterations += 1;
        let ratio = norm(&outer.gradient(&x_new, rhs)) / g0;
        rep.add_full_gradient(2 * mat.nnz() as u64);
        rep.final_metric = (ratio * cert).min(1.0);
        rep.trace.push(rep.final_metric);
        if !inner.converged || !ratio.is_finite() || ratio > 1e8 {
            rep.warn("diverged: accelerated shifted solve failed");
            return Ok((x, rep));
        }
        for j in 0..d {
            y[j] = x_new[j] + beta * (x_new[j] - x[j]);
        }
        x = x_new;
        if ratio * cert <= target_ratio {
            rep.converged = true;
            return Ok((x, rep));
        }
        if rep.outer_iterations >= cfg.accel.max_outer {
            rep.warn(format!("outer iteration budget {} exhausted", cfg.accel.max_outer));
            return Ok((x, rep));
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EigenAccel {
    pub enabled: bool,
    pub gamma_override: Option<f64>,
    pub max_outer: u64,
}

impl Default for EigenAccel {
    fn default() -> Self {
        EigenAccel { enabled: false, gamma_override: None, max_outer: 100_000 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EigenConfig {
    /// Target: `vᵀAᵀAv ≥ (1 − ε)λ₁`.
    pub epsilon: f64,
    /// Lower bound on `(λ₁ − λ₂)/λ₁`; estimated by a deflated power probe if
    /// absent.
    pub gap_lower_bound: Option<f64>,
    /// Known `λ₁`, used to place the shift directly.
    pub lambda1: Option<f64>,
    pub seed: u64,
    /// Epoch cap for each linear solve.
    pub max_epochs: u64,
    pub overrides: ParamOverrides,
    pub accel: EigenAccel,
}

impl Default for EigenConfig {
    fn default() -> Self {
        EigenConfig {
            epsilon: 1e-3,
            gap_lower_bound: None,
            lambda1: None,
            seed: 0,
            max_epochs: 200,
            overrides: ParamOverrides::default(),
            accel: EigenAccel::default(),
        }
    }
}

/// Outcome of the shift search.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShiftSearch {
    pub lam: f64,
    pub in_window: bool,
    pub v: Vec<f64>,
    pub rayleigh: f64,
    pub report: SolveReport,
}

fn rayleigh(mat: &RowMatrix, v: &[f64], rep: &mut SolveReport) -> (f64, Vec<f64>) {
    let h = mat.gram_mul(v);
    rep.add_full_gradient(2 * mat.nnz() as u64);
    (v.iter().zip(&h).map(|(a, b)| a * b).sum(), h)
}

fn random_unit(d: usize, rng: &mut SolverRng) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
        if normalize(&mut v) > 0.0 {
            return v;
        }
    }
}

/// One inverted power step `v ← normalize(B⁻¹v)` warm-started at
/// `v/(lam − λ₁)`. `None` when the solve fails.
#[allow(clippy::too_many_arguments)]
fn power_step(
    mat: &RowMatrix,
    lam: f64,
    lambda1: f64,
    gap: f64,
    v: &[f64],
    target: f64,
    cfg: &EigenConfig,
    rng: &mut SolverRng,
    rep: &mut SolveReport,
) -> Result<Option<Vec<f64>>> {
    let x_init: Vec<f64> = v.iter().map(|a| a / (lam - lambda1)).collect();
    let (mut x, inner) = if cfg.accel.enabled {
        solve_shifted_accelerated(mat, lam, lambda1, gap, v, &x_init, target, cfg, rng)?
    } else {
        let mut sys = ShiftedSystem::new(mat, lam, gap, lambda1)?;
        sys.max_epochs = cfg.max_epochs;
        sys.overrides = cfg.overrides.clone();
        solve_shifted_system(&sys, v, &x_init, target, rng)?
    };
    let ok = inner.converged;
    rep.absorb(&inner);
    rep.outer_iterations += 1;
    if !ok || normalize(&mut x) == 0.0 {
        return Ok(None);
    }
    Ok(Some(x))
}

/// Power step plus its Rayleigh quotient; `ρ ≥ lam` shows `lam ≤ λ₁`.
#[allow(clippy::too_many_arguments)]
fn search_step(
    mat: &RowMatrix,
    lam: f64,
    lambda1: f64,
    gap: f64,
    v: &[f64],
    cfg: &EigenConfig,
    rng: &mut SolverRng,
    rep: &mut SolveReport,
) -> Result<Option<(Vec<f64>, f64)>> {
    let Some(x) = power_step(mat, lam, lambda1, gap, v, 0.25, cfg, rng, rep)? else {
        return Ok(None);
    };
    let (rho, _) = rayleigh(mat, &x, rep);
    rep.trace.push(rho);
    Ok((rho < lam).then_some((x, rho)))
}

/// Shift placement: starts at `(1 + g/100)·λ₁_ub` and halves `lam − ρ`,
/// with `ρ` the Rayleigh quotient after an inverted power step, until
/// `(1 + g/150)ρ ≤ lam ≤ (1 + g/100)ρ`. A failed solve restores the last good
/// shift and takes another power step there.
pub fn lambda_shift_search(mat: &RowMatrix, gap_lower_bound: f64, cfg: &EigenConfig) -> Result<ShiftSearch> {
    let mut rng = stream(cfg.seed, 5);
    let v = random_unit(mat.n_cols, &mut rng);
    shift_search_from(mat, gap_lower_bound, cfg, v, &mut rng)
}

fn shift_search_from(mat: &RowMatrix, g: f64, cfg: &EigenConfig, v0: Vec<f64>, rng: &mut SolverRng) -> Result<ShiftSearch> {
    if !(g > 0.0 && g < 1.0) {
        return Err(Error::config(format!("gap lower bound must lie in (0, 1), got {g}")));
    }
    if mat.frob_sq == 0.0 {
        return Err(Error::ZeroMatrix);
    }
    let mut rep = SolveReport::new("rayleigh_quotient");
    let (lo, hi) = (1.0 + g / 150.0, 1.0 + g / 100.0);
    let mut v = v0;
    let (mut rho, _) = rayleigh(mat, &v, &mut rep);
    // reference for the window and μ_B: the known λ₁, else the running RQ
    let reference = |rho: f64| cfg.lambda1.map_or(rho, |l| l.max(rho));
    let mut lam = hi * cfg.lambda1.unwrap_or(mat.frob_sq);
    let mut good: Option<(f64, Vec<f64>, f64)> = None;
    let search_cfg = EigenConfig { max_epochs: cfg.max_epochs.min(40), ..cfg.clone() };
    for _ in 0..80 {
        let r = reference(rho);
        if lam >= lo * r && lam <= hi * r {
            rep.final_metric = rho;
            return Ok(ShiftSearch { lam, in_window: true, v, rayleigh: rho, report: rep });
        }
        match search_step(mat, lam, r, g, &v, &search_cfg, rng, &mut rep)? {
            Some((nv, nrho)) => {
                good = Some((lam, nv.clone(), nrho));
                v = nv;
                rho = nrho;
                let r = reference(rho);
                if lam > hi * r {
                    lam = (r + 0.5 * (lam - r)).max((1.0 + g / 120.0) * r);
                }
            }
            None => {
                rep.warn(format!("shift {lam:.6e} failed to solve; backing off"));
                match &good {
                    Some((gl, gv, grho)) => {
                        lam = *gl;
                        v = gv.clone();
                        rho = *grho;
                        // step at the last good shift so the next halving starts from a better ρ
                        if let Some((nv, nrho)) = search_step(mat, lam, reference(rho), g, &v, &search_cfg, rng, &mut rep)? {
                            v = nv;
                            rho = nrho;
                            let r = reference(rho);
                            lam = (r + 0.75 * (lam - r)).max((1.0 + g / 120.0) * r);
                        }
                    }
                    None => lam = reference(rho) + 2.0 * (lam - reference(rho)),
                }
            }
        }
    }
    rep.warn(format!("shift search ended outside the window [(1+g/150)rho, (1+g/100)rho] at lam = {lam:.6e}"));
    let (lam, v, rho) = good.unwrap_or((lam, v, rho));
    rep.final_metric = rho;
    Ok(ShiftSearch { lam, in_window: false, v, rayleigh: rho, report: rep })
}

/// Rayleigh quotient of a power iteration kept orthogonal to `v`; estimates
/// `λ₂` (from above when `v` is inexact).
fn second_eigen_probe(mat: &RowMatrix, v: &[f64], iters: usize, rng: &mut SolverRng, rep: &mut SolveReport) -> f64 {
    let project = |u: &mut Vec<f64>| {
        let c: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
        u.iter_mut().zip(v).for_each(|(a, b)| *a -= c * b);
        normalize(u)
    };
    let mut u = random_unit(v.len(), rng);
    if project(&mut u) == 0.0 {
        return 0.0;
    }
    let mut rho2 = 0.0;
    for _ in 0..iters {
        let (r, h) = rayleigh(mat, &u, rep);
        rho2 = r;
        u = h;
        if project(&mut u) == 0.0 {
            break;
        }
    }
    rho2
}

/// Unit top eigenvector of `AᵀA`, largest-magnitude coordinate positive.
///
/// Stops when `‖AᵀAv − ρv‖ ≤ √ε·g·ρ/2`, which forces `ρ ≥ (1 − ε)λ₁` when the
/// true gap is at least `g`. A measured gap below `g` or a stagnating
/// residual reports non-convergence.
pub fn top_eigenvector(mat: &RowMatrix, cfg: &EigenConfig) -> Result<(Vec<f64>, SolveReport)> {
    let start = Instant::now();
    if !(cfg.epsilon > 0.0 && cfg.epsilon < 1.0) {
        return Err(Error::config(format!("epsilon must lie in (0, 1), got {}", cfg.epsilon)));
    }
    if let Some(g) = cfg.gap_lower_bound {
        if !(g > 0.0 && g < 1.0) {
            return Err(Error::config(format!("gap lower bound must lie in (0, 1), got {g}")));
        }
    }
    let d = mat.n_cols;
    if mat.frob_sq == 0.0 {
        return Err(Error::ZeroMatrix);
    }
    let mut rep = SolveReport::new("rayleigh_quotient");
    if d == 1 {
        rep.converged = true;
        rep.final_metric = mat.frob_sq;
        return Ok((vec![1.0], rep));
    }
    let mut rng = stream(cfg.seed, 4);
    let v0 = random_unit(d, &mut rng);

    let (g, probed) = match cfg.gap_lower_bound {
        Some(g) => (g, None),
        None => {
            // a short power run seeds the probe
            let mut v = v0.clone();
            for _ in 0..30 {
                let (_, h) = rayleigh(mat, &v, &mut rep);
                v = h;
                normalize(&mut v);
            }
            let (r1, _) = rayleigh(mat, &v, &mut rep);
            let r2 = second_eigen_probe(mat, &v, 30, &mut rng, &mut rep);
            let measured = (r1 - r2) / r1;
            if measured < 1e-3 {
                rep.warn(format!("measured gap {measured:.3e} is too small to place a shift; no top eigenvector certified"));
                fix_sign(&mut v);
                rep.final_metric = r1;
                rep.trace.push(r1);
                rep.wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
                return Ok((v, rep));
            }
            let g = (measured / 2.0).min(0.5);
            rep.warn(format!("no gap lower bound given; using half the measured gap, {g:.4e}"));
            (g, Some(measured))
        }
    };

    let search = shift_search_from(mat, g, cfg, v0, &mut rng)?;
    rep.absorb(&search.report);
    rep.outer_iterations += search.report.outer_iterations;
    rep.trace.extend(&search.report.trace);
    let lam = search.lam;
    let mut v = search.v;
    let mut rho = search.rayleigh;

    let measured = match probed {
        Some(m) => m,
        None => {
            let r2 = second_eigen_probe(mat, &v, 30, &mut rng, &mut rep);
            (rho - r2) / rho
        }
    };
    let gap_ok = measured >= g;
    if !gap_ok {
        rep.warn(format!("measured gap {measured:.3e} is below the gap lower bound {g:.3e}; gap likely overestimated"));
    }

    let budget = {
        let l = (d as f64 / g).ln();
        ((l * l).ceil() + (1.0 / cfg.epsilon).ln().ceil()) as u64
    };
    let cap = 10 * budget.max(1);
    let tol = cfg.epsilon.sqrt() * g / 2.0;
    let mut best_res = f64::INFINITY;
    let mut stalled = 0;
    let mut steps = 0u64;
    let mut certified = false;
    loop {
        let (r, h) = rayleigh(mat, &v, &mut rep);
        rho = r;
        if steps > 0 {
            rep.trace.push(rho);
        }
        let res = h.iter().zip(&v).map(|(a, b)| (a - rho * b).powi(2)).sum::<f64>().sqrt();
        log::debug!("eigen outer {steps}: rho {rho:.10e} residual {res:.3e}");
        if res <= tol * rho {
            certified = true;
            break;
        }
        if res < 0.999 * best_res {
            best_res = res;
            stalled = 0;
        } else {
            stalled += 1;
            if stalled >= 3 {
                rep.warn("Rayleigh quotient stagnated over 3 outer iterations; gap likely overestimated");
                break;
            }
        }
        if steps >= cap {
            rep.warn(format!("outer iteration budget {cap} exhausted"));
            break;
        }
        let l1 = cfg.lambda1.map_or(rho, |l| l.max(rho));
        match power_step(mat, lam, l1, g, &v, 0.01, cfg, &mut rng, &mut rep)? {
            Some(nv) => v = nv,
            None => {
                rep.warn("shifted solve failed during refinement");
                stalled += 1;
                if stalled >= 3 {
                    break;
                }
            }
        }
        steps += 1;
    }
    fix_sign(&mut v);
    normalize(&mut v);
    rep.converged = certified && gap_ok;
    rep.final_metric = rho;
    rep.wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok((v, rep))
}

/// `top_eigenvector` with every `B` solve accelerated.
pub fn top_eigenvector_accelerated(mat: &RowMatrix, cfg: &EigenConfig) -> Result<(Vec<f64>, SolveReport)> {
    let cfg = EigenConfig { accel: EigenAccel { enabled: true, ..cfg.accel.clone() }, ..cfg.clone() };
    top_eigenvector(mat, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{dense_spectrum, enumerate_paths, DenseOracle};

    fn diag(v: &[f64]) -> RowMatrix {
        let trip: Vec<_> = v.iter().enumerate().map(|(i, &x)| (i, i, x)).collect();
        RowMatrix::from_triplets(v.len(), v.len(), &trip).unwrap()
    }

    fn cfg(g: f64) -> EigenConfig {
        EigenConfig { gap_lower_bound: Some(g), ..Default::default() }
    }

    #[test]
    fn zero_matrix_system_is_scaled_identity() {
        let z = RowMatrix::from_triplets(2, 2, &[]).unwrap();
        let sys = ShiftedSystem::new(&z, 1.0, 0.5, 0.0).unwrap();
        let (x, rep) = solve_shifted_system(&sys, &[1.0, 0.0], &[0.0, 0.0], 0.5, &mut stream(0, 0)).unwrap();
        assert_eq!(x, vec![1.0, 0.0]);
        assert_eq!(rep.full_gradient_evals, 1);
    }

    #[test]
    fn two_by_two_against_dense_inverse() {
        let a = diag(&[2.0, 1.0]);
        let sys = ShiftedSystem::new(&a, 4.4, 0.75, 4.0).unwrap();
        let rhs = [0.3, -1.2];
        let (x, rep) = solve_shifted_system(&sys, &rhs, &[0.0, 0.0], 1e-3, &mut stream(1, 0)).unwrap();
        assert!(rep.converged);
        let xs = [0.3 / 0.4, -1.2 / 3.4];
        let bn = |v: [f64; 2]| (0.4 * v[0] * v[0] + 3.4 * v[1] * v[1]).sqrt();
        assert!(bn([x[0] - xs[0], x[1] - xs[1]]) <= 1e-3 * bn(xs));

        let (x, _) = solve_shifted_system(&sys, &[0.0, 0.0], &[0.0, 0.0], 0.5, &mut stream(1, 0)).unwrap();
        assert_eq!(x, vec![0.0, 0.0]);
        assert!(matches!(ShiftedSystem::new(&a, 3.9, 0.75, 4.0), Err(Error::NotPositiveDefinite(_))));
    }

    #[test]
    fn diagonal_top_eigenvector() {
        let a = diag(&[3.0, 1.0]);
        let (v, rep) = top_eigenvector(&a, &cfg(0.5)).unwrap();
        assert!(rep.converged, "{rep:?}");
        assert!((norm(&v) - 1.0).abs() < 1e-12 && v[0] > 0.0);
        assert!(9.0 * v[0] * v[0] + v[1] * v[1] >= 8.991);
        assert_eq!(rep.coordinate_touches, rep.estimator_touches + rep.full_gradient_touches + rep.dense_touches);
    }

    #[test]
    fn one_by_one() {
        let (v, rep) = top_eigenvector(&diag(&[-2.0]), &cfg(0.5)).unwrap();
        assert_eq!(v, vec![1.0]);
        assert!(rep.converged);
    }

    #[test]
    fn repeated_top_eigenvalue() {
        let a = diag(&[2.0, 2.0, 1.0]);
        let (v, rep) = top_eigenvector(&a, &cfg(0.3)).unwrap();
        let rq = 4.0 * (v[0] * v[0] + v[1] * v[1]) + v[2] * v[2];
        assert!(rq >= (1.0 - 1e-3) * 4.0);
        assert!(!rep.converged && rep.warnings.iter().any(|w| w.contains("gap")));
    }

    #[test]
    fn no_gap_warns() {
        let a = diag(&[1.5, 1.5, 1.5]);
        let s = lambda_shift_search(&a, 0.5, &cfg(0.5)).unwrap();
        assert!(s.lam > 2.25);
        let (_, rep) = top_eigenvector(&a, &cfg(0.5)).unwrap();
        assert!(!rep.converged && rep.warnings.iter().any(|w| w.contains("measured gap")));
    }

    #[test]
    fn no_gap_without_bound() {
        let (v, rep) = top_eigenvector(&diag(&[1.5, 1.5]), &EigenConfig::default()).unwrap();
        assert!(!rep.converged && (norm(&v) - 1.0).abs() < 1e-12);
        let (v, rep) = top_eigenvector(&diag(&[3.0, 1.0]), &EigenConfig::default()).unwrap();
        assert!(rep.converged && v[0] > 0.9999, "{rep:?}");
    }

    #[test]
    fn shift_search_window() {
        let a = diag(&[3.0, 1.0]);
        let g = 0.5;
        let s = lambda_shift_search(&a, g, &cfg(g)).unwrap();
        assert!(s.in_window);
        assert!(s.lam >= (1.0 + g / 150.0) * s.rayleigh && s.lam <= (1.0 + g / 100.0) * s.rayleigh);
        assert!(s.lam >= 9.0 * (1.0 + g / 150.0) * (1.0 - 1e-3) && s.lam <= 9.0 * (1.0 + g / 100.0));

        let known = EigenConfig { lambda1: Some(9.0), ..cfg(g) };
        let s = lambda_shift_search(&a, g, &known).unwrap();
        assert!(s.in_window && s.report.outer_iterations == 0);
        assert_eq!(s.lam, 9.0 * 1.005);
    }

    #[test]
    fn gamma_for_uniform_rows() {
        // λ₁ = 1, nnz = 4, sr = 4: √(2/4 · 4·(1 + 2)) = √6
        assert!((balancing_gamma(&RowMatrix::identity(4), 1.0) - 6f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn accelerated_matches_plain() {
        let a = diag(&[3.0, 1.0]);
        let (v, _) = top_eigenvector(&a, &cfg(0.5)).unwrap();
        let s = lambda_shift_search(&a, 0.5, &cfg(0.5)).unwrap();
        let mut c = cfg(0.5);
        c.accel.gamma_override = Some(2.0 * (s.lam - 9.0));
        let (va, rep) = top_eigenvector_accelerated(&a, &c).unwrap();
        assert!(rep.converged, "{rep:?}");
        assert!(v.iter().zip(&va).all(|(p, q)| (p - q).abs() < 1e-3));
    }

    #[test]
    fn dense_instance() {
        let a = RowMatrix::from_dense(
            &[vec![2.0, 0.5, 0.0, 0.1], vec![0.3, 1.0, 0.2, 0.0], vec![0.0, 0.1, 0.8, 0.4], vec![1.2, 0.0, 0.3, 0.5], vec![0.5, 0.2, 0.1, 0.9]],
            0.0,
        )
        .unwrap();
        let sp = dense_spectrum(&a).unwrap();
        for accel in [false, true] {
            let mut c = cfg(sp.gap / 2.0);
            c.accel.enabled = accel;
            c.seed = 3;
            let (v, rep) = top_eigenvector(&a, &c).unwrap();
            let rq: f64 = v.iter().zip(a.gram_mul(&v)).map(|(p, q)| p * q).sum();
            assert!(rep.converged && rq >= (1.0 - 1e-3) * sp.lambda1, "{rq} {} {rep:?}", sp.lambda1);
        }
    }

    fn b_estimator_instance() -> (RowMatrix, Vec<f64>) {
        let a = RowMatrix::from_dense(&[vec![1.0, 0.5, -0.25], vec![0.0, 2.0, 0.5], vec![0.75, 0.0, 1.0]], 0.0).unwrap();
        (a, vec![0.4, -1.0, 0.7])
    }

    #[test]
    fn b_estimator_unbiased_and_bounded() {
        let (a, x) = b_estimator_instance();
        let sp = dense_spectrum(&a).unwrap();
        let lam = 2.0 * sp.lambda1;
        let plan = SamplingPlan::new(&a, 1.0).unwrap();
        let outcomes = enumerate_paths(100_000, |src| {
            let mut out: Vec<f64> = x.iter().map(|v| lam * v).collect();
            plan.emit_samplemat(&x[..], -1.0, src, |j, v| out[j] += v);
            out
        })
        .unwrap();
        let hx = a.gram_mul(&x);
        let mut mean = [0.0; 3];
        let mut second = 0.0;
        for (p, v) in &outcomes {
            for j in 0..3 {
                mean[j] += p * v[j];
            }
            second += p * v.iter().map(|t| t * t).sum::<f64>();
        }
        for j in 0..3 {
            let target = lam * x[j] - hx[j];
            assert!((mean[j] - target).abs() <= 1e-10 * target.abs().max(1.0));
        }
        // here x* = 0, so f(x) − f(x*) = ½xᵀBx
        let o = DenseOracle::new(&a).unwrap();
        let fgap = 0.5 * (lam * x.iter().map(|t| t * t).sum::<f64>() - o.gram_norm_sq(&x));
        assert!(second <= fgap * 8.0 * plan.m_norm / sp.gap, "{second} vs {}", fgap * 8.0 * plan.m_norm / sp.gap);
    }
}
