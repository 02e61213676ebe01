//! Least squares `min ½‖Ax − b‖²` by SVRG with the sampled `AᵀAx` estimator,
//! plus the approximate-proximal-point (catalyst) accelerated variant.

use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::report::SolveReport;
use crate::rng::{stream, SolverRng};
use crate::sampling::SamplingPlan;
use crate::sparse_matrix::{augment_ridge, norm, normalize, RowMatrix};
use crate::svrg_core::{derive_params, run_epoch_with_gradient, solve_constant_factor, Objective, ParamOverrides, QuadObjective};

pub struct RegressionProblem<'a> {
    pub mat: &'a RowMatrix,
    pub b: &'a [f64],
    /// `λ_d(AᵀA)`, or a lower estimate of it.
    pub mu: f64,
    pub x_init: Vec<f64>,
}

impl<'a> RegressionProblem<'a> {
    pub fn new(mat: &'a RowMatrix, b: &'a [f64], mu: f64) -> Self {
        RegressionProblem { mat, b, mu, x_init: vec![0.0; mat.n_cols] }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AccelConfig {
    pub enabled: bool,
    pub lam_override: Option<f64>,
    pub max_outer: u64,
}

impl Default for AccelConfig {
    fn default() -> Self {
        AccelConfig { enabled: false, lam_override: None, max_outer: 100_000 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RegressionConfig {
    /// Target for `‖x − x*‖_{AᵀA} / ‖x_init − x*‖_{AᵀA}`.
    pub epsilon: f64,
    pub k_override: Option<f64>,
    /// Upper bound on `λ₁(AᵀA)` for the stopping certificate; `‖A‖_F²` if unset.
    pub lambda1: Option<f64>,
    pub seed: u64,
    pub max_epochs: u64,
    pub overrides: ParamOverrides,
    pub accel: AccelConfig,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        RegressionConfig {
            epsilon: 1e-6,
            k_override: None,
            lambda1: None,
            seed: 0,
            max_epochs: 500,
            overrides: ParamOverrides::default(),
            accel: AccelConfig::default(),
        }
    }
}

fn check_problem(prob: &RegressionProblem<'_>, cfg: &RegressionConfig) -> Result<()> {
    if !(prob.mu > 0.0) {
        return Err(Error::NotStronglyConvex(prob.mu));
    }
    if !(cfg.epsilon > 0.0 && cfg.epsilon < 1.0) {
        return Err(Error::config(format!("epsilon must lie in (0, 1), got {}", cfg.epsilon)));
    }
    if prob.b.len() != prob.mat.n_rows || prob.x_init.len() != prob.mat.n_cols {
        return Err(Error::dim("b or x_init has the wrong length"));
    }
    if prob.mat.frob_sq == 0.0 {
        return Err(Error::ZeroMatrix);
    }
    Ok(())
}

/// Sampling plan with `k = √κ`, or every row exact when `κ > d²`.
pub fn regression_plan(mat: &RowMatrix, mu: f64, k_override: Option<f64>, rep: &mut SolveReport) -> Result<SamplingPlan> {
    let kappa = mat.frob_sq / mu;
    let d = mat.n_cols as f64;
    let mut plan = match k_override {
        Some(k) => SamplingPlan::new(mat, k)?,
        None if kappa > d * d => {
            rep.warn(format!("kappa {kappa:.3e} exceeds d^2 = {}; sampling every row exactly", d * d));
            SamplingPlan::exact(mat)?
        }
        None => SamplingPlan::new(mat, kappa.sqrt())?,
    };
    plan.sigma_sq = 2.0 * plan.m_norm;
    Ok(plan)
}

/// Certified SVRG: stops once `‖∇f(x)‖/‖∇f(x_init)‖ ≤ ε·√(μ/λ₁_ub)`, which
/// bounds the `AᵀA`-norm error ratio by `ε`.
pub fn solve_regression(prob: &RegressionProblem<'_>, cfg: &RegressionConfig) -> Result<(Vec<f64>, SolveReport)> {
    check_problem(prob, cfg)?;
    let start = Instant::now();
    let mut rep = SolveReport::new("ata_norm_ratio_bound");
    let mat = prob.mat;
    let plan = regression_plan(mat, prob.mu, cfg.k_override, &mut rep)?;
    let params = derive_params(plan.sigma_sq, prob.mu, &cfg.overrides)?;
    let obj = QuadObjective { mat, plan: &plan, shift: 0.0, sign: 1.0, rhs: mat.tmul_vec(prob.b) };
    let lam1 = cfg.lambda1.unwrap_or(mat.frob_sq);
    let cert = (lam1 / prob.mu).sqrt();
    let mut rng = stream(cfg.seed, 1);
    let (x, inner) =
        solve_constant_factor(&obj, &params, &prob.x_init, (cfg.epsilon / cert).min(1.0), cfg.max_epochs, |_, g| norm(g), &mut rng)?;
    rep.absorb(&inner);
    rep.converged = inner.converged;
    rep.trace = inner.trace.iter().map(|r| (r * cert).min(1.0)).collect();
    rep.final_metric = (inner.final_metric * cert).min(1.0);
    rep.wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok((x, rep))
}

/// `(‖A‖_F/nnz(A) · Σ‖a_i‖²√s_i)^{2/3}`.
pub fn balancing_lambda(mat: &RowMatrix) -> f64 {
    let sum: f64 = mat.rows.iter().map(|r| r.l2sq * r.num_sparsity.sqrt()).sum();
    (mat.frob_sq.sqrt() / mat.nnz() as f64 * sum).powf(2.0 / 3.0)
}

/// Catalyst outer loop over ridge-augmented subproblems
/// `min ½‖Ax − b‖² + (λ/2)‖x − y‖²`, each solved to relative function
/// accuracy `1/c` with `c = 4((2λ + μ)/μ)^{3/2}`.
pub fn solve_regression_accelerated(prob: &RegressionProblem<'_>, cfg: &RegressionConfig) -> Result<(Vec<f64>, SolveReport)> {
    check_problem(prob, cfg)?;
    let start = Instant::now();
    let mat = prob.mat;
    let mu = prob.mu;
    let d = mat.n_cols;
    let mut rep = SolveReport::new("ata_norm_ratio_bound");

    let lam = match cfg.accel.lam_override {
        Some(l) => l,
        None => {
            let l = balancing_lambda(mat);
            let cap = (mat.frob_sq / d as f64).sqrt();
            if l * l > mat.frob_sq / d as f64 {
                rep.warn(format!("balancing lambda {l:.4e} clamped to sqrt(||A||_F^2/d) = {cap:.4e}"));
                cap
            } else {
                l
            }
        }
    };
    if !(lam >= 2.0 * mu) {
        rep.warn(format!("lambda {lam:.4e} < 2 mu = {:.4e}; acceleration not beneficial, solving unaccelerated", 2.0 * mu));
        let (x, inner) = solve_regression(prob, cfg)?;
        let warnings = std::mem::take(&mut rep.warnings);
        rep = inner;
        for w in warnings.into_iter().rev() {
            rep.warnings.insert(0, w);
        }
        rep.wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
        return Ok((x, rep));
    }

    // Ãᵀb̃ for center y is Aᵀb + λy, so only the matrix is kept
    let (aug, _) = augment_ridge(mat, prob.b, lam, &prob.x_init)?;
    let mu_sub = mu + lam;
    let plan = regression_plan(&aug, mu_sub, cfg.k_override, &mut rep)?;
    let params = derive_params(plan.sigma_sq, mu_sub, &cfg.overrides)?;
    let c_acc = 4.0 * ((2.0 * lam + mu) / mu).powf(1.5);
    let lam1 = cfg.lambda1.unwrap_or(mat.frob_sq);
    // h(x) − h* ≤ ‖∇h(x)‖²/(2μ_sub) and h(y) − h* ≥ ‖∇h(y)‖²/(2L_sub)
    let sub_target = (mu_sub / (lam1 + lam) / c_acc).sqrt();
    let cert = (lam1 / mu).sqrt();
    let atb = mat.tmul_vec(prob.b);
    let mut rng = stream(cfg.seed, 2);

    let q = mu / (mu + lam);
    let beta = (1.0 - q.sqrt()) / (1.0 + q.sqrt());
    let mut x = prob.x_init.clone();
    let mut y = x.clone();
    let grad_f = |z: &[f64]| -> Vec<f64> { mat.gram_mul(z).iter().zip(&atb).map(|(a, b)| a - b).collect() };
    let g0 = norm(&grad_f(&x));
    rep.add_full_gradient(2 * mat.nnz() as u64);
    if g0 == 0.0 {
        rep.converged = true;
        rep.final_metric = 0.0;
        rep.wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
        return Ok((x, rep));
    }
    loop {
        // the prox center's gradient doubles as the stopping check when y = x
        let gy = grad_f(&y);
        rep.add_full_gradient(2 * mat.nnz() as u64);
        let rhs: Vec<f64> = (0..d).map(|j| atb[j] + lam * y[j]).collect();
        let obj = QuadObjective { mat: &aug, plan: &plan, shift: 0.0, sign: 1.0, rhs };
        let (x_new, inner) = solve_sub(&obj, &params, &x, norm(&gy) * sub_target, cfg.max_epochs, &mut rng)?;
        rep.absorb(&inner);
        rep.outer_iterations += 1;
        if !inner.converged {
            rep.warn("subproblem missed its accuracy target");
        }
        let gx = norm(&grad_f(&x_new));
        rep.add_full_gradient(2 * mat.nnz() as u64);
        let ratio = gx / g0;
        rep.trace.push((ratio * cert).min(1.0));
        rep.final_metric = (ratio * cert).min(1.0);
        if !ratio.is_finite() || ratio > 1e8 {
            rep.warn("accelerated outer loop diverged");
            break;
        }
        for j in 0..d {
            y[j] = x_new[j] + beta * (x_new[j] - x[j]);
        }
        x = x_new;
        if ratio * cert <= cfg.epsilon {
            rep.converged = true;
            break;
        }
        if rep.outer_iterations >= cfg.accel.max_outer {
            rep.warn(format!("outer iteration budget {} exhausted", cfg.accel.max_outer));
            break;
        }
    }
    rep.wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok((x, rep))
}

/// Runs epochs from `x0` until `‖∇h(x)‖ ≤ abs_target`.
pub(crate) fn solve_sub(
    obj: &QuadObjective<'_>,
    params: &crate::svrg_core::SvrgParams,
    x0: &[f64],
    abs_target: f64,
    max_epochs: u64,
    rng: &mut SolverRng,
) -> Result<(Vec<f64>, SolveReport)> {
    let mut rep = SolveReport::new("gradient_norm");
    let mut x = x0.to_vec();
    loop {
        let (g, t) = obj.gradient(&x);
        rep.add_full_gradient(t);
        let gn = norm(&g);
        rep.final_metric = gn;
        if gn <= abs_target {
            rep.converged = true;
            return Ok((x, rep));
        }
        if rep.epochs >= max_epochs || !gn.is_finite() {
            return Ok((x, rep));
        }
        let ep = run_epoch_with_gradient(obj, &x, &g, params, rng)?;
        rep.epochs += 1;
        rep.inner_steps += ep.steps;
        rep.add_estimator(ep.touches);
        rep.add_dense(ep.dense_touches);
        x = ep.output;
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MuSearchConfig {
    pub mu_hi: Option<f64>,
    pub mu_lo: Option<f64>,
    pub seed: u64,
    /// Total inner steps across all probes.
    pub step_budget: u64,
}

impl Default for MuSearchConfig {
    fn default() -> Self {
        MuSearchConfig { mu_hi: None, mu_lo: None, seed: 0, step_budget: 50_000_000 }
    }
}

/// Geometric search for `λ_d(AᵀA)`: candidate `μ_c` is accepted when an
/// epoch configured for it shrinks the `b = 0` probe iterate by at least
/// `(1 − e⁻⁴)/4`, the averaged decay predicted when the true `μ` is `μ_c/2`.
/// Returns the largest accepted candidate.
pub fn mu_search(mat: &RowMatrix, cfg: &MuSearchConfig) -> Result<f64> {
    if mat.frob_sq == 0.0 {
        return Err(Error::ZeroMatrix);
    }
    let hi = cfg.mu_hi.unwrap_or(mat.frob_sq);
    let lo = cfg.mu_lo.unwrap_or(hi * 1e-12);
    let accept = (1.0 - (-4.0f64).exp()) / 4.0;
    let mut rng = stream(cfg.seed, 3);
    let zero = vec![0.0; mat.n_cols];
    let mut used = 0u64;
    let mut mu_c = hi;
    let mut scratch = SolveReport::default();
    while mu_c >= lo {
        let plan = regression_plan(mat, mu_c, None, &mut scratch)?;
        let params = derive_params(plan.sigma_sq, mu_c, &ParamOverrides::default())?;
        if used + 3 * params.m > cfg.step_budget {
            break;
        }
        let obj = QuadObjective { mat, plan: &plan, shift: 0.0, sign: 1.0, rhs: zero.clone() };
        let mut x: Vec<f64> = {
            use rand::Rng;
            (0..mat.n_cols).map(|_| rng.random::<f64>() - 0.5).collect()
        };
        normalize(&mut x);
        let mut ratio = 1.0;
        let mut ok = true;
        for _ in 0..3 {
            let (g, _) = obj.gradient(&x);
            match run_epoch_with_gradient(&obj, &x, &g, &params, &mut rng) {
                Ok(ep) => {
                    used += ep.steps;
                    x = ep.output;
                    ratio = normalize(&mut x);
                }
                Err(Error::Diverged { .. }) => {
                    ok = false;
                    break;
                }
                Err(e) => return Err(e),
            }
            if ratio == 0.0 {
                break;
            }
        }
        log::debug!("mu_search: candidate {mu_c:.4e} ratio {ratio:.4}");
        if ok && ratio <= accept {
            return Ok(mu_c);
        }
        mu_c /= 2.0;
    }
    Err(Error::Singular("matrix appears singular: no strong-convexity candidate accepted".into()))
}
