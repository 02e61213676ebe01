//! Run configuration, command execution and report emission behind the
//! `nsls` binary. A run is reproducible from its `RunConfig` alone.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::eigensolver::{top_eigenvector, EigenAccel, EigenConfig};
use crate::error::{Error, Result};
use crate::generator::{generate, measure_family, planted_rhs, FamilySummary, GenSpec};
use crate::oracle::{self, enumerate_paths, EstimatorSpec};
use crate::regression::{mu_search, solve_regression, solve_regression_accelerated, AccelConfig, MuSearchConfig, RegressionConfig, RegressionProblem};
use crate::report::SolveReport;
use crate::rng::stream;
use crate::sampling::{samplevec, RowSampler};
use crate::sparse_matrix::{estimate_spectral, load_matrix_market, write_matrix_market, RowMatrix, SpectralStats, SparseRow};

pub const EXIT_OK: i32 = 0;
/// Non-convergence, or a failed lemma in `verify`.
pub const EXIT_NOT_CONVERGED: i32 = 2;
pub const EXIT_INPUT: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    SolveRegression,
    TopEigenvector,
    Gen,
    Stats,
    Verify,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Json,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSource {
    Path(PathBuf),
    Generated(GenSpec),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub epsilon: Option<f64>,
    pub seed: u64,
    pub accel: bool,
    pub k: Option<f64>,
    pub mu: Option<f64>,
    pub lambda1: Option<f64>,
    pub gap: Option<f64>,
    pub max_epochs: Option<u64>,
    /// Right-hand side as an `n × 1` Matrix Market file; a planted `A·x`
    /// from the seed otherwise.
    pub rhs: Option<PathBuf>,
    /// Test hook: shifts every samplevec draw in `verify` by this amount.
    pub inject_bias: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: Command,
    pub input: InputSource,
    #[serde(default)]
    pub options: SolverOptions,
    /// Report destination (`gen`: the `.mtx` file); stdout when absent.
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub format: Format,
}

impl RunConfig {
    pub fn new(command: Command, input: InputSource) -> Self {
        RunConfig { command, input, options: SolverOptions::default(), output: None, format: Format::Json }
    }
}

/// One lemma's verdict over every instance `verify` tried.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LemmaCheck {
    pub lemma: String,
    pub instances: usize,
    /// Largest relative error of the mean (enumerated) or the largest
    /// `mean_err / (3·stderr)` (Monte Carlo).
    pub worst_mean_err: f64,
    /// Largest `second moment / bound`.
    pub worst_bound_ratio: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunReport {
    pub command: Command,
    pub config: RunConfig,
    pub exit_code: i32,
    pub family: FamilySummary,
    pub spectral: Option<SpectralStats>,
    pub report: Option<SolveReport>,
    pub mu_used: Option<f64>,
    pub solution: Option<Vec<f64>>,
    pub lemmas: Vec<LemmaCheck>,
}

impl RunReport {
    /// Copy with timing zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> RunReport {
        let mut r = self.clone();
        if let Some(rep) = &mut r.report {
            rep.wall_time_ms = 0.0;
        }
        r
    }
}

pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Parse { .. } | Error::NonFinite { .. } | Error::Dimension(_) | Error::Io(_) => EXIT_INPUT,
        _ => EXIT_CONFIG,
    }
}

fn load_input(cfg: &RunConfig) -> Result<RowMatrix> {
    match &cfg.input {
        InputSource::Path(p) => load_matrix_market(p),
        InputSource::Generated(spec) => generate(spec),
    }
}

fn load_rhs(path: &Path, n: usize) -> Result<Vec<f64>> {
    let m = load_matrix_market(path)?;
    if m.n_cols != 1 || m.n_rows != n {
        return Err(Error::Dimension(format!("rhs is {}×{}, expected {n}×1", m.n_rows, m.n_cols)));
    }
    Ok(m.rows.iter().map(|r| r.values.first().copied().unwrap_or(0.0)).collect())
}

/// `λ_d(AᵀA)` from the user, the dense oracle, or the geometric search.
fn resolve_mu(mat: &RowMatrix, opts: &SolverOptions) -> Result<f64> {
    if let Some(mu) = opts.mu {
        return Ok(mu);
    }
    match oracle::DenseOracle::new(mat) {
        Ok(o) => {
            let sp = o.spectrum();
            if sp.lambda_min > 1e-12 * sp.lambda1 {
                Ok(sp.lambda_min)
            } else {
                Err(Error::Singular(format!("matrix is singular to working precision (lambda_min = {:e})", sp.lambda_min)))
            }
        }
        Err(Error::OracleLimit { .. }) => mu_search(mat, &MuSearchConfig { seed: opts.seed, ..Default::default() }),
        Err(e) => Err(e),
    }
}

/// Executes `cfg` without writing anything.
pub fn run(cfg: &RunConfig) -> Result<RunReport> {
    let opts = &cfg.options;
    if let Some(e) = opts.epsilon {
        if !(e > 0.0 && e < 1.0) {
            return Err(Error::config(format!("epsilon must lie in (0, 1), got {e}")));
        }
    }
    let mat = load_input(cfg)?;
    let mut out = RunReport {
        command: cfg.command,
        config: cfg.clone(),
        exit_code: EXIT_OK,
        family: measure_family(&mat),
        spectral: None,
        report: None,
        mu_used: None,
        solution: None,
        lemmas: Vec::new(),
    };
    match cfg.command {
        Command::SolveRegression => {
            let b = match &opts.rhs {
                Some(p) => load_rhs(p, mat.n_rows)?,
                None => planted_rhs(&mat, opts.seed, 0.0),
            };
            let mu = resolve_mu(&mat, opts)?;
            let rc = RegressionConfig {
                epsilon: opts.epsilon.unwrap_or(1e-6),
                k_override: opts.k,
                lambda1: opts.lambda1,
                seed: opts.seed,
                max_epochs: opts.max_epochs.unwrap_or(500),
                accel: AccelConfig { enabled: opts.accel, ..Default::default() },
                ..Default::default()
            };
            let prob = RegressionProblem::new(&mat, &b, mu);
            let (x, rep) = if opts.accel { solve_regression_accelerated(&prob, &rc)? } else { solve_regression(&prob, &rc)? };
            out.exit_code = if rep.converged { EXIT_OK } else { EXIT_NOT_CONVERGED };
            out.mu_used = Some(mu);
            out.report = Some(rep);
            out.solution = Some(x);
        }
        Command::TopEigenvector => {
            let ec = EigenConfig {
                epsilon: opts.epsilon.unwrap_or(1e-3),
                gap_lower_bound: opts.gap,
                lambda1: opts.lambda1,
                seed: opts.seed,
                max_epochs: opts.max_epochs.unwrap_or(200),
                accel: EigenAccel { enabled: opts.accel, ..Default::default() },
                ..Default::default()
            };
            let (v, rep) = top_eigenvector(&mat, &ec)?;
            out.exit_code = if rep.converged { EXIT_OK } else { EXIT_NOT_CONVERGED };
            out.report = Some(rep);
            out.solution = Some(v);
        }
        Command::Gen => {
            if !matches!(cfg.input, InputSource::Generated(_)) {
                return Err(Error::config("gen needs a generator spec, not an input file"));
            }
        }
        Command::Stats => {
            out.spectral = Some(estimate_spectral(&mat, 100, opts.seed)?);
        }
        Command::Verify => {
            out.lemmas = verify_matrix(&mat, opts.seed, opts.inject_bias.unwrap_or(0.0))?;
            if out.lemmas.iter().any(|l| !l.pass) {
                out.exit_code = EXIT_NOT_CONVERGED;
            }
        }
    }
    if cfg.command == Command::Gen {
        let path = cfg.output.as_ref().ok_or_else(|| Error::config("gen needs an output path"))?;
        write_matrix_market(&mat, path)?;
    }
    Ok(out)
}

const ENUM_BUDGET: usize = 200_000;
const MC_DRAWS: usize = 20_000;
const VERIFY_ROWS: usize = 32;

struct Tally {
    name: &'static str,
    instances: usize,
    worst_mean: f64,
    worst_ratio: f64,
    pass: bool,
}

impl Tally {
    fn new(name: &'static str) -> Self {
        Tally { name, instances: 0, worst_mean: 0.0, worst_ratio: 0.0, pass: true }
    }

    fn exact(&mut self, mean_rel_err: f64, second: f64, bound: f64) {
        self.instances += 1;
        self.worst_mean = self.worst_mean.max(mean_rel_err);
        let ratio = if bound > 0.0 { second / bound } else if second > 0.0 { f64::INFINITY } else { 0.0 };
        self.worst_ratio = self.worst_ratio.max(ratio);
        self.pass &= mean_rel_err <= 1e-10 && second <= bound * (1.0 + 1e-12) + 1e-300;
    }

    fn statistical(&mut self, m: &oracle::MomentReport) {
        self.instances += 1;
        let spread = 3.0 * m.mean_stderr;
        self.worst_mean = self.worst_mean.max(if spread > 0.0 { m.mean_err / spread } else { m.mean_err });
        self.worst_ratio = self.worst_ratio.max(if m.bound > 0.0 { m.second_moment / m.bound } else { 0.0 });
        self.pass &= m.pass;
    }

    fn finish(self) -> LemmaCheck {
        LemmaCheck {
            lemma: self.name.to_string(),
            instances: self.instances,
            worst_mean_err: self.worst_mean,
            worst_bound_ratio: self.worst_ratio,
            pass: self.pass,
        }
    }
}

fn rel_err(mean: &[f64], target: &[f64]) -> f64 {
    let num: f64 = mean.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let den: f64 = target.iter().map(|v| v * v).sum::<f64>().sqrt();
    if den > 0.0 { num / den } else { num }
}

/// Samplevec check with an optional additive bias per draw.
fn check_vec(row: &SparseRow, d: usize, c: usize, bias: f64, rng: &mut crate::rng::SolverRng, t: &mut Tally) -> Result<()> {
    let s = RowSampler::new(row, 0, c);
    let est = |src: &mut dyn crate::sampling::DrawSource| {
        let mut v = vec![0.0; d];
        for (j, x) in samplevec(&s, src) {
            v[j] += x + bias;
        }
        v
    };
    let target = row.to_dense(d);
    let bound = oracle::bound_vec(row, c);
    match enumerate_paths(ENUM_BUDGET, |src| est(src)) {
        Ok(paths) => {
            let mut mean = vec![0.0; d];
            let mut second = 0.0;
            for (p, v) in &paths {
                mean.iter_mut().zip(v).for_each(|(m, x)| *m += p * x);
                second += p * v.iter().map(|x| x * x).sum::<f64>();
            }
            t.exact(rel_err(&mean, &target), second, bound);
        }
        Err(Error::EnumerationBudget { .. }) => {
            t.statistical(&oracle::monte_carlo_moments(|r| est(r), &target, bound, MC_DRAWS, rng));
        }
        Err(e) => return Err(e),
    }
    Ok(())
}

/// Unbiasedness and second-moment bounds of all four estimators plus the
/// tail bound, on the rows of `mat` (first 32 nonempty rows).
pub fn verify_matrix(mat: &RowMatrix, seed: u64, bias: f64) -> Result<Vec<LemmaCheck>> {
    let d = mat.n_cols;
    let mut rng = stream(seed, 6);
    let x: Vec<f64> = (0..d).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let mut tails = Tally::new("tail_bound");
    let mut vec_t = Tally::new("samplevec");
    let mut dot_t = Tally::new("sampledotproduct");
    let mut r1_t = Tally::new("samplerankonemat");
    let mut mat_t = Tally::new("samplemat");
    for row in mat.rows.iter().filter(|r| !r.is_empty()).take(VERIFY_ROWS) {
        for c in 1..=row.nnz() {
            tails.instances += 1;
            let lhs = oracle::tail_l2sq(row, c);
            let rhs = row.num_sparsity / c as f64 * row.l2sq;
            tails.worst_ratio = tails.worst_ratio.max(if rhs > 0.0 { lhs / rhs } else { 0.0 });
            tails.pass &= lhs <= rhs * (1.0 + 1e-12);
        }
        for c in 1..=row.nnz().min(3) {
            check_vec(row, d, c, bias, &mut rng, &mut vec_t)?;
            for (spec, t) in [
                (EstimatorSpec::Dot { row, c, x: &x }, &mut dot_t),
                (EstimatorSpec::RankOne { row, c, x: &x }, &mut r1_t),
            ] {
                check_spec(&spec, &mut rng, t)?;
            }
        }
    }
    for k in [0.5, 1.0, 2.0] {
        check_spec(&EstimatorSpec::Mat { mat, k, x: &x }, &mut rng, &mut mat_t)?;
    }
    Ok(vec![tails.finish(), vec_t.finish(), dot_t.finish(), r1_t.finish(), mat_t.finish()])
}

fn check_spec(spec: &EstimatorSpec<'_>, rng: &mut crate::rng::SolverRng, t: &mut Tally) -> Result<()> {
    match oracle::enumerate_estimator(spec, ENUM_BUDGET) {
        Ok(e) => t.exact(e.mean_rel_err(), e.second_moment, e.bound),
        Err(Error::EnumerationBudget { .. }) => {
            let m = match *spec {
                EstimatorSpec::Dot { row, c, x } => {
                    let s = RowSampler::new(row, 0, c);
                    let target = [row.dot(x)];
                    oracle::monte_carlo_moments(|r| vec![crate::sampling::sampledotproduct(&s, x, r)], &target, oracle::bound_dot(row, c, x), MC_DRAWS, rng)
                }
                EstimatorSpec::RankOne { row, c, x } => {
                    let s = RowSampler::new(row, 0, c);
                    let dot = row.dot(x);
                    let target: Vec<f64> = row.to_dense(x.len()).iter().map(|v| v * dot).collect();
                    let b = oracle::bound_rank_one(row, c, x);
                    oracle::monte_carlo_moments(|r| crate::sampling::samplerankonemat(&s, x, r).to_dense(x.len()), &target, b, MC_DRAWS, rng)
                }
                EstimatorSpec::Mat { mat, k, x } => {
                    let plan = crate::sampling::SamplingPlan::new(mat, k)?;
                    let b = oracle::bound_mat(mat, k, x);
                    oracle::monte_carlo_moments(|r| crate::sampling::samplemat(&plan, x, r).to_dense(x.len()), &mat.gram_mul(x), b, MC_DRAWS, rng)
                }
                EstimatorSpec::Vec { .. } => unreachable!("samplevec is checked separately"),
            };
            t.statistical(&m);
        }
        Err(e) => return Err(e),
    }
    Ok(())
}

#[derive(Serialize)]
struct CsvRow<'a> {
    command: Command,
    exit_code: i32,
    n: usize,
    d: usize,
    nnz: usize,
    mean_s: f64,
    converged: Option<bool>,
    epochs: Option<u64>,
    inner_steps: Option<u64>,
    outer_iterations: Option<u64>,
    coordinate_touches: Option<u64>,
    estimator_touches: Option<u64>,
    full_gradient_touches: Option<u64>,
    dense_touches: Option<u64>,
    full_gradient_evals: Option<u64>,
    metric: Option<&'a str>,
    final_metric: Option<f64>,
    wall_time_ms: Option<f64>,
    warnings: String,
}

#[derive(Serialize)]
struct LemmaRow<'a> {
    lemma: &'a str,
    instances: usize,
    worst_mean_err: f64,
    worst_bound_ratio: f64,
    pass: bool,
}

/// Serializes `rep` in the configured format.
pub fn render(rep: &RunReport, format: Format) -> Result<Vec<u8>> {
    match format {
        Format::Json => {
            let mut v = serde_json::to_vec_pretty(rep).map_err(|e| Error::config(e.to_string()))?;
            v.push(b'\n');
            Ok(v)
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let csv_err = |e: csv::Error| Error::config(e.to_string());
            if rep.command == Command::Verify {
                for l in &rep.lemmas {
                    w.serialize(LemmaRow {
                        lemma: &l.lemma,
                        instances: l.instances,
                        worst_mean_err: l.worst_mean_err,
                        worst_bound_ratio: l.worst_bound_ratio,
                        pass: l.pass,
                    })
                    .map_err(csv_err)?;
                }
            } else {
                let r = rep.report.as_ref();
                w.serialize(CsvRow {
                    command: rep.command,
                    exit_code: rep.exit_code,
                    n: rep.family.n,
                    d: rep.family.d,
                    nnz: rep.family.nnz,
                    mean_s: rep.family.mean_s,
                    converged: r.map(|r| r.converged),
                    epochs: r.map(|r| r.epochs),
                    inner_steps: r.map(|r| r.inner_steps),
                    outer_iterations: r.map(|r| r.outer_iterations),
                    coordinate_touches: r.map(|r| r.coordinate_touches),
                    estimator_touches: r.map(|r| r.estimator_touches),
                    full_gradient_touches: r.map(|r| r.full_gradient_touches),
                    dense_touches: r.map(|r| r.dense_touches),
                    full_gradient_evals: r.map(|r| r.full_gradient_evals),
                    metric: r.map(|r| r.metric.as_str()),
                    final_metric: r.map(|r| r.final_metric),
                    wall_time_ms: r.map(|r| r.wall_time_ms),
                    warnings: r.map(|r| r.warnings.join("; ")).unwrap_or_default(),
                })
                .map_err(csv_err)?;
            }
            w.into_inner().map_err(|e| Error::config(e.to_string()))
        }
    }
}

/// Runs `cfg`, writes the report, and returns the process exit code.
/// Errors go to `err` and produce no report.
pub fn execute(cfg: &RunConfig, stdout: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let rep = match run(cfg) {
        Ok(r) => r,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return exit_code_for(&e);
        }
    };
    if rep.command == Command::Verify {
        for l in &rep.lemmas {
            let _ = writeln!(
                err,
                "{:<18} {} instances={} worst_mean_err={:.3e} worst_bound_ratio={:.4}",
                l.lemma,
                if l.pass { "PASS" } else { "FAIL" },
                l.instances,
                l.worst_mean_err,
                l.worst_bound_ratio
            );
        }
    }
    let bytes = match render(&rep, cfg.format) {
        Ok(b) => b,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return exit_code_for(&e);
        }
    };
    let dest = if cfg.command == Command::Gen { None } else { cfg.output.as_ref() };
    let written = match dest {
        Some(p) => std::fs::write(p, &bytes).map_err(Error::from),
        None => stdout.write_all(&bytes).map_err(Error::from),
    };
    if let Err(e) = written {
        let _ = writeln!(err, "error: {e}");
        return exit_code_for(&e);
    }
    if let Some(r) = &rep.report {
        for w in &r.warnings {
            let _ = writeln!(err, "warning: {w}");
        }
    }
    rep.exit_code
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gen_cfg(cmd: Command) -> RunConfig {
        RunConfig::new(cmd, InputSource::Generated(GenSpec::new(24, 6, 2.0, 1)))
    }

    #[test]
    fn config_round_trips() {
        let mut c = gen_cfg(Command::SolveRegression);
        c.options.accel = true;
        c.options.epsilon = Some(1e-4);
        c.format = Format::Csv;
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"solve-regression\""));
        assert_eq!(serde_json::from_str::<RunConfig>(&s).unwrap(), c);
    }

    #[test]
    fn regression_is_deterministic() {
        let c = gen_cfg(Command::SolveRegression);
        let a = run(&c).unwrap();
        let b = run(&c).unwrap();
        assert_eq!(a.exit_code, EXIT_OK);
        assert_eq!(a.without_timing(), b.without_timing());
    }

    #[test]
    fn verify_passes_and_detects_bias() {
        let mut c = gen_cfg(Command::Verify);
        assert!(run(&c).unwrap().lemmas.iter().all(|l| l.pass));
        c.options.inject_bias = Some(0.05);
        let r = run(&c).unwrap();
        assert_eq!(r.exit_code, EXIT_NOT_CONVERGED);
        assert!(!r.lemmas.iter().find(|l| l.lemma == "samplevec").unwrap().pass);
    }

    #[test]
    fn one_sparse_rows_verify_trivially() {
        let m = RowMatrix::from_dense(&[vec![2.0, 0.0], vec![0.0, -1.0], vec![0.5, 0.0]], 0.0).unwrap();
        let l = verify_matrix(&m, 0, 0.0).unwrap();
        assert!(l.iter().all(|l| l.pass && l.worst_mean_err <= 1e-12));
    }

    #[test]
    fn csv_has_header_and_row() {
        let r = run(&gen_cfg(Command::SolveRegression)).unwrap();
        let text = String::from_utf8(render(&r, Format::Csv).unwrap()).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("command,exit_code,n,d"));
    }

    #[test]
    fn error_codes() {
        assert_eq!(exit_code_for(&Error::Parse { line: 1, msg: String::new() }), EXIT_INPUT);
        assert_eq!(exit_code_for(&Error::Config(String::new())), EXIT_CONFIG);
        let mut c = gen_cfg(Command::SolveRegression);
        c.options.epsilon = Some(2.0);
        assert_eq!(execute(&c, &mut Vec::new(), &mut Vec::new()), EXIT_CONFIG);
    }
}
