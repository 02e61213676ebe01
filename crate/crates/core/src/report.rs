use serde::Serialize;

/// Convergence trace and cost accounting shared by every solver.
///
/// `coordinate_touches = estimator_touches + full_gradient_touches +
/// dense_touches`.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SolveReport {
    pub converged: bool,
    pub epochs: u64,
    pub inner_steps: u64,
    pub outer_iterations: u64,
    pub coordinate_touches: u64,
    /// Sum of per-step estimator touch counts.
    pub estimator_touches: u64,
    /// Two touches per nonzero per full gradient or `AᵀA` product.
    pub full_gradient_touches: u64,
    /// O(d) work: anchors, averages, renormalizations.
    pub dense_touches: u64,
    pub full_gradient_evals: u64,
    /// Name of `final_metric`, e.g. `ata_norm_ratio` or `rayleigh_quotient`.
    pub metric: String,
    pub final_metric: f64,
    /// Metric after each epoch or outer iteration.
    pub trace: Vec<f64>,
    pub warnings: Vec<String>,
    pub wall_time_ms: f64,
}

impl SolveReport {
    pub fn new(metric: &str) -> Self {
        SolveReport { metric: metric.to_string(), ..Default::default() }
    }

    pub fn add_estimator(&mut self, t: u64) {
        self.estimator_touches += t;
        self.coordinate_touches += t;
    }

    pub fn add_full_gradient(&mut self, t: u64) {
        self.full_gradient_evals += 1;
        self.full_gradient_touches += t;
        self.coordinate_touches += t;
    }

    pub fn add_dense(&mut self, t: u64) {
        self.dense_touches += t;
        self.coordinate_touches += t;
    }

    /// Folds the cost of a nested solve into this one.
    pub fn absorb(&mut self, inner: &SolveReport) {
        self.epochs += inner.epochs;
        self.inner_steps += inner.inner_steps;
        self.coordinate_touches += inner.coordinate_touches;
        self.estimator_touches += inner.estimator_touches;
        self.full_gradient_touches += inner.full_gradient_touches;
        self.dense_touches += inner.dense_touches;
        self.full_gradient_evals += inner.full_gradient_evals;
        for w in &inner.warnings {
            self.warn(w.clone());
        }
    }

    /// Records a warning once.
    pub fn warn(&mut self, msg: impl Into<String>) {
        let msg = msg.into();
        if !self.warnings.contains(&msg) {
            log::warn!("{msg}");
            self.warnings.push(msg);
        }
    }
}
