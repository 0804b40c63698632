//! Central finite-difference checks for reverse-mode gradients.
//!
//! The numeric side only ever evaluates the forward pass, so it stays
//! independent of every VJP it is used to verify.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::Tensor;
use super::NumericsError;

/// Default perturbation for 64-bit checks.
pub const FD_STEP: f64 = 1e-4;

/// Absolute floor of the relative-error denominator, so gradients that are
/// zero up to rounding compare on an absolute scale.
pub const FD_FLOOR: f64 = 1e-3;

/// `|a − n| / max(|a|, |n|, FD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
}

impl GradCheckReport {
    fn new() -> Self {
        GradCheckReport {
            max_rel_error: 0.0,
            worst: String::new(),
            checked: 0,
        }
    }

    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = self.max_rel_error.max(e);
            self.worst = format!("{} (analytic {analytic:.3e}, numeric {numeric:.3e})", label());
        }
    }

    fn merge(&mut self, other: GradCheckReport) {
        if other.max_rel_error >= self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.checked += other.checked;
    }
}

/// Checks `d f / d inputs` for a scalar function built on a fresh graph.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], f: F) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, NumericsError>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64, NumericsError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.input(x.clone())).collect();
        let root = f(&mut g, &vars)?;
        g.value(root).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.input(x.clone())).collect();
    let root = f(&mut g, &vars)?;
    let grads = g.backward(root)?;

    let mut report = GradCheckReport::new();
    let mut work = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        for i in 0..work[k].numel() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + FD_STEP;
            let up = eval(&work)?;
            work[k].data_mut()[i] = orig - FD_STEP;
            let down = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            report.record(|| format!("input {k}[{i}]"), analytic.data()[i], numeric);
        }
    }
    Ok(report)
}

/// Checks `d f / d params` for every parameter in `store`.
pub fn check_params<F>(store: &ParamStore<f64>, f: F) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var, NumericsError>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64, NumericsError> {
        let mut g = Graph::new();
        let root = f(&mut g, s)?;
        g.value(root).item()
    };

    let mut base = store.clone();
    base.zero_grad();
    let mut g = Graph::new();
    let root = f(&mut g, &base)?;
    g.backward_into(root, &mut base)?;

    let mut report = GradCheckReport::new();
    let names: Vec<String> = base.names().map(str::to_string).collect();
    let mut work = store.clone();
    for name in &names {
        let analytic = base.grad(name)?.clone();
        let mut sub = GradCheckReport::new();
        for i in 0..analytic.numel() {
            let orig = work.get(name)?.data()[i];
            work.get_mut(name)?.value.data_mut()[i] = orig + FD_STEP;
            let up = eval(&work)?;
            work.get_mut(name)?.value.data_mut()[i] = orig - FD_STEP;
            let down = eval(&work)?;
            work.get_mut(name)?.value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            sub.record(|| format!("{name}[{i}]"), analytic.data()[i], numeric);
        }
        report.merge(sub);
    }
    Ok(report)
}
