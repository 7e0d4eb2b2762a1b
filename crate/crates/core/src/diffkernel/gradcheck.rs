//! Central finite-difference checks run on the float64 shadow path.

use rand::seq::index::sample;
use rand::Rng;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use super::KernelError;

/// Relative error with a tiny absolute floor so exact zeros compare cleanly.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// One-sided differences that disagree by more than this (relative) mark a
/// coordinate sitting on a kink, where no derivative exists to compare.
pub const KINK_THRESHOLD: f64 = 1e-2;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates skipped because the step straddled a kink.
    pub kinks: usize,
    pub max_relative_error: f64,
    /// (parameter name, flat index, analytic, numeric) of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    /// `lo`, `mid`, `hi` are the loss at `-step`, `0` and `+step`.
    fn observe(&mut self, name: &str, k: usize, analytic: f64, [lo, mid, hi]: [f64; 3], step: f64) {
        let forward = (hi - mid) / step;
        let backward = (mid - lo) / step;
        if relative_error(forward, backward) > KINK_THRESHOLD {
            self.kinks += 1;
            return;
        }
        self.record(name, k, analytic, (hi - lo) / (2.0 * step));
    }

    fn record(&mut self, name: &str, k: usize, a: f64, n: f64) {
        let e = relative_error(a, n);
        self.checked += 1;
        if e >= self.max_relative_error {
            self.max_relative_error = e;
            self.worst = Some((name.to_string(), k, a, n));
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.kinks += other.kinks;
        if other.max_relative_error >= self.max_relative_error {
            self.max_relative_error = other.max_relative_error;
            self.worst = other.worst;
        }
    }
}

/// Compares the analytic gradient of `loss_fn` against central differences
/// for up to `per_param` randomly chosen coordinates of each listed parameter.
///
/// `loss_fn` must build its loss on the graph it is handed and bind
/// parameters through [`Graph::param`]; overrides carry the perturbed values.
pub fn check_params<F>(
    store: &ParamStore,
    ids: &[ParamId],
    step: f64,
    per_param: usize,
    rng: &mut impl Rng,
    loss_fn: F,
) -> Result<GradCheckReport, KernelError>
where
    F: Fn(&mut Graph<f64>) -> Result<Var, KernelError>,
{
    let mut g = Graph::<f64>::new();
    let loss = loss_fn(&mut g)?;
    let mid = g.value(loss).item();
    let grads = g.backward(loss)?;
    let mut report = GradCheckReport::default();
    for &id in ids {
        let base: Tensor<f64> = store.tensor(id).cast();
        let analytic = grads
            .get(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(base.shape()));
        let n = base.len().min(per_param);
        for k in sample(rng, base.len(), n).into_iter() {
            let eval = |delta: f64| -> Result<f64, KernelError> {
                let mut t = base.clone();
                t.data_mut()[k] += delta;
                let mut g = Graph::<f64>::new();
                g.override_param(id, t);
                let l = loss_fn(&mut g)?;
                Ok(g.value(l).item())
            };
            report.observe(store.name(id), k, analytic.data()[k], [eval(-step)?, mid, eval(step)?], step);
        }
    }
    Ok(report)
}

/// Same as [`check_params`] but for a differentiable input tensor.
pub fn check_input<F>(
    input: &Tensor<f64>,
    step: f64,
    loss_fn: F,
) -> Result<GradCheckReport, KernelError>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, KernelError>,
{
    let mut g = Graph::<f64>::new();
    let x = g.input(input.clone())?;
    let loss = loss_fn(&mut g, x)?;
    let mid = g.value(loss).item();
    let analytic = g.grad_wrt(loss, x)?;
    let mut report = GradCheckReport::default();
    for k in 0..input.len() {
        let eval = |delta: f64| -> Result<f64, KernelError> {
            let mut t = input.clone();
            t.data_mut()[k] += delta;
            let mut g = Graph::<f64>::new();
            let x = g.input(t)?;
            let l = loss_fn(&mut g, x)?;
            Ok(g.value(l).item())
        };
        report.observe("input", k, analytic.data()[k], [eval(-step)?, mid, eval(step)?], step);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_function_passes() {
        let x = Tensor::new(vec![1, 3], vec![0.3, -0.7, 1.1]).unwrap();
        let rep = check_input(&x, 1e-6, |g, x| {
            let s = g.sin(x);
            let q = g.square(s)?;
            Ok(g.sum(q))
        })
        .unwrap();
        assert_eq!((rep.checked, rep.kinks), (3, 0));
        assert!(rep.max_relative_error < 1e-6, "{rep:?}");
    }

    #[test]
    fn wrong_gradient_is_reported() {
        let x = Tensor::new(vec![1, 1], vec![0.5]).unwrap();
        let rep = check_input(&x, 1e-6, |g, x| {
            let v = g.value(x).clone();
            let c = g.constant(v)?;
            let p = g.mul(x, c)?;
            Ok(g.sum(p))
        })
        .unwrap();
        // d/dx (x * stop(x)) = x on the tape, 2x numerically.
        assert!((rep.max_relative_error - 0.5).abs() < 1e-6, "{rep:?}");
        assert_eq!(rep.worst.unwrap().1, 0);
    }

    #[test]
    fn kinks_are_skipped_not_compared() {
        let x = Tensor::new(vec![1, 2], vec![0.0, 0.4]).unwrap();
        let rep = check_input(&x, 1e-6, |g, x| {
            let r = g.relu(x);
            Ok(g.sum(r))
        })
        .unwrap();
        assert_eq!((rep.checked, rep.kinks), (1, 1));
        assert!(rep.max_relative_error < 1e-8);
    }

    #[test]
    fn relative_error_has_a_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-12);
    }
}
