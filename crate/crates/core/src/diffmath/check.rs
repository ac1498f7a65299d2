use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor of the relative error.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    /// (input index, flat coordinate) where the maximum was reached.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Compares the analytic gradient of `f` at `point` with central differences.
///
/// `f` records a scalar computation of its inputs on the graph it is given.
/// Returns the max over coordinates of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
pub fn gradient_check<F>(f: F, point: &[Tensor<f64>], step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::domain("gradient_check", "step must be positive"));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = point.iter().map(|t| g.leaf(t.clone())).collect();
    let root = f(&mut g, &vars)?;
    g.backward(root)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(point)
        .map(|(v, t)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    drop(g);

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let root = f(&mut g, &vars)?;
        let v = g.value(root);
        if !v.is_scalar() {
            return Err(Error::NonScalarRoot(v.shape().to_vec()));
        }
        let y = v.item();
        if !y.is_finite() {
            return Err(Error::NonFinite { op: "gradient_check" });
        }
        Ok(y)
    };

    let mut work: Vec<Tensor<f64>> = point.to_vec();
    let mut best = GradCheck {
        max_relative_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    for ti in 0..work.len() {
        for k in 0..work[ti].len() {
            let x0 = work[ti].data()[k];
            work[ti].data_mut()[k] = x0 + step;
            let fp = eval(&work)?;
            work[ti].data_mut()[k] = x0 - step;
            let fm = eval(&work)?;
            work[ti].data_mut()[k] = x0;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[ti].data()[k];
            let err = relative_error(a, numeric);
            best.coordinates += 1;
            if err > best.max_relative_error {
                best.max_relative_error = err;
                best.worst = (ti, k);
            }
        }
    }
    Ok(best)
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}
