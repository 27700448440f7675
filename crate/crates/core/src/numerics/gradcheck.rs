use super::params::Params;
use crate::error::{Error, Result};

/// Gradients smaller than this are compared on an absolute rather than
/// relative scale; central differences cannot resolve them relatively.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorError {
    pub name: String,
    pub max_rel_error: f64,
    /// Index of the worst entry within the tensor.
    pub worst_index: usize,
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub tensors: Vec<TensorError>,
    pub tol: f64,
    pub passed: bool,
}

impl FdReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    /// Tensors whose error exceeds the tolerance.
    pub fn failures(&self) -> impl Iterator<Item = &TensorError> {
        self.tensors.iter().filter(move |t| !(t.max_rel_error <= self.tol))
    }
}

/// Compares `analytic` (shaped like `params`) with central differences of
/// `loss_fn` taken with the given `step`.
///
/// The relative error of an entry is `|a − n| / max(|a|, |n|, RELATIVE_ERROR_FLOOR)`.
pub fn finite_diff_check<P, F>(params: &P, analytic: &P, loss_fn: F, step: f64, tol: f64) -> Result<FdReport>
where
    P: Params + Clone,
    F: Fn(&P) -> f64,
{
    if !(step > 0.0) {
        return Err(Error::Precondition(format!("finite-difference step must be positive, got {step}")));
    }
    let names: Vec<(String, usize)> = params
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.len()))
        .collect();
    let grads: Vec<Vec<f64>> = analytic.tensors().into_iter().map(|(_, t)| t.to_vec()).collect();
    if grads.len() != names.len() {
        return Err(Error::shape("analytic gradient tensors", names.len(), grads.len()));
    }

    let mut probe = params.clone();
    let mut tensors = Vec::with_capacity(names.len());
    for (ti, (name, len)) in names.into_iter().enumerate() {
        if grads[ti].len() != len {
            return Err(Error::shape(format!("analytic gradient {name}"), len, grads[ti].len()));
        }
        let mut worst = (0.0f64, 0usize);
        for i in 0..len {
            let orig = probe.tensors_mut()[ti][i];
            probe.tensors_mut()[ti][i] = orig + step;
            let plus = loss_fn(&probe);
            probe.tensors_mut()[ti][i] = orig - step;
            let minus = loss_fn(&probe);
            probe.tensors_mut()[ti][i] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = grads[ti][i];
            let denom = a.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
            let err = (a - numeric).abs() / denom;
            // NaN compares false, so a NaN error is always recorded as worst.
            if !(err <= worst.0) {
                worst = (err, i);
            }
        }
        tensors.push(TensorError {
            name,
            max_rel_error: worst.0,
            worst_index: worst.1,
        });
    }
    let passed = tensors.iter().all(|t| t.max_rel_error <= tol);
    Ok(FdReport { tensors, tol, passed })
}
