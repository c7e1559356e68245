//! Forward-only finite-difference oracles. Nothing here calls the backward
//! pass, so these can check it.

use crate::error::Result;
use crate::lora::{effective_weight, LoraAdapter};
use crate::model::{ModelParams, ModuleId};
use crate::probe::{probe_loss, ProbeSample};
use crate::tensor::Matrix;

/// Central differences of `f` around `at`, one coordinate at a time.
pub fn central_difference(at: &Matrix, h: f64, mut f: impl FnMut(&Matrix) -> Result<f64>) -> Result<Matrix> {
    let mut probe = at.clone();
    let mut out = Matrix::zeros(at.rows(), at.cols());
    for i in 0..at.data().len() {
        let x = at.data()[i];
        probe.data_mut()[i] = x + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = x - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = x;
        out.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(out)
}

/// Mean probe loss over `samples`.
pub fn mean_probe_loss(params: &ModelParams, samples: &[ProbeSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        total += probe_loss(params, s)?;
    }
    Ok(total / samples.len() as f64)
}

/// Numerical gradient of the mean probe loss w.r.t. one projection.
pub fn projection_gradient_fd(params: &ModelParams, samples: &[ProbeSample], module: ModuleId, h: f64) -> Result<Matrix> {
    let mut work = params.clone();
    central_difference(params.projection(module)?, h, |w| {
        *work.projection_mut(module)? = w.clone();
        mean_probe_loss(&work, samples)
    })
}

/// Numerical `(∇A, ∇B)` of the mean probe loss of the model with `adapter`
/// merged into `base`.
pub fn adapter_gradient_fd(
    base: &ModelParams,
    adapter: &LoraAdapter,
    samples: &[ProbeSample],
    h: f64,
) -> Result<(Matrix, Matrix)> {
    let base_w = base.projection(adapter.target)?.clone();
    let mut work = base.clone();
    let mut loss_with = |a: &LoraAdapter| -> Result<f64> {
        *work.projection_mut(adapter.target)? = effective_weight(&base_w, a)?;
        mean_probe_loss(&work, samples)
    };
    let mut trial = adapter.clone();
    let grad_a = central_difference(&adapter.a, h, |a| {
        trial.a = a.clone();
        loss_with(&trial)
    })?;
    trial.a = adapter.a.clone();
    let grad_b = central_difference(&adapter.b, h, |b| {
        trial.b = b.clone();
        loss_with(&trial)
    })?;
    Ok((grad_a, grad_b))
}

/// `max|a − n| / max(max|a|, max|n|)`; zero when both are zero.
pub fn relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    let scale = analytic.max_abs().max(numeric.max_abs());
    if scale == 0.0 {
        return 0.0;
    }
    analytic.max_abs_diff(numeric) / scale
}
