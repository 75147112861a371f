use std::f64::consts::PI;

use nalgebra::DVector;

use super::{GpModel, PointDataset};
use crate::error::{Error, Result};
use crate::linalg::{chol_logdet, jittered_cholesky};

/// Log marginal likelihood of the observed responses and its gradient with
/// respect to `[ln signal_var, ln lengthscales.., ln noise_var, mean]`
/// (the layout of [`GpModel::to_params`]). Unobserved points are skipped.
pub fn log_marginal_likelihood(model: &GpModel, data: &PointDataset) -> Result<(f64, Vec<f64>)> {
    if model.dim() != data.dim() {
        return Err(Error::Config(format!(
            "model has {} lengthscales but data has {} covariates",
            model.dim(),
            data.dim()
        )));
    }
    let idx = data.observed_indices();
    if idx.is_empty() {
        return Err(Error::Config("no observed points".into()));
    }
    let n = idx.len();
    let x = data.x();
    let kf = model.cross_cov(x, &idx, &idx);
    let mut k = kf.clone();
    for i in 0..n {
        k[(i, i)] += model.noise_var;
    }
    let (chol, jitter) = jittered_cholesky(&k, model.signal_var)?;

    let resid = DVector::from_iterator(n, idx.iter().map(|&i| data.y()[i] - model.mean));
    let alpha = chol.solve(&resid);
    let value = -0.5 * resid.dot(&alpha) - 0.5 * chol_logdet(&chol) - 0.5 * n as f64 * (2.0 * PI).ln();

    // dL/dtheta = tr(W dK/dtheta) / 2 with W = alpha alpha' - K^-1.
    let kinv = chol.inverse();
    let d = model.dim();
    let mut grad = vec![0.0; d + 3];
    let mut trace_w = 0.0;
    for i in 0..n {
        trace_w += alpha[i] * alpha[i] - kinv[(i, i)];
        for j in 0..n {
            let w = alpha[i] * alpha[j] - kinv[(i, j)];
            let kij = kf[(i, j)];
            grad[0] += w * kij;
            if i != j {
                for (dd, l) in model.lengthscales.iter().enumerate() {
                    let diff = (x[(idx[i], dd)] - x[(idx[j], dd)]) / l;
                    grad[1 + dd] += w * kij * diff * diff;
                }
            }
        }
    }
    // The jitter is proportional to signal_var, so it moves with ln signal_var.
    grad[0] += jitter * trace_w;
    for g in grad.iter_mut().take(d + 1) {
        *g *= 0.5;
    }
    grad[d + 1] = 0.5 * model.noise_var * trace_w;
    grad[d + 2] = alpha.sum();
    Ok((value, grad))
}
