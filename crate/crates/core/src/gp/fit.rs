use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{log_marginal_likelihood, mean, std_dev, GpModel, KernelKind, PointDataset};
use crate::error::{Error, Result};

/// Multi-start quasi-Newton settings for hyperparameter learning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub starts: usize,
    pub max_iter: usize,
    /// Relative objective change that counts as converged.
    pub tolerance: f64,
    pub seed: u64,
    pub kernel: KernelKind,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            starts: 5,
            max_iter: 200,
            tolerance: 1e-9,
            seed: 0,
            kernel: KernelKind::default(),
        }
    }
}

/// Outcome of a fit, with the per-start objective traces.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub model: GpModel,
    pub objective: f64,
    /// Objective at each accepted iterate, one trace per start.
    pub traces: Vec<Vec<f64>>,
    /// Set when the data were too few to fit and defaults were returned.
    pub used_defaults: bool,
}

/// Final parameters, objective, and objective trace of one start.
type Ascent = (Vec<f64>, f64, Vec<f64>);

const LN_VAR_BOUNDS: (f64, f64) = (-27.631_021_115_928_547, 27.631_021_115_928_547); // 1e-12 .. 1e12
const LN_LEN_BOUNDS: (f64, f64) = (-13.815_510_557_964_274, 13.815_510_557_964_274); // 1e-6 .. 1e6

pub fn fit_hyperparameters(data: &PointDataset, config: &FitConfig) -> Result<GpModel> {
    fit_hyperparameters_with_report(data, config).map(|r| r.model)
}

pub fn fit_hyperparameters_with_report(data: &PointDataset, config: &FitConfig) -> Result<FitReport> {
    if config.starts == 0 {
        return Err(Error::Config("at least one optimizer start is required".into()));
    }
    let init = heuristic_model(data, config.kernel);
    let n_obs = data.observed_indices().len();
    if n_obs < data.dim() + 3 {
        warn!(
            "only {n_obs} observed points for {} covariates; using default hyperparameters",
            data.dim()
        );
        return Ok(FitReport {
            objective: log_marginal_likelihood(&init, data)
                .map(|v| v.0)
                .unwrap_or(f64::NEG_INFINITY),
            model: init,
            traces: Vec::new(),
            used_defaults: true,
        });
    }

    let base = init.to_params();
    let d = data.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let starts: Vec<Vec<f64>> = (0..config.starts)
        .map(|s| {
            if s == 0 {
                return base.clone();
            }
            // Log-uniform within a factor of 10 around the heuristics.
            let mut p = base.clone();
            for v in p.iter_mut().take(d + 2) {
                *v += rng.random_range(-1.0..1.0) * std::f64::consts::LN_10;
            }
            p
        })
        .collect();

    let runs: Vec<Option<Ascent>> = starts.par_iter().map(|p0| ascend(data, config, p0)).collect();

    let mut best: Option<(GpModel, f64)> = None;
    let mut traces = Vec::with_capacity(runs.len());
    for run in runs {
        match run {
            Some((p, f, trace)) => {
                traces.push(trace);
                if best.as_ref().is_none_or(|(_, bf)| f > *bf) {
                    best = Some((GpModel::from_params(config.kernel, &p), f));
                }
            }
            None => traces.push(Vec::new()),
        }
    }
    match best {
        Some((model, objective)) => Ok(FitReport {
            model,
            objective,
            traces,
            used_defaults: false,
        }),
        None => Err(Error::Optimization(format!(
            "all {} starts failed to evaluate; best-so-far model is the heuristic {:?}",
            config.starts, init
        ))),
    }
}

/// Data-driven initial guess: empirical mean and variance of the responses,
/// per-dimension median pairwise distance for lengthscales, and a noise
/// variance of one tenth of the response variance.
pub(crate) fn heuristic_model(data: &PointDataset, kernel: KernelKind) -> GpModel {
    let idx = data.observed_indices();
    let ys: Vec<f64> = idx.iter().map(|&i| data.y()[i]).collect();
    let m = mean(&ys);
    let var = std_dev(&ys).powi(2);
    let signal_var = if var > 0.0 && var.is_finite() { var } else { 1.0 };
    let sample: Vec<usize> = idx.iter().copied().take(400).collect();
    let lengthscales = (0..data.dim())
        .map(|d| {
            let mut dists = Vec::new();
            for (a, &i) in sample.iter().enumerate() {
                for &j in &sample[a + 1..] {
                    let v = (data.x()[(i, d)] - data.x()[(j, d)]).abs();
                    if v > 0.0 {
                        dists.push(v);
                    }
                }
            }
            if dists.is_empty() {
                1.0
            } else {
                dists.sort_by(f64::total_cmp);
                dists[dists.len() / 2]
            }
        })
        .collect();
    GpModel {
        kernel,
        mean: m,
        signal_var,
        lengthscales,
        noise_var: 0.1 * signal_var,
    }
}

fn clamp_params(p: &mut [f64]) {
    let d = p.len() - 3;
    let clamp = |v: &mut f64, (lo, hi): (f64, f64)| *v = v.clamp(lo, hi);
    clamp(&mut p[0], LN_VAR_BOUNDS);
    for v in &mut p[1..=d] {
        clamp(v, LN_LEN_BOUNDS);
    }
    clamp(&mut p[d + 1], LN_VAR_BOUNDS);
}

/// Negative log marginal likelihood and its gradient; `None` when the Gram
/// matrix cannot be factorized at this point.
fn objective(data: &PointDataset, kernel: KernelKind, p: &[f64]) -> Option<(f64, DVector<f64>)> {
    let model = GpModel::from_params(kernel, p);
    let (v, g) = log_marginal_likelihood(&model, data).ok()?;
    if !v.is_finite() || g.iter().any(|x| !x.is_finite()) {
        return None;
    }
    Some((-v, -DVector::from_vec(g)))
}

/// Projected BFGS with backtracking; returns the final parameters, the
/// maximized log likelihood and the trace of accepted objective values.
fn ascend(data: &PointDataset, config: &FitConfig, p0: &[f64]) -> Option<Ascent> {
    let kernel = config.kernel;
    let mut x = p0.to_vec();
    clamp_params(&mut x);
    let (mut f, mut g) = objective(data, kernel, &x)?;
    let n = x.len();
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut trace = vec![-f];
    const MAX_STEP: f64 = 2.0;

    for _ in 0..config.max_iter {
        let mut dir = -(&h * &g);
        if dir.dot(&g) >= 0.0 {
            h = DMatrix::identity(n, n);
            dir = -g.clone();
        }
        let inf_norm = dir.amax();
        if inf_norm > MAX_STEP {
            dir *= MAX_STEP / inf_norm;
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let mut trial: Vec<f64> = x.iter().zip(dir.iter()).map(|(a, b)| a + t * b).collect();
            clamp_params(&mut trial);
            let step = DVector::from_iterator(n, trial.iter().zip(&x).map(|(a, b)| a - b));
            if step.amax() == 0.0 {
                break;
            }
            if let Some((ft, gt)) = objective(data, kernel, &trial) {
                if ft <= f + 1e-4 * g.dot(&step) && ft < f {
                    accepted = Some((trial, ft, gt, step));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((xn, fnew, gn, s)) = accepted else {
            break;
        };
        let yv = &gn - &g;
        let sy = s.dot(&yv);
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            let eye = DMatrix::<f64>::identity(n, n);
            let left = &eye - rho * &s * yv.transpose();
            let right = &eye - rho * &yv * s.transpose();
            h = &left * &h * &right + rho * &s * s.transpose();
        }
        let change = f - fnew;
        x = xn;
        f = fnew;
        g = gn;
        trace.push(-f);
        if change <= config.tolerance * (1.0 + f.abs()) {
            break;
        }
        // Components pinned at a bound with an outward gradient do not count.
        if projected_grad_norm(&x, &g) < 1e-8 {
            break;
        }
    }
    Some((x, -f, trace))
}

fn projected_grad_norm(x: &[f64], g: &DVector<f64>) -> f64 {
    let d = x.len() - 3;
    let bounds = |k: usize| {
        if k == d + 2 {
            (f64::NEG_INFINITY, f64::INFINITY)
        } else if k == 0 || k == d + 1 {
            LN_VAR_BOUNDS
        } else {
            LN_LEN_BOUNDS
        }
    };
    (0..x.len())
        .map(|k| {
            let (lo, hi) = bounds(k);
            let pinned = (x[k] <= lo && g[k] > 0.0) || (x[k] >= hi && g[k] < 0.0);
            if pinned {
                0.0
            } else {
                g[k].abs()
            }
        })
        .fold(0.0, f64::max)
}
