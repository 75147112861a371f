//! Gaussian-process null model: kernel, marginal likelihood, hyperparameter
//! fitting and posterior conditioning.

mod fit;
mod likelihood;
mod posterior;

pub use fit::{fit_hyperparameters, fit_hyperparameters_with_report, FitConfig, FitReport};
pub use likelihood::log_marginal_likelihood;
pub use posterior::{posterior_conditional, GpSampler, PosteriorMoments};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Real-valued covariates with scalar responses and a missing-data mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PointDataset {
    x: DMatrix<f64>,
    y: Vec<f64>,
    observed: Vec<bool>,
}

impl PointDataset {
    /// `x` is `n x D`. Responses at unobserved points are ignored and stored
    /// as NaN.
    pub fn new(x: DMatrix<f64>, y: Vec<f64>, observed: Vec<bool>) -> Result<Self> {
        let n = x.nrows();
        if n == 0 || x.ncols() == 0 {
            return Err(Error::Config(
                "dataset needs at least one point and one covariate".into(),
            ));
        }
        if y.len() != n || observed.len() != n {
            return Err(Error::Config(format!(
                "{} covariate rows but {} responses and {} mask entries",
                n,
                y.len(),
                observed.len()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("covariates must be finite".into()));
        }
        let mut y = y;
        for (i, (v, &obs)) in y.iter_mut().zip(&observed).enumerate() {
            if obs && !v.is_finite() {
                return Err(Error::Config(format!("observed response {i} is not finite")));
            }
            if !obs {
                *v = f64::NAN;
            }
        }
        Ok(PointDataset { x, y, observed })
    }

    /// All points observed.
    pub fn complete(x: DMatrix<f64>, y: Vec<f64>) -> Result<Self> {
        let n = y.len();
        Self::new(x, y, vec![true; n])
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn observed(&self) -> &[bool] {
        &self.observed
    }

    pub fn is_observed(&self, i: usize) -> bool {
        self.observed[i]
    }

    pub fn observed_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.observed[i]).collect()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().copied().collect()
    }

    /// Same covariates and mask with new responses (used for replicas).
    pub fn with_responses(&self, y: Vec<f64>) -> Result<Self> {
        Self::new(self.x.clone(), y, self.observed.clone())
    }

    /// Per-dimension standard deviation of the observed covariates; zero
    /// spreads are reported as 1.
    pub fn covariate_scales(&self) -> Vec<f64> {
        let idx = self.observed_indices();
        (0..self.dim())
            .map(|d| {
                let vals: Vec<f64> = idx.iter().map(|&i| self.x[(i, d)]).collect();
                let sd = std_dev(&vals);
                if sd > 0.0 && sd.is_finite() {
                    sd
                } else {
                    1.0
                }
            })
            .collect()
    }
}

pub(crate) fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub(crate) fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Covariance function family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KernelKind {
    /// Squared exponential with one lengthscale per covariate.
    #[default]
    SquaredExponentialArd,
}

/// Constant-mean GP with additive Gaussian observation noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpModel {
    pub kernel: KernelKind,
    pub mean: f64,
    pub signal_var: f64,
    pub lengthscales: Vec<f64>,
    pub noise_var: f64,
}

impl GpModel {
    pub fn new(mean: f64, signal_var: f64, lengthscales: Vec<f64>, noise_var: f64) -> Result<Self> {
        let model = GpModel {
            kernel: KernelKind::SquaredExponentialArd,
            mean,
            signal_var,
            lengthscales,
            noise_var,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !self.mean.is_finite()
            || !positive(self.signal_var)
            || !positive(self.noise_var)
            || self.lengthscales.is_empty()
            || !self.lengthscales.iter().all(|&l| positive(l))
        {
            return Err(Error::Config(format!("invalid GP hyperparameters: {self:?}")));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    /// Unconstrained parameter vector:
    /// `[ln signal_var, ln lengthscale_1..D, ln noise_var, mean]`.
    pub fn to_params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.dim() + 3);
        p.push(self.signal_var.ln());
        p.extend(self.lengthscales.iter().map(|l| l.ln()));
        p.push(self.noise_var.ln());
        p.push(self.mean);
        p
    }

    pub fn from_params(kernel: KernelKind, p: &[f64]) -> Self {
        let d = p.len() - 3;
        GpModel {
            kernel,
            mean: p[d + 2],
            signal_var: p[0].exp(),
            lengthscales: p[1..=d].iter().map(|v| v.exp()).collect(),
            noise_var: p[d + 1].exp(),
        }
    }

    /// Scaled squared distance `sum_d ((a_d - b_d) / l_d)^2`.
    #[inline]
    fn scaled_sq_dist(&self, a: impl Iterator<Item = f64>, b: impl Iterator<Item = f64>) -> f64 {
        a.zip(b)
            .zip(&self.lengthscales)
            .map(|((u, v), l)| {
                let t = (u - v) / l;
                t * t
            })
            .sum()
    }

    /// Latent-function covariance between rows `i` and `j` of `x`.
    #[inline]
    pub(crate) fn kernel_rows(&self, x: &DMatrix<f64>, i: usize, j: usize) -> f64 {
        let d2 = self.scaled_sq_dist(x.row(i).iter().copied(), x.row(j).iter().copied());
        self.signal_var * (-0.5 * d2).exp()
    }

    /// Latent covariance matrix between the index sets `a` and `b`.
    pub(crate) fn cross_cov(&self, x: &DMatrix<f64>, a: &[usize], b: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(a.len(), b.len(), |r, c| self.kernel_rows(x, a[r], b[c]))
    }

    /// Observation covariance `K + noise_var I` over the index set.
    pub(crate) fn obs_cov(&self, x: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
        let mut k = self.cross_cov(x, idx, idx);
        for i in 0..idx.len() {
            k[(i, i)] += self.noise_var;
        }
        k
    }
}

/// Squared-exponential kernel value between two covariate vectors.
pub fn kernel_eval(model: &GpModel, x: &[f64], x2: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), model.dim());
    debug_assert_eq!(x2.len(), model.dim());
    let d2 = model.scaled_sq_dist(x.iter().copied(), x2.iter().copied());
    model.signal_var * (-0.5 * d2).exp()
}
