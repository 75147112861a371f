//! Gaussian process subset scan: neighbourhood construction and subset
//! optimization against a fitted GP null.

mod neighborhood;
mod search;

pub use neighborhood::{build_neighborhoods, Metric, Neighborhood};
pub use search::{
    exhaustive_search, iterative_search, scan_neighborhood_exhaustive, scan_neighborhood_iterative, PrecisionSystem,
    SearchOptions, SubsetMask, MAX_EXHAUSTIVE_K,
};

use std::collections::BTreeMap;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{fit_hyperparameters, FitConfig, GpModel, PointDataset, PosteriorMoments};
use crate::linalg::jittered_cholesky;
use crate::stats::{gaussian_meanshift_score, GaussianResidualSystem};

/// Settings for a GPSS run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpssConfig {
    pub k: usize,
    pub metric: Metric,
    /// Neighbourhoods up to this size are searched exhaustively.
    pub k_exhaustive: usize,
    /// Random restarts for the iterative search on larger neighbourhoods.
    pub restarts: usize,
    pub two_sided: bool,
    pub penalty: f64,
    pub seed: u64,
    pub fit: FitConfig,
}

impl Default for GpssConfig {
    fn default() -> Self {
        GpssConfig {
            k: 10,
            metric: Metric::default(),
            k_exhaustive: 15,
            restarts: 50,
            two_sided: true,
            penalty: 0.0,
            seed: 0,
            fit: FitConfig::default(),
        }
    }
}

impl GpssConfig {
    fn search_options(&self) -> SearchOptions {
        SearchOptions {
            two_sided: self.two_sided,
            penalty: self.penalty,
        }
    }
}

/// Best subset found in one neighbourhood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpssScanResult {
    /// Dataset indices, ascending.
    pub subset: Vec<usize>,
    pub score: f64,
    /// Estimated mean shift.
    pub effect: f64,
    pub neighborhood_center: usize,
    pub p_value: Option<f64>,
}

/// A fitted model and neighbourhood structure, ready to scan any response
/// vector observed at the same points (the data itself or null replicas).
///
/// Scores use the precision form of the joint null: with
/// `Q = (K + noise I)^-1` over all observed points and `z = Q (y - m)`,
/// conditioning a neighbourhood `S` on the rest gives `Sigma^-1 = Q_SS`
/// and `Sigma^-1 r = z_S`. One factorization serves every neighbourhood.
#[derive(Debug, Clone)]
pub struct GpssScanner {
    model: GpModel,
    config: GpssConfig,
    neighborhoods: Vec<Neighborhood>,
    /// Position of each dataset index among the observed points.
    position: Vec<Option<usize>>,
    observed: Vec<usize>,
    precision: DMatrix<f64>,
    blocks: Vec<DMatrix<f64>>,
}

impl GpssScanner {
    pub fn new(model: GpModel, data: &PointDataset, config: &GpssConfig) -> Result<Self> {
        model.validate()?;
        if model.dim() != data.dim() {
            return Err(Error::Config(format!(
                "model has {} lengthscales but data has {} covariates",
                model.dim(),
                data.dim()
            )));
        }
        let observed = data.observed_indices();
        if observed.is_empty() {
            return Err(Error::Config("no observed points to scan".into()));
        }
        let mut k = config.k;
        if k > observed.len() {
            warn!(
                "k = {k} exceeds the {} observed points; using k = {}",
                observed.len(),
                observed.len()
            );
            k = observed.len();
        }
        let neighborhoods = build_neighborhoods(data, k, config.metric)?;
        let mut position = vec![None; data.len()];
        for (p, &i) in observed.iter().enumerate() {
            position[i] = Some(p);
        }
        let gram = model.obs_cov(data.x(), &observed);
        let (chol, _) = jittered_cholesky(&gram, model.signal_var)?;
        let precision = chol.inverse();
        let blocks = neighborhoods
            .iter()
            .map(|h| {
                let pos: Vec<usize> = h.members.iter().map(|&i| position[i].unwrap()).collect();
                DMatrix::from_fn(pos.len(), pos.len(), |a, b| precision[(pos[a], pos[b])])
            })
            .collect();
        Ok(GpssScanner {
            model,
            config: config.clone(),
            neighborhoods,
            position,
            observed,
            precision,
            blocks,
        })
    }

    pub fn model(&self) -> &GpModel {
        &self.model
    }

    pub fn config(&self) -> &GpssConfig {
        &self.config
    }

    pub fn neighborhoods(&self) -> &[Neighborhood] {
        &self.neighborhoods
    }

    /// `Q (y - m)` over observed points.
    fn whitened(&self, y: &[f64]) -> Result<DVector<f64>> {
        let resid = DVector::from_iterator(
            self.observed.len(),
            self.observed.iter().map(|&i| y[i] - self.model.mean),
        );
        if resid.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("observed responses must be finite".into()));
        }
        Ok(&self.precision * resid)
    }

    /// Predictive moments of a neighbourhood given every other observed
    /// point, recovered from the precision form.
    pub fn neighborhood_posterior(&self, which: usize, y: &[f64]) -> Result<PosteriorMoments> {
        let z = self.whitened(y)?;
        self.posterior_from_whitened(which, &z, y)
    }

    fn posterior_from_whitened(&self, which: usize, z: &DVector<f64>, y: &[f64]) -> Result<PosteriorMoments> {
        let h = &self.neighborhoods[which];
        let chol = nalgebra::Cholesky::new(self.blocks[which].clone())
            .ok_or_else(|| Error::Decomposition(format!("precision block at centre {} is not PD", h.center)))?;
        let sigma = chol.inverse();
        let zs = self.local_z(which, z);
        let shift = &sigma * zs;
        let mu = DVector::from_iterator(
            h.members.len(),
            h.members.iter().enumerate().map(|(a, &i)| y[i] - shift[a]),
        );
        Ok(PosteriorMoments {
            mu,
            sigma,
            indices: h.members.clone(),
        })
    }

    /// Mean of each point of `subset` (observed dataset indices) given all
    /// observed points outside the subset.
    pub fn conditional_means(&self, y: &[f64], subset: &[usize]) -> Result<Vec<f64>> {
        let z = self.whitened(y)?;
        let pos = subset
            .iter()
            .map(|&i| {
                self.position
                    .get(i)
                    .copied()
                    .flatten()
                    .ok_or_else(|| Error::InvalidSubset(format!("point {i} is not observed")))
            })
            .collect::<Result<Vec<usize>>>()?;
        let block = DMatrix::from_fn(pos.len(), pos.len(), |a, b| self.precision[(pos[a], pos[b])]);
        let chol =
            nalgebra::Cholesky::new(block).ok_or_else(|| Error::Decomposition("precision block is not PD".into()))?;
        let shift = chol.solve(&DVector::from_iterator(pos.len(), pos.iter().map(|&p| z[p])));
        Ok(subset.iter().enumerate().map(|(a, &i)| y[i] - shift[a]).collect())
    }

    /// Leave-one-out mean of every observed point; NaN elsewhere.
    pub fn loo_means(&self, y: &[f64]) -> Result<Vec<f64>> {
        let z = self.whitened(y)?;
        let mut out = vec![f64::NAN; y.len()];
        for (p, &i) in self.observed.iter().enumerate() {
            out[i] = y[i] - z[p] / self.precision[(p, p)];
        }
        Ok(out)
    }

    fn local_z(&self, which: usize, z: &DVector<f64>) -> DVector<f64> {
        let h = &self.neighborhoods[which];
        DVector::from_iterator(h.members.len(), h.members.iter().map(|&i| z[self.position[i].unwrap()]))
    }

    fn search_one(&self, which: usize, z: &DVector<f64>, y: &[f64]) -> Result<GpssScanResult> {
        let h = &self.neighborhoods[which];
        let sys = PrecisionSystem {
            z: self.local_z(which, z),
            precision: self.blocks[which].clone(),
        };
        let opts = self.config.search_options();
        let (mask, _) = if h.members.len() <= self.config.k_exhaustive.min(MAX_EXHAUSTIVE_K) {
            exhaustive_search(&sys, opts)?
        } else {
            let mut rng =
                ChaCha8Rng::seed_from_u64(self.config.seed ^ (h.center as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let (m, s, _) = iterative_search(&sys, self.config.restarts.max(1), opts, &mut rng)?;
            (m, s)
        };
        // Report the score of the chosen subset through the direct route.
        let post = self.posterior_from_whitened(which, z, y)?;
        let r = DVector::from_iterator(
            h.members.len(),
            h.members.iter().enumerate().map(|(a, &i)| y[i] - post.mu[a]),
        );
        let size = mask.count();
        let resid_sys = GaussianResidualSystem::new(r, post.sigma, mask.bits.clone())?;
        let value = gaussian_meanshift_score(&resid_sys, self.config.two_sided)?;
        let mut subset: Vec<usize> = mask.selected().into_iter().map(|a| h.members[a]).collect();
        subset.sort_unstable();
        Ok(GpssScanResult {
            subset,
            score: value.score - self.config.penalty * size as f64,
            effect: value.effect,
            neighborhood_center: h.center,
            p_value: None,
        })
    }

    /// Scans every neighbourhood and returns distinct subsets ranked by
    /// score (descending), ties by centre then subset.
    pub fn scan(&self, y: &[f64]) -> Result<Vec<GpssScanResult>> {
        let z = self.whitened(y)?;
        let per_hood: Vec<Result<GpssScanResult>> = (0..self.neighborhoods.len())
            .into_par_iter()
            .map(|w| {
                self.search_one(w, &z, y).map_err(|e| {
                    e.context(format!(
                        "neighbourhood centred at point {}",
                        self.neighborhoods[w].center
                    ))
                })
            })
            .collect();
        let mut unique: BTreeMap<Vec<usize>, GpssScanResult> = BTreeMap::new();
        for r in per_hood {
            let r = r?;
            match unique.get(&r.subset) {
                Some(prev) if prev.score >= r.score => {}
                _ => {
                    unique.insert(r.subset.clone(), r);
                }
            }
        }
        let mut out: Vec<GpssScanResult> = unique.into_values().collect();
        out.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.neighborhood_center.cmp(&b.neighborhood_center))
                .then(a.subset.cmp(&b.subset))
        });
        Ok(out)
    }

    /// Highest score over all neighbourhoods.
    pub fn max_score(&self, y: &[f64]) -> Result<f64> {
        Ok(self.scan(y)?.first().map_or(0.0, |r| r.score))
    }
}

/// Fits the GP on all observed data, then scans every neighbourhood.
pub fn gpss_scan(data: &PointDataset, config: &GpssConfig) -> Result<(GpssScanner, Vec<GpssScanResult>)> {
    let fit = FitConfig {
        seed: config.seed,
        ..config.fit.clone()
    };
    let model = fit_hyperparameters(data, &fit)?;
    let scanner = GpssScanner::new(model, data, config)?;
    let results = scanner.scan(data.y())?;
    Ok((scanner, results))
}
