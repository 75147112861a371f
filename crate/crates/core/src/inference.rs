//! Randomization testing: replicas drawn from the fitted null are rescanned
//! and the distribution of their maximum scores sets significance.

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{fit_hyperparameters, GpModel, GpSampler, PointDataset};
use crate::gpss::{GpssConfig, GpssScanner};
use crate::mdts::{mdts_scan, MdtsConfig};
use crate::tensor::{cp_decompose, Attribute, BaselineTensor, CpConfig, PoissonSampler};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomizationConfig {
    pub replicas: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Refit the null model on every replica before rescanning.
    pub refit_per_replica: bool,
}

impl Default for RandomizationConfig {
    fn default() -> Self {
        RandomizationConfig {
            replicas: 200,
            alpha: 0.05,
            seed: 0,
            refit_per_replica: false,
        }
    }
}

impl RandomizationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.replicas == 0 {
            return Err(Error::Config("at least one replica is required".into()));
        }
        if (self.replicas as f64 + 1.0) * self.alpha < 1.0 {
            warn!(
                "{} replicas cannot produce p <= {}; nothing will be significant",
                self.replicas, self.alpha
            );
        }
        Ok(())
    }

    /// Generator for replica `index`.
    pub fn replica_rng(&self, index: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(index as u64))
    }
}

/// Maximum scores of the null replicas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NullDistribution {
    /// In replica order.
    pub max_scores: Vec<f64>,
    pub alpha: f64,
    /// The `ceil((1 - alpha) R)`-th smallest replica maximum.
    pub threshold: f64,
}

impl NullDistribution {
    pub fn new(max_scores: Vec<f64>, alpha: f64) -> Result<Self> {
        if max_scores.is_empty() {
            return Err(Error::Config("null distribution needs at least one replica".into()));
        }
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        if let Some(i) = max_scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::Optimization(format!(
                "replica {i} produced a non-finite maximum"
            )));
        }
        let mut sorted = max_scores.clone();
        sorted.sort_by(f64::total_cmp);
        let r = sorted.len();
        let rank = (((1.0 - alpha) * r as f64).ceil() as usize).clamp(1, r);
        Ok(NullDistribution {
            threshold: sorted[rank - 1],
            max_scores,
            alpha,
        })
    }

    pub fn replicas(&self) -> usize {
        self.max_scores.len()
    }

    /// `(1 + #{replica maxima >= s}) / (1 + R)`.
    pub fn p_value(&self, score: f64) -> f64 {
        let exceed = self.max_scores.iter().filter(|&&m| m >= score).count();
        (1 + exceed) as f64 / (1 + self.max_scores.len()) as f64
    }

    pub fn is_significant(&self, score: f64) -> bool {
        self.p_value(score) <= self.alpha
    }
}

/// Runs `replica_max` on every replica index in parallel and collects the
/// maxima. The closure receives the replica's own generator.
pub fn randomization_test<F>(config: &RandomizationConfig, replica_max: F) -> Result<NullDistribution>
where
    F: Fn(usize, &mut ChaCha8Rng) -> Result<f64> + Sync,
{
    config.validate()?;
    let maxima: Vec<Result<f64>> = (0..config.replicas)
        .into_par_iter()
        .map(|i| {
            let mut rng = config.replica_rng(i);
            replica_max(i, &mut rng).map_err(|e| e.context(format!("replica {i}")))
        })
        .collect();
    let maxima = maxima.into_iter().collect::<Result<Vec<f64>>>()?;
    NullDistribution::new(maxima, config.alpha)
}

/// Null distribution for a GPSS scan: replicas are drawn from the scanner's
/// GP at the observed points and rescanned with the same configuration.
pub fn gpss_null_distribution(
    scanner: &GpssScanner,
    data: &PointDataset,
    config: &RandomizationConfig,
) -> Result<NullDistribution> {
    let sampler = GpSampler::new(scanner.model(), data)?;
    let gpss_config: &GpssConfig = scanner.config();
    randomization_test(config, |_, rng| {
        let y = sampler.sample(rng);
        if config.refit_per_replica {
            let replica = data.with_responses(y)?;
            let model: GpModel = fit_hyperparameters(&replica, &gpss_config.fit)?;
            GpssScanner::new(model, &replica, gpss_config)?.max_score(replica.y())
        } else {
            scanner.max_score(&y)
        }
    })
}

/// Null distribution for an MDTS scan: replicas are drawn cell-wise from
/// `Poisson(mu)` and rescanned with the same configuration.
pub fn mdts_null_distribution(
    attributes: &[Attribute],
    base: &BaselineTensor,
    mdts_config: &MdtsConfig,
    cp_config: &CpConfig,
    config: &RandomizationConfig,
) -> Result<NullDistribution> {
    let sampler = PoissonSampler::new(attributes.to_vec(), base.clone())?;
    randomization_test(config, |_, rng| {
        let replica = sampler.sample(rng)?;
        let refit;
        let replica_base = if config.refit_per_replica && !replica.is_empty() {
            refit = cp_decompose(&replica, cp_config)?;
            &refit
        } else {
            base
        };
        Ok(mdts_scan(&replica, replica_base, mdts_config)?
            .first()
            .map_or(0.0, |r| r.score))
    })
}
