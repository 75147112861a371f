use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{GpModel, PointDataset};
use crate::error::{Error, Result};
use crate::linalg::{jittered_cholesky, symmetrize};

/// Predictive moments of the observations at a subset given the rest.
#[derive(Debug, Clone)]
pub struct PosteriorMoments {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub indices: Vec<usize>,
}

/// Predictive mean and covariance of `f + eps` at the points `subset`,
/// conditioned on every observed point outside `subset`. Missing points never
/// condition. With nothing to condition on, the prior moments are returned.
pub fn posterior_conditional(model: &GpModel, data: &PointDataset, subset: &[usize]) -> Result<PosteriorMoments> {
    if subset.is_empty() {
        return Err(Error::InvalidSubset("posterior subset is empty".into()));
    }
    if let Some(&bad) = subset.iter().find(|&&i| i >= data.len()) {
        return Err(Error::InvalidSubset(format!(
            "index {bad} outside dataset of {}",
            data.len()
        )));
    }
    let mut in_subset = vec![false; data.len()];
    for &i in subset {
        in_subset[i] = true;
    }
    let cond: Vec<usize> = data.observed_indices().into_iter().filter(|&i| !in_subset[i]).collect();

    let x = data.x();
    let mut sigma = model.obs_cov(x, subset);
    let mut mu = DVector::from_element(subset.len(), model.mean);

    if !cond.is_empty() {
        let kcc = model.obs_cov(x, &cond);
        let (chol, _) = jittered_cholesky(&kcc, model.signal_var)?;
        let kcs = model.cross_cov(x, &cond, subset);
        let resid = DVector::from_iterator(cond.len(), cond.iter().map(|&i| data.y()[i] - model.mean));
        let alpha = chol.solve(&resid);
        mu += kcs.transpose() * alpha;
        let v = chol
            .l()
            .solve_lower_triangular(&kcs)
            .ok_or_else(|| Error::Conditioning("triangular solve failed".into()))?;
        sigma -= v.transpose() * v;
        symmetrize(&mut sigma);
    }
    ensure_positive_definite(&mut sigma, model.signal_var)?;
    Ok(PosteriorMoments {
        mu,
        sigma,
        indices: subset.to_vec(),
    })
}

/// Adds the smallest jitter from the escalation schedule that makes the
/// matrix factorizable; leaves it untouched when it already is.
pub(crate) fn ensure_positive_definite(m: &mut DMatrix<f64>, scale: f64) -> Result<()> {
    if Cholesky::new(m.clone()).is_some() {
        return Ok(());
    }
    let (_, jitter) = jittered_cholesky(m, scale)?;
    for i in 0..m.nrows() {
        m[(i, i)] += jitter;
    }
    Ok(())
}

/// Draws observation vectors from `N(mean, K + noise_var I)` at the observed
/// points of a dataset.
#[derive(Debug, Clone)]
pub struct GpSampler {
    mean: f64,
    observed: Vec<usize>,
    len: usize,
    chol: Cholesky<f64, Dyn>,
}

impl GpSampler {
    pub fn new(model: &GpModel, data: &PointDataset) -> Result<Self> {
        let observed = data.observed_indices();
        if observed.is_empty() {
            return Err(Error::Config("no observed points to sample".into()));
        }
        let k = model.obs_cov(data.x(), &observed);
        let (chol, _) = jittered_cholesky(&k, model.signal_var)?;
        Ok(GpSampler {
            mean: model.mean,
            observed,
            len: data.len(),
            chol,
        })
    }

    /// One draw; unobserved positions are NaN.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let m = self.observed.len();
        let z = DVector::from_iterator(m, (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let draw = self.chol.l() * z;
        let mut y = vec![f64::NAN; self.len];
        for (k, &i) in self.observed.iter().enumerate() {
            y[i] = self.mean + draw[k];
        }
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn noiseless_interpolation_at_duplicate_location() {
        let x = DMatrix::from_row_slice(4, 1, &[0.0, 1.0, 1.0, 3.0]);
        let data = PointDataset::complete(x, vec![0.5, 9.0, 2.25, -1.0]).unwrap();
        let model = GpModel::new(0.0, 1.0, vec![1.0], 1e-12).unwrap();
        let post = posterior_conditional(&model, &data, &[1]).unwrap();
        assert!((post.mu[0] - 2.25).abs() < 1e-6, "mu {}", post.mu[0]);
    }

    #[test]
    fn empty_conditioning_set_gives_prior() {
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let data = PointDataset::new(x, vec![3.0, 0.0], vec![true, false]).unwrap();
        let model = GpModel::new(1.0, 2.0, vec![1.0], 0.5).unwrap();
        let post = posterior_conditional(&model, &data, &[0, 1]).unwrap();
        assert_eq!(post.mu.as_slice(), &[1.0, 1.0]);
        assert_eq!(post.sigma[(0, 0)], 2.5);
        assert_eq!(post.sigma[(0, 1)], 2.0 * (-0.5f64).exp());
    }

    #[test]
    fn variance_never_exceeds_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let n = 15;
            let x = DMatrix::from_fn(n, 2, |_, _| rng.random_range(0.0..4.0));
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let data = PointDataset::complete(x, y).unwrap();
            let model = GpModel::new(0.0, 1.0, vec![0.7, 1.5], 0.05).unwrap();
            let subset = [0, 3, 7];
            let post = posterior_conditional(&model, &data, &subset).unwrap();
            for k in 0..subset.len() {
                assert!(post.sigma[(k, k)] <= 1.05 + 1e-9);
            }
            assert!(Cholesky::new(post.sigma.clone()).is_some());
        }
    }

    #[test]
    fn conditioning_order_does_not_matter() {
        let x = DMatrix::from_row_slice(5, 1, &[0.0, 0.4, 1.3, 2.0, 2.2]);
        let y = vec![0.1, -0.3, 0.8, 1.1, 0.9];
        let model = GpModel::new(0.0, 1.0, vec![0.9], 0.1).unwrap();
        let a = posterior_conditional(&model, &PointDataset::complete(x, y.clone()).unwrap(), &[2]).unwrap();
        let perm = [4usize, 0, 2, 3, 1];
        let xp = DMatrix::from_fn(5, 1, |i, _| [0.0, 0.4, 1.3, 2.0, 2.2][perm[i]]);
        let yp: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
        let b = posterior_conditional(&model, &PointDataset::complete(xp, yp).unwrap(), &[2]).unwrap();
        assert!((a.mu[0] - b.mu[0]).abs() < 1e-12);
        assert!((a.sigma[(0, 0)] - b.sigma[(0, 0)]).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_subsets() {
        let data = PointDataset::complete(DMatrix::from_element(1, 1, 0.0), vec![1.0]).unwrap();
        let model = GpModel::new(0.0, 1.0, vec![1.0], 0.1).unwrap();
        assert!(posterior_conditional(&model, &data, &[]).is_err());
        assert!(posterior_conditional(&model, &data, &[3]).is_err());
    }
}
