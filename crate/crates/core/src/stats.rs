//! Closed-form log-likelihood-ratio scores shared by both scans.
//!
//! Two alternatives are supported:
//!
//! * expectation-based Poisson (EBP): counts in `S` are `Poisson(q * mu_i)`
//!   with `q >= 1`. Maximizing `C log q - (q - 1) B` over `q` gives
//!   `q_hat = C / B` and `F = C log(C / B) + B - C` when `C > B`.
//! * Gaussian mean shift: residuals `r ~ N(beta * w, Sigma)`. With
//!   `a = w' Sigma^-1 r` and `b = w' Sigma^-1 w`, `beta_hat = a / b` and
//!   `F = a^2 / (2 b)`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Smallest expected count accepted by [`ebp_score`].
pub const MIN_BASELINE: f64 = 1e-12;

/// Observed and expected count totals over a subset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoissonAggregate {
    pub count: f64,
    pub baseline: f64,
}

impl PoissonAggregate {
    pub fn new(count: f64, baseline: f64) -> Result<Self> {
        let agg = PoissonAggregate { count, baseline };
        agg.validate()?;
        Ok(agg)
    }

    fn validate(&self) -> Result<()> {
        if !self.count.is_finite() || self.count < 0.0 {
            return Err(Error::InvalidAggregate(format!(
                "count must be finite and nonnegative, got {}",
                self.count
            )));
        }
        if !self.baseline.is_finite() || self.baseline < MIN_BASELINE {
            return Err(Error::InvalidAggregate(format!(
                "baseline must be finite and at least {MIN_BASELINE:e}, got {}",
                self.baseline
            )));
        }
        Ok(())
    }
}

/// A scored subset: the maximized log-likelihood ratio and the maximizing
/// effect size (`q_hat` for Poisson, `beta_hat` for Gaussian).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreValue {
    pub score: f64,
    pub effect: f64,
}

impl ScoreValue {
    pub const ZERO_SHIFT: ScoreValue = ScoreValue {
        score: 0.0,
        effect: 0.0,
    };
}

/// Expectation-based Poisson score, maximized over `q >= 1`.
pub fn ebp_score(agg: PoissonAggregate) -> Result<ScoreValue> {
    agg.validate()?;
    Ok(ebp_score_unchecked(agg.count, agg.baseline))
}

/// [`ebp_score`] without validation, for hot loops whose inputs are valid by
/// construction.
#[inline]
pub(crate) fn ebp_score_unchecked(c: f64, b: f64) -> ScoreValue {
    if c > b {
        let score = c * (c / b).ln() + b - c;
        ScoreValue {
            score: score.max(0.0),
            effect: c / b,
        }
    } else {
        ScoreValue {
            score: 0.0,
            effect: 1.0,
        }
    }
}

/// Residuals, their covariance, and the subset indicator for the Gaussian
/// mean-shift alternative.
#[derive(Debug, Clone)]
pub struct GaussianResidualSystem {
    pub residuals: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub mask: Vec<bool>,
}

impl GaussianResidualSystem {
    pub fn new(residuals: DVector<f64>, covariance: DMatrix<f64>, mask: Vec<bool>) -> Result<Self> {
        let n = residuals.len();
        if covariance.nrows() != n || covariance.ncols() != n || mask.len() != n {
            return Err(Error::InvalidSubset(format!(
                "dimension mismatch: {} residuals, {}x{} covariance, {} mask bits",
                n,
                covariance.nrows(),
                covariance.ncols(),
                mask.len()
            )));
        }
        if residuals.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Decomposition("non-finite residual system".into()));
        }
        Ok(GaussianResidualSystem {
            residuals,
            covariance,
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.residuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residuals.is_empty()
    }

    fn indicator(&self) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.mask.iter().map(|&b| if b { 1.0 } else { 0.0 }))
    }

    fn cholesky(&self) -> Result<Cholesky<f64, Dyn>> {
        Cholesky::new(self.covariance.clone())
            .ok_or_else(|| Error::Decomposition("covariance is not positive definite".into()))
    }
}

/// Gaussian mean-shift score. In one-sided mode only upward shifts count.
pub fn gaussian_meanshift_score(sys: &GaussianResidualSystem, two_sided: bool) -> Result<ScoreValue> {
    if !sys.mask.iter().any(|&b| b) {
        return Err(Error::InvalidSubset("subset is empty".into()));
    }
    let chol = sys.cholesky()?;
    let l = chol.l();
    let lr = l
        .solve_lower_triangular(&sys.residuals)
        .ok_or_else(|| Error::Decomposition("triangular solve failed".into()))?;
    let lw = l
        .solve_lower_triangular(&sys.indicator())
        .ok_or_else(|| Error::Decomposition("triangular solve failed".into()))?;
    let a = lw.dot(&lr);
    let b = lw.norm_squared();
    Ok(meanshift_from_moments(a, b, two_sided))
}

/// Score from `a = w' Sigma^-1 r` and `b = w' Sigma^-1 w`.
#[inline]
pub(crate) fn meanshift_from_moments(a: f64, b: f64, two_sided: bool) -> ScoreValue {
    if b <= 0.0 || (!two_sided && a <= 0.0) {
        return ScoreValue::ZERO_SHIFT;
    }
    ScoreValue {
        score: a * a / (2.0 * b),
        effect: a / b,
    }
}

/// Fixed-`beta` log-likelihood ratio `beta w' Sigma^-1 r - beta^2 w' Sigma^-1 w / 2`.
pub fn fixed_shift_llr(sys: &GaussianResidualSystem, beta: f64) -> Result<f64> {
    let chol = sys.cholesky()?;
    let w = sys.indicator();
    let u = chol.solve(&sys.residuals);
    let qw = chol.solve(&w);
    Ok(beta * w.dot(&u) - 0.5 * beta * beta * w.dot(&qw))
}

/// Change in the fixed-`beta` LLR from flipping each mask bit on its own,
/// holding every other bit and `beta` fixed.
pub fn pointwise_contributions(sys: &GaussianResidualSystem, beta: f64) -> Result<Vec<f64>> {
    if !beta.is_finite() {
        return Err(Error::InvalidSubset(format!("non-finite shift {beta}")));
    }
    let chol = sys.cholesky()?;
    let precision = chol.inverse();
    let u = chol.solve(&sys.residuals);
    let qw = &precision * sys.indicator();
    Ok((0..sys.len())
        .map(|i| {
            let s = if sys.mask[i] { -1.0 } else { 1.0 };
            beta * s * u[i] - 0.5 * beta * beta * (2.0 * s * qw[i] + precision[(i, i)])
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Golden-section maximization, used as an independent oracle.
    fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        let g = (5f64.sqrt() - 1.0) / 2.0;
        let mut x1 = hi - g * (hi - lo);
        let mut x2 = lo + g * (hi - lo);
        let (mut f1, mut f2) = (f(x1), f(x2));
        for _ in 0..200 {
            if f1 < f2 {
                lo = x1;
                x1 = x2;
                f1 = f2;
                x2 = lo + g * (hi - lo);
                f2 = f(x2);
            } else {
                hi = x2;
                x2 = x1;
                f2 = f1;
                x1 = hi - g * (hi - lo);
                f1 = f(x1);
            }
        }
        f(0.5 * (lo + hi)).max(f(lo)).max(f(hi))
    }

    #[test]
    fn ebp_no_elevation() {
        let s = ebp_score(PoissonAggregate::new(5.0, 5.0).unwrap()).unwrap();
        assert_eq!(s.score, 0.0);
        assert_eq!(s.effect, 1.0);
        let s = ebp_score(PoissonAggregate::new(3.0, 7.0).unwrap()).unwrap();
        assert_eq!(s.score, 0.0);
        assert_eq!(s.effect, 1.0);
    }

    #[test]
    fn ebp_doubled_counts() {
        let oracle = golden_max(|q| 10.0 * q.ln() - (q - 1.0) * 5.0, 1.0, 100.0);
        let s = ebp_score(PoissonAggregate::new(10.0, 5.0).unwrap()).unwrap();
        assert!((s.score - oracle).abs() < 1e-9);
        assert!((s.score - 1.931_471_805_599_453).abs() < 1e-12);
        assert!((s.effect - 2.0).abs() < 1e-15);
    }

    #[test]
    fn ebp_rejects_bad_aggregates() {
        assert!(PoissonAggregate::new(1.0, 0.0).is_err());
        assert!(PoissonAggregate::new(1.0, 1e-13).is_err());
        assert!(PoissonAggregate::new(-1.0, 1.0).is_err());
        assert!(PoissonAggregate::new(f64::NAN, 1.0).is_err());
        assert!(ebp_score(PoissonAggregate {
            count: 1.0,
            baseline: f64::INFINITY
        })
        .is_err());
    }

    #[test]
    fn ebp_homogeneous_in_joint_scaling() {
        for c in [0.5, 3.0, 12.0, 40.0] {
            for b in [0.2, 2.0, 9.0] {
                let base = ebp_score_unchecked(c, b).score;
                for k in [0.1, 2.0, 7.5] {
                    let scaled = ebp_score_unchecked(k * c, k * b).score;
                    assert!((scaled - k * base).abs() < 1e-9 * (1.0 + scaled.abs()));
                }
            }
        }
    }

    #[test]
    fn meanshift_zero_residuals() {
        let sys = GaussianResidualSystem::new(
            DVector::zeros(3),
            DMatrix::identity(3, 3) * 2.0,
            vec![true, false, true],
        )
        .unwrap();
        let s = gaussian_meanshift_score(&sys, true).unwrap();
        assert_eq!(s.score, 0.0);
        assert_eq!(s.effect, 0.0);
    }

    #[test]
    fn meanshift_single_point() {
        let sys =
            GaussianResidualSystem::new(DVector::from_vec(vec![2.0]), DMatrix::identity(1, 1), vec![true]).unwrap();
        let oracle = golden_max(|beta| 2.0 * beta - 0.5 * beta * beta, -50.0, 50.0);
        let s = gaussian_meanshift_score(&sys, true).unwrap();
        assert!((s.score - 2.0).abs() < 1e-12);
        assert!((s.score - oracle).abs() < 1e-9);
        assert!((s.effect - 2.0).abs() < 1e-12);
    }

    #[test]
    fn meanshift_identity_covariance() {
        // m selected points with residual c: F = m c^2 / 2.
        let (m, c) = (4usize, 1.5);
        let mut r = vec![0.3, -0.7];
        r.extend(std::iter::repeat_n(c, m));
        let mut w = vec![false, false];
        w.extend(std::iter::repeat_n(true, m));
        let n = r.len();
        let sys = GaussianResidualSystem::new(DVector::from_vec(r), DMatrix::identity(n, n), w).unwrap();
        let s = gaussian_meanshift_score(&sys, true).unwrap();
        assert!((s.score - m as f64 * c * c / 2.0).abs() < 1e-12);
        assert!((s.effect - c).abs() < 1e-12);
    }

    #[test]
    fn meanshift_one_sided_clamps_negative_shift() {
        let sys =
            GaussianResidualSystem::new(DVector::from_vec(vec![-2.0]), DMatrix::identity(1, 1), vec![true]).unwrap();
        assert_eq!(gaussian_meanshift_score(&sys, false).unwrap().score, 0.0);
        assert!((gaussian_meanshift_score(&sys, true).unwrap().score - 2.0).abs() < 1e-12);
    }

    #[test]
    fn meanshift_errors() {
        let empty =
            GaussianResidualSystem::new(DVector::from_vec(vec![1.0]), DMatrix::identity(1, 1), vec![false]).unwrap();
        assert!(matches!(
            gaussian_meanshift_score(&empty, true),
            Err(Error::InvalidSubset(_))
        ));
        let singular = GaussianResidualSystem::new(
            DVector::from_vec(vec![1.0, 1.0]),
            DMatrix::from_element(2, 2, 1.0),
            vec![true, true],
        )
        .unwrap();
        assert!(matches!(
            gaussian_meanshift_score(&singular, true),
            Err(Error::Decomposition(_))
        ));
        assert!(GaussianResidualSystem::new(DVector::zeros(2), DMatrix::identity(3, 3), vec![true; 2]).is_err());
    }

    #[test]
    fn contributions_vanish_at_zero_shift() {
        let sys = GaussianResidualSystem::new(
            DVector::from_vec(vec![1.0, -2.0, 0.5]),
            DMatrix::identity(3, 3),
            vec![true, false, false],
        )
        .unwrap();
        assert!(pointwise_contributions(&sys, 0.0).unwrap().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn contributions_signs() {
        let sys = GaussianResidualSystem::new(
            DVector::from_vec(vec![3.0, -1.0]),
            DMatrix::identity(2, 2),
            vec![false, false],
        )
        .unwrap();
        let d = pointwise_contributions(&sys, 1.0).unwrap();
        // Direct evaluation of the flipped LLRs: 3 - 1/2 and -1 - 1/2.
        assert!((d[0] - 2.5).abs() < 1e-12);
        assert!((d[1] + 1.5).abs() < 1e-12);
    }

    #[test]
    fn contributions_telescope() {
        let cov = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 1.5, 0.3, 0.1, 0.3, 1.0]);
        let r = DVector::from_vec(vec![1.2, -0.4, 2.2]);
        let beta = 0.8;
        let mut sys = GaussianResidualSystem::new(r, cov, vec![false, true, false]).unwrap();
        let start = fixed_shift_llr(&sys, beta).unwrap();
        let mut total = 0.0;
        for i in [0, 2, 1, 0] {
            total += pointwise_contributions(&sys, beta).unwrap()[i];
            sys.mask[i] = !sys.mask[i];
        }
        let end = fixed_shift_llr(&sys, beta).unwrap();
        assert!((end - start - total).abs() < 1e-12);
    }
}
