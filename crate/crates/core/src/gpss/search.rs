//! Subset search inside one neighbourhood.
//!
//! Both searches work on the precision form of the residual system:
//! `z = Sigma^-1 r` and `Q = Sigma^-1`. A mask `w` then has
//! `a = sum_{i in w} z_i` and `b = sum_{i,j in w} Q_ij`, so masks can be
//! scored and updated one bit at a time.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::gp::PosteriorMoments;
use crate::stats::{meanshift_from_moments, ScoreValue};

/// Inclusion bits over a neighbourhood's members.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SubsetMask {
    pub bits: Vec<bool>,
}

impl SubsetMask {
    pub fn from_bits(bits: Vec<bool>) -> Self {
        SubsetMask { bits }
    }

    fn from_code(code: u64, k: usize) -> Self {
        SubsetMask {
            bits: (0..k).map(|i| code >> i & 1 == 1).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Selected positions.
    pub fn selected(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| self.bits[i]).collect()
    }

    /// Bit `i` is the `2^i` digit; used as the canonical tie-break order.
    fn code(&self) -> u64 {
        self.bits
            .iter()
            .enumerate()
            .fold(0, |acc, (i, &b)| if b { acc | 1 << i } else { acc })
    }
}

/// Search settings shared by the exhaustive and iterative searches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchOptions {
    pub two_sided: bool,
    /// Subtracted from the score once per selected point.
    pub penalty: f64,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            two_sided: true,
            penalty: 0.0,
        }
    }
}

/// Largest neighbourhood the exhaustive search accepts.
pub const MAX_EXHAUSTIVE_K: usize = 24;

/// Residual system in precision form.
#[derive(Debug, Clone)]
pub struct PrecisionSystem {
    pub z: DVector<f64>,
    pub precision: DMatrix<f64>,
}

impl PrecisionSystem {
    /// From predictive moments and the responses at the same points.
    pub fn from_posterior(post: &PosteriorMoments, y: &[f64]) -> Result<Self> {
        let k = post.mu.len();
        if y.len() != k {
            return Err(Error::InvalidSubset(format!(
                "{} responses for {} posterior points",
                y.len(),
                k
            )));
        }
        let chol = nalgebra::Cholesky::new(post.sigma.clone())
            .ok_or_else(|| Error::Decomposition("posterior covariance is not positive definite".into()))?;
        let r = DVector::from_iterator(k, y.iter().zip(post.mu.iter()).map(|(a, b)| a - b));
        Ok(PrecisionSystem {
            z: chol.solve(&r),
            precision: chol.inverse(),
        })
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    /// Score of a mask, summed in index order.
    pub fn score_mask(&self, mask: &SubsetMask, opts: SearchOptions) -> ScoreValue {
        let sel = mask.selected();
        let a: f64 = sel.iter().map(|&i| self.z[i]).sum();
        let b: f64 = sel
            .iter()
            .map(|&i| sel.iter().map(|&j| self.precision[(i, j)]).sum::<f64>())
            .sum();
        penalized(meanshift_from_moments(a, b, opts.two_sided), sel.len(), opts)
    }
}

fn penalized(mut s: ScoreValue, size: usize, opts: SearchOptions) -> ScoreValue {
    s.score -= opts.penalty * size as f64;
    s
}

/// Exact argmax over all `2^k - 1` nonempty masks (Gray-code order).
/// Equal scores go to the mask with the smallest binary code.
pub fn exhaustive_search(sys: &PrecisionSystem, opts: SearchOptions) -> Result<(SubsetMask, ScoreValue)> {
    let k = sys.len();
    if k == 0 {
        return Err(Error::InvalidSubset("empty neighbourhood".into()));
    }
    if k > MAX_EXHAUSTIVE_K {
        return Err(Error::Config(format!(
            "exhaustive search over k = {k} members exceeds the limit of {MAX_EXHAUSTIVE_K}"
        )));
    }
    let q = &sys.precision;
    let mut inside = vec![false; k];
    let mut t = vec![0.0; k]; // Q w
    let (mut a, mut b, mut size) = (0.0, 0.0, 0usize);
    let mut best_code = 0u64;
    let mut best_score = f64::NEG_INFINITY;
    for g in 1u64..(1u64 << k) {
        let i = g.trailing_zeros() as usize;
        if inside[i] {
            for (j, tj) in t.iter_mut().enumerate() {
                *tj -= q[(j, i)];
            }
            b -= 2.0 * t[i] + q[(i, i)];
            a -= sys.z[i];
            size -= 1;
        } else {
            b += 2.0 * t[i] + q[(i, i)];
            for (j, tj) in t.iter_mut().enumerate() {
                *tj += q[(j, i)];
            }
            a += sys.z[i];
            size += 1;
        }
        inside[i] = !inside[i];
        let code = g ^ (g >> 1);
        let s = meanshift_from_moments(a, b, opts.two_sided).score - opts.penalty * size as f64;
        if s > best_score || (s == best_score && code < best_code) {
            best_score = s;
            best_code = code;
        }
    }
    let mask = SubsetMask::from_code(best_code, k);
    let score = sys.score_mask(&mask, opts);
    Ok((mask, score))
}

/// Coordinate ascent over mask bits from random starting masks. Each step
/// sets the shift to its conditional optimum for the current mask, then
/// flips the single bit with the largest positive fixed-shift gain.
/// Returns the best local optimum and one score trace per restart.
pub fn iterative_search<R: Rng + ?Sized>(
    sys: &PrecisionSystem,
    restarts: usize,
    opts: SearchOptions,
    rng: &mut R,
) -> Result<(SubsetMask, ScoreValue, Vec<Vec<f64>>)> {
    let k = sys.len();
    if k == 0 {
        return Err(Error::InvalidSubset("empty neighbourhood".into()));
    }
    if restarts == 0 {
        return Err(Error::Config("at least one restart is required".into()));
    }
    let q = &sys.precision;
    let mut best: Option<(SubsetMask, ScoreValue)> = None;
    let mut traces = Vec::with_capacity(restarts);

    for _ in 0..restarts {
        let mut bits = random_nonempty_mask(k, rng);
        let mut t: Vec<f64> = (0..k)
            .map(|i| (0..k).filter(|&j| bits[j]).map(|j| q[(i, j)]).sum())
            .collect();
        let mut a: f64 = (0..k).filter(|&i| bits[i]).map(|i| sys.z[i]).sum();
        let mut b: f64 = (0..k).filter(|&i| bits[i]).map(|i| t[i]).sum();
        let mut size = bits.iter().filter(|&&x| x).count();
        let mut current = meanshift_from_moments(a, b, opts.two_sided);
        let mut trace = vec![current.score - opts.penalty * size as f64];

        for _ in 0..(4 * k * k + 16) {
            let beta = current.effect;
            let mut pick: Option<(usize, f64)> = None;
            for i in 0..k {
                let s = if bits[i] { -1.0 } else { 1.0 };
                if bits[i] && size == 1 {
                    continue;
                }
                let gain = beta * s * sys.z[i] - 0.5 * beta * beta * (2.0 * s * t[i] + q[(i, i)]) - s * opts.penalty;
                if pick.is_none_or(|(_, g)| gain > g) {
                    pick = Some((i, gain));
                }
            }
            let Some((i, gain)) = pick else { break };
            let scale = 1.0 + trace.last().copied().unwrap_or(0.0).abs();
            if gain <= 1e-12 * scale {
                break;
            }
            if bits[i] {
                for (j, tj) in t.iter_mut().enumerate() {
                    *tj -= q[(j, i)];
                }
                b -= 2.0 * t[i] + q[(i, i)];
                a -= sys.z[i];
                size -= 1;
            } else {
                b += 2.0 * t[i] + q[(i, i)];
                for (j, tj) in t.iter_mut().enumerate() {
                    *tj += q[(j, i)];
                }
                a += sys.z[i];
                size += 1;
            }
            bits[i] = !bits[i];
            current = meanshift_from_moments(a, b, opts.two_sided);
            trace.push(current.score - opts.penalty * size as f64);
        }

        let mask = SubsetMask::from_bits(bits);
        let score = sys.score_mask(&mask, opts);
        let better = match &best {
            None => true,
            Some((bm, bs)) => score.score > bs.score || (score.score == bs.score && mask.code() < bm.code()),
        };
        if better {
            best = Some((mask, score));
        }
        traces.push(trace);
    }
    let (mask, score) = best.expect("restarts >= 1");
    Ok((mask, score, traces))
}

fn random_nonempty_mask<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<bool> {
    loop {
        let bits: Vec<bool> = (0..k).map(|_| rng.random_bool(0.5)).collect();
        if bits.iter().any(|&b| b) {
            return bits;
        }
    }
}

/// Exhaustive search from predictive moments and the observed responses.
pub fn scan_neighborhood_exhaustive(
    post: &PosteriorMoments,
    y: &[f64],
    opts: SearchOptions,
) -> Result<(SubsetMask, ScoreValue)> {
    exhaustive_search(&PrecisionSystem::from_posterior(post, y)?, opts)
}

/// Iterative search from predictive moments and the observed responses.
pub fn scan_neighborhood_iterative<R: Rng + ?Sized>(
    post: &PosteriorMoments,
    y: &[f64],
    restarts: usize,
    opts: SearchOptions,
    rng: &mut R,
) -> Result<(SubsetMask, ScoreValue)> {
    let sys = PrecisionSystem::from_posterior(post, y)?;
    iterative_search(&sys, restarts, opts, rng).map(|(m, s, _)| (m, s))
}
