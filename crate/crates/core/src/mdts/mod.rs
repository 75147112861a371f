//! Multidimensional tensor scan: Cartesian-product subspaces searched by
//! exact per-attribute conditional optimization with random restarts.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{ebp_score_unchecked, PoissonAggregate};
use crate::tensor::{BaselineTensor, CaseTensor};

/// One nonempty value set per attribute; a record belongs to the subspace
/// when every one of its values lies in the corresponding set.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Subspace {
    sets: Vec<Vec<bool>>,
}

impl Subspace {
    pub fn new(sets: Vec<Vec<bool>>) -> Result<Self> {
        if let Some(a) = sets.iter().position(|s| !s.iter().any(|&b| b)) {
            return Err(Error::InvalidSubset(format!("attribute {a} has an empty value set")));
        }
        Ok(Subspace { sets })
    }

    /// Every value of every attribute.
    pub fn full(arities: &[usize]) -> Self {
        Subspace {
            sets: arities.iter().map(|&n| vec![true; n]).collect(),
        }
    }

    /// From explicit value lists.
    pub fn from_values(arities: &[usize], values: &[Vec<usize>]) -> Result<Self> {
        if arities.len() != values.len() {
            return Err(Error::InvalidSubset("one value list per attribute is required".into()));
        }
        let mut sets = Vec::with_capacity(arities.len());
        for (a, (&n, vals)) in arities.iter().zip(values).enumerate() {
            let mut s = vec![false; n];
            for &v in vals {
                if v >= n {
                    return Err(Error::InvalidSubset(format!(
                        "value {v} out of range for attribute {a}"
                    )));
                }
                s[v] = true;
            }
            sets.push(s);
        }
        Self::new(sets)
    }

    pub fn sets(&self) -> &[Vec<bool>] {
        &self.sets
    }

    pub fn values(&self, attr: usize) -> Vec<usize> {
        let s = &self.sets[attr];
        (0..s.len()).filter(|&v| s[v]).collect()
    }

    pub fn contains(&self, cell: &[usize]) -> bool {
        cell.iter().zip(&self.sets).all(|(&v, s)| s[v])
    }

    /// Number of grid cells covered.
    pub fn num_cells(&self) -> f64 {
        self.sets
            .iter()
            .map(|s| s.iter().filter(|&&b| b).count() as f64)
            .product()
    }

    fn intersection_cells(&self, other: &Subspace) -> f64 {
        self.sets
            .iter()
            .zip(&other.sets)
            .map(|(a, b)| a.iter().zip(b).filter(|(x, y)| **x && **y).count() as f64)
            .product()
    }

    pub fn overlaps(&self, other: &Subspace) -> bool {
        self.intersection_cells(other) > 0.0
    }

    /// Jaccard index of the two cell sets.
    pub fn cell_jaccard(&self, other: &Subspace) -> f64 {
        let inter = self.intersection_cells(other);
        let union = self.num_cells() + other.num_cells() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    fn is_valid_for(&self, arities: &[usize]) -> bool {
        self.sets.len() == arities.len() && self.sets.iter().zip(arities).all(|(s, &n)| s.len() == n)
    }
}

impl fmt::Display for Subspace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (a, s) in self.sets.iter().enumerate() {
            if a > 0 {
                write!(f, " x ")?;
            }
            let vals: Vec<String> = (0..s.len()).filter(|&v| s[v]).map(|v| v.to_string()).collect();
            write!(f, "{{{}}}", vals.join(","))?;
        }
        Ok(())
    }
}

/// Restricts the time attribute to trailing windows (prospective mode).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub attribute: usize,
    /// Longest allowed window, in bins.
    pub max_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MdtsConfig {
    pub restarts: usize,
    pub seed: u64,
    pub time_window: Option<TimeWindow>,
    /// Shuffle the attribute order on every cycle instead of ascending order.
    pub randomize_order: bool,
}

impl Default for MdtsConfig {
    fn default() -> Self {
        MdtsConfig {
            restarts: 50,
            seed: 0,
            time_window: None,
            randomize_order: false,
        }
    }
}

/// A locally optimal subspace with its support and score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdtsScanResult {
    pub subspace: Subspace,
    pub score: f64,
    /// Estimated relative risk `q_hat`.
    pub effect: f64,
    pub p_value: Option<f64>,
    pub count: f64,
    pub baseline: f64,
}

/// Observed and expected totals over a subspace. Counts are summed in
/// record order; the expectation covers every member cell.
pub fn subspace_aggregate(tensor: &CaseTensor, base: &BaselineTensor, s: &Subspace) -> Result<PoissonAggregate> {
    let arities = tensor.arities();
    if !s.is_valid_for(&arities) || arities != base.arities() {
        return Err(Error::InvalidSubset(
            "subspace, tensor and baseline shapes differ".into(),
        ));
    }
    let count: f64 = tensor
        .records()
        .iter()
        .filter(|r| s.contains(&r.cell))
        .map(|r| r.count as f64)
        .sum();
    PoissonAggregate::new(count, base.mass(&s.sets))
}

fn score_of(tensor: &CaseTensor, base: &BaselineTensor, s: &Subspace) -> Result<(f64, f64, f64, f64)> {
    let agg = subspace_aggregate(tensor, base, s)?;
    let v = ebp_score_unchecked(agg.count, agg.baseline);
    Ok((v.score, v.effect, agg.count, agg.baseline))
}

/// Best value set for attribute `attr` with all other attributes fixed.
///
/// Values are ranked by `C_v / B_v` and only the prefixes of that ranking
/// are scored; for the expectation-based Poisson score the optimum over all
/// nonempty value sets is always such a prefix. Equal ratios rank by value
/// index, equal-score prefixes go to the longest.
pub fn ltss_conditional_optimize(
    tensor: &CaseTensor,
    base: &BaselineTensor,
    s: &Subspace,
    attr: usize,
) -> Result<Subspace> {
    let arities = tensor.arities();
    if !s.is_valid_for(&arities) || arities != base.arities() {
        return Err(Error::InvalidSubset(
            "subspace, tensor and baseline shapes differ".into(),
        ));
    }
    if attr >= arities.len() {
        return Err(Error::InvalidSubset(format!("attribute {attr} out of range")));
    }
    let (counts, masses) = value_aggregates(tensor, base, s, attr);
    let mut order: Vec<usize> = (0..arities[attr]).collect();
    order.sort_by(|&u, &v| {
        (counts[v] * masses[u])
            .total_cmp(&(counts[u] * masses[v]))
            .then(u.cmp(&v))
    });
    let (mut c, mut b) = (0.0, 0.0);
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (len, &v) in order.iter().enumerate() {
        c += counts[v];
        b += masses[v];
        let score = ebp_score_unchecked(c, b).score;
        if score >= best.0 {
            best = (score, len + 1);
        }
    }
    let mut set = vec![false; arities[attr]];
    for &v in &order[..best.1] {
        set[v] = true;
    }
    let mut sets = s.sets.clone();
    sets[attr] = set;
    Ok(Subspace { sets })
}

/// Per-value counts and expectations for `attr` given the other sets.
fn value_aggregates(tensor: &CaseTensor, base: &BaselineTensor, s: &Subspace, attr: usize) -> (Vec<f64>, Vec<f64>) {
    let mut counts = vec![0.0; tensor.arities()[attr]];
    for r in tensor.records() {
        let inside = r
            .cell
            .iter()
            .zip(&s.sets)
            .enumerate()
            .all(|(a, (&v, set))| a == attr || set[v]);
        if inside {
            counts[r.cell[attr]] += r.count as f64;
        }
    }
    (counts, base.value_masses(attr, &s.sets))
}

/// Best trailing window of the time attribute, other attributes fixed.
/// Equal scores go to the longer window.
fn best_trailing_window(tensor: &CaseTensor, base: &BaselineTensor, s: &Subspace, tw: TimeWindow) -> Subspace {
    let (counts, masses) = value_aggregates(tensor, base, s, tw.attribute);
    let bins = counts.len();
    let (mut c, mut b) = (0.0, 0.0);
    let mut best = (f64::NEG_INFINITY, 1usize);
    for len in 1..=tw.max_len.min(bins) {
        c += counts[bins - len];
        b += masses[bins - len];
        let score = ebp_score_unchecked(c, b).score;
        if score >= best.0 {
            best = (score, len);
        }
    }
    let mut sets = s.sets.clone();
    sets[tw.attribute] = trailing(bins, best.1);
    Subspace { sets }
}

fn trailing(bins: usize, len: usize) -> Vec<bool> {
    (0..bins).map(|v| v + len >= bins).collect()
}

fn random_subspace<R: Rng + ?Sized>(arities: &[usize], tw: Option<TimeWindow>, rng: &mut R) -> Subspace {
    let sets = arities
        .iter()
        .enumerate()
        .map(|(a, &n)| match tw {
            Some(t) if t.attribute == a => trailing(n, rng.random_range(1..=t.max_len.min(n))),
            _ => loop {
                let s: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
                if s.iter().any(|&b| b) {
                    break s;
                }
            },
        })
        .collect();
    Subspace { sets }
}

/// Runs the restarts and returns the distinct local optima ranked by score
/// (descending, ties by subspace order) together with one score trace per
/// restart.
pub fn mdts_scan_with_traces(
    tensor: &CaseTensor,
    base: &BaselineTensor,
    config: &MdtsConfig,
) -> Result<(Vec<MdtsScanResult>, Vec<Vec<f64>>)> {
    let arities = tensor.arities();
    if arities != base.arities() {
        return Err(Error::Config(format!(
            "tensor arities {arities:?} do not match baseline {:?}",
            base.arities()
        )));
    }
    if config.restarts == 0 {
        return Err(Error::Config("at least one restart is required".into()));
    }
    if let Some(tw) = config.time_window {
        if tw.attribute >= arities.len() || tw.max_len == 0 {
            return Err(Error::Config(format!("invalid time window {tw:?}")));
        }
    }

    let runs: Vec<Result<(Subspace, Vec<f64>)>> = (0..config.restarts)
        .into_par_iter()
        .map(|restart| {
            let mut rng = ChaCha8Rng::seed_from_u64(
                config
                    .seed
                    .wrapping_add((restart as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)),
            );
            local_optimum(tensor, base, config, &arities, &mut rng)
        })
        .collect();

    let mut optima: BTreeMap<Subspace, ()> = BTreeMap::new();
    let mut traces = Vec::with_capacity(runs.len());
    for run in runs {
        let (s, trace) = run?;
        traces.push(trace);
        optima.insert(s, ());
    }
    let mut results = Vec::with_capacity(optima.len());
    for s in optima.into_keys() {
        let (score, effect, count, baseline) = score_of(tensor, base, &s)?;
        results.push(MdtsScanResult {
            subspace: s,
            score,
            effect,
            p_value: None,
            count,
            baseline,
        });
    }
    results.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.subspace.cmp(&b.subspace)));
    Ok((results, traces))
}

pub fn mdts_scan(tensor: &CaseTensor, base: &BaselineTensor, config: &MdtsConfig) -> Result<Vec<MdtsScanResult>> {
    mdts_scan_with_traces(tensor, base, config).map(|(r, _)| r)
}

fn local_optimum<R: Rng + ?Sized>(
    tensor: &CaseTensor,
    base: &BaselineTensor,
    config: &MdtsConfig,
    arities: &[usize],
    rng: &mut R,
) -> Result<(Subspace, Vec<f64>)> {
    let mut current = random_subspace(arities, config.time_window, rng);
    let mut score = score_of(tensor, base, &current)?.0;
    let mut trace = vec![score];
    let mut order: Vec<usize> = (0..arities.len()).collect();
    loop {
        if config.randomize_order {
            order.shuffle(rng);
        }
        let mut improved = false;
        for &a in &order {
            let candidate = match config.time_window {
                Some(tw) if tw.attribute == a => best_trailing_window(tensor, base, &current, tw),
                _ => ltss_conditional_optimize(tensor, base, &current, a)?,
            };
            if candidate == current {
                continue;
            }
            let cand_score = score_of(tensor, base, &candidate)?.0;
            if cand_score > score {
                current = candidate;
                score = cand_score;
                improved = true;
                trace.push(score);
            }
        }
        if !improved {
            return Ok((current, trace));
        }
    }
}

/// Greedy non-overlapping selection from ranked results.
pub fn non_overlapping(results: &[MdtsScanResult]) -> Vec<MdtsScanResult> {
    let mut kept: Vec<MdtsScanResult> = Vec::new();
    for r in results {
        if kept.iter().all(|k| !k.subspace.overlaps(&r.subspace)) {
            kept.push(r.clone());
        }
    }
    kept
}
