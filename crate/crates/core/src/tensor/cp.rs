//! Nonnegative CP baseline fitted by hierarchical alternating least squares.
//!
//! The fit minimizes squared error over every grid cell (cells without
//! records count as zero) without materializing the grid: the loss expands
//! to `||X||^2 - 2 <X, M> + ||M||^2`, where `<X, M>` only touches records and
//! `||M||^2` comes from the factor Gram matrices.

use log::warn;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::CaseTensor;
use crate::error::{Error, Result};

/// Share of the total expected mass spread uniformly over the grid, so that
/// every cell has a strictly positive expectation.
pub const FLOOR_SHARE: f64 = 1e-3;

/// Initial mass of the random components relative to the total.
const INIT_SPREAD: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CpConfig {
    pub rank: usize,
    pub max_sweeps: usize,
    /// Relative objective decrease below which the fit stops.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for CpConfig {
    fn default() -> Self {
        CpConfig {
            rank: 5,
            max_sweeps: 500,
            tolerance: 1e-10,
            seed: 0,
        }
    }
}

/// Expected counts `mu(cell) = sum_r weight_r prod_a factor_a[v_a, r] + floor`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineTensor {
    arities: Vec<usize>,
    weights: Vec<f64>,
    /// One `arity x rank` matrix per attribute, columns summing to one.
    factors: Vec<DMatrix<f64>>,
    floor: f64,
    /// Squared-error objective after each sweep (empty for hand-built baselines).
    pub objective_trace: Vec<f64>,
    pub converged: bool,
}

impl BaselineTensor {
    /// Builds a baseline from explicit components. Columns are normalized to
    /// unit sum with the mass moved into the weights.
    pub fn from_components(
        arities: Vec<usize>,
        weights: Vec<f64>,
        factors: Vec<DMatrix<f64>>,
        floor: f64,
    ) -> Result<Self> {
        let rank = weights.len();
        if factors.len() != arities.len() {
            return Err(Error::Config("one factor matrix per attribute is required".into()));
        }
        for (a, (f, &arity)) in factors.iter().zip(&arities).enumerate() {
            if f.nrows() != arity || f.ncols() != rank {
                return Err(Error::Config(format!(
                    "factor {a} is {}x{}, expected {arity}x{rank}",
                    f.nrows(),
                    f.ncols()
                )));
            }
            if f.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Config(format!("factor {a} has negative or non-finite entries")));
            }
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || !floor.is_finite() || floor < 0.0 {
            return Err(Error::Config("weights and floor must be finite and nonnegative".into()));
        }
        let strictly_positive_component =
            (0..rank).any(|r| weights[r] > 0.0 && factors.iter().all(|f| f.column(r).min() > 0.0));
        if floor <= 0.0 && !strictly_positive_component {
            return Err(Error::Config("baseline must be strictly positive in every cell".into()));
        }
        let mut base = BaselineTensor {
            arities,
            weights,
            factors,
            floor,
            objective_trace: Vec::new(),
            converged: true,
        };
        base.normalize_columns();
        Ok(base)
    }

    /// Constant expectation `value` in every cell.
    pub fn constant(arities: Vec<usize>, value: f64) -> Result<Self> {
        let factors = arities.iter().map(|&n| DMatrix::from_element(n, 1, 1.0)).collect();
        Self::from_components(arities, vec![value], factors, 0.0)
    }

    fn normalize_columns(&mut self) {
        for r in 0..self.rank() {
            for f in &mut self.factors {
                let s: f64 = f.column(r).sum();
                if s > 0.0 {
                    f.column_mut(r).scale_mut(1.0 / s);
                    self.weights[r] *= s;
                } else {
                    self.weights[r] = 0.0;
                }
            }
        }
    }

    pub fn arities(&self) -> &[usize] {
        &self.arities
    }

    pub fn rank(&self) -> usize {
        self.weights.len()
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn factor(&self, attr: usize) -> &DMatrix<f64> {
        &self.factors[attr]
    }

    pub fn num_cells(&self) -> f64 {
        self.arities.iter().map(|&a| a as f64).product()
    }

    /// Expected count of one cell (unchecked).
    pub fn mu(&self, cell: &[usize]) -> f64 {
        let mut total = self.floor;
        for r in 0..self.rank() {
            let mut p = self.weights[r];
            for (f, &v) in self.factors.iter().zip(cell) {
                p *= f[(v, r)];
            }
            total += p;
        }
        total
    }

    /// Total expected count over the grid.
    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum::<f64>() + self.floor * self.num_cells()
    }

    /// Expected count summed over the Cartesian product of value sets, given
    /// as one inclusion mask per attribute.
    pub fn mass(&self, sets: &[Vec<bool>]) -> f64 {
        let mut total = self.floor
            * sets
                .iter()
                .map(|s| s.iter().filter(|&&b| b).count() as f64)
                .product::<f64>();
        for r in 0..self.rank() {
            let mut p = self.weights[r];
            for (f, s) in self.factors.iter().zip(sets) {
                p *= (0..s.len()).filter(|&v| s[v]).map(|v| f[(v, r)]).sum::<f64>();
            }
            total += p;
        }
        total
    }

    /// For attribute `attr`, the mass of `{v} x (other attributes' sets)` for
    /// every value `v`. The entry of `sets` at `attr` is ignored.
    pub fn value_masses(&self, attr: usize, sets: &[Vec<bool>]) -> Vec<f64> {
        let arity = self.arities[attr];
        let mut floor_part = self.floor;
        let mut comp: Vec<f64> = self.weights.clone();
        for (a, (f, s)) in self.factors.iter().zip(sets).enumerate() {
            if a == attr {
                continue;
            }
            floor_part *= s.iter().filter(|&&b| b).count() as f64;
            for (r, c) in comp.iter_mut().enumerate() {
                *c *= (0..s.len()).filter(|&v| s[v]).map(|v| f[(v, r)]).sum::<f64>();
            }
        }
        let f = &self.factors[attr];
        (0..arity)
            .map(|v| floor_part + comp.iter().enumerate().map(|(r, c)| c * f[(v, r)]).sum::<f64>())
            .collect()
    }

    /// Baseline for a window of time bins past the fitted range: the time
    /// factor rows for the new bins are the mean of the fitted rows.
    pub fn extrapolate_time(&self, time_attr: usize, bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::Config("time window must contain at least one bin".into()));
        }
        let old = &self.factors[time_attr];
        let mut factors = self.factors.clone();
        factors[time_attr] = DMatrix::from_fn(bins, self.rank(), |_, r| old.column(r).mean());
        let mut arities = self.arities.clone();
        arities[time_attr] = bins;
        let mut base = BaselineTensor::from_components(arities, self.weights.clone(), factors, self.floor)?;
        base.objective_trace = self.objective_trace.clone();
        base.converged = self.converged;
        Ok(base)
    }
}

/// `max(mu(cell), floor)`; checks the cell against the grid.
pub fn baseline_lookup(base: &BaselineTensor, cell: &[usize]) -> Result<f64> {
    if cell.len() != base.arities.len() {
        return Err(Error::Lookup(format!(
            "cell has {} values for {} attributes",
            cell.len(),
            base.arities.len()
        )));
    }
    if let Some((a, (&v, &n))) = cell.iter().zip(&base.arities).enumerate().find(|(_, (&v, &n))| v >= n) {
        return Err(Error::Lookup(format!(
            "value {v} out of range for attribute {a} (arity {n})"
        )));
    }
    Ok(base.mu(cell).max(base.floor))
}

/// Fits a nonnegative rank-`R` CP model to the counts and rescales it so the
/// total expected count equals the total observed count, with a share
/// [`FLOOR_SHARE`] of that mass spread uniformly as a floor.
pub fn cp_decompose(tensor: &CaseTensor, config: &CpConfig) -> Result<BaselineTensor> {
    let rank = config.rank;
    if rank == 0 {
        return Err(Error::Config("CP rank must be at least 1".into()));
    }
    if tensor.is_empty() {
        return Err(Error::Config("cannot fit a baseline to an empty tensor".into()));
    }
    let arities = tensor.arities();
    let n_attr = arities.len();
    let records = tensor.records();
    let counts: Vec<f64> = records.iter().map(|r| r.count as f64).collect();
    let total: f64 = counts.iter().sum();
    let x_norm2: f64 = counts.iter().map(|c| c * c).sum();

    // Component 0 starts at the independence model built from the marginals;
    // the others start as small random perturbations.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut factors: Vec<DMatrix<f64>> = arities
        .iter()
        .map(|&n| DMatrix::from_fn(n, rank, |_, _| rng.random_range(0.5..1.5)))
        .collect();
    for (a, f) in factors.iter_mut().enumerate() {
        let mut marginal = vec![0.0; arities[a]];
        for (rec, &y) in records.iter().zip(&counts) {
            marginal[rec.cell[a]] += y;
        }
        for (v, m) in marginal.into_iter().enumerate() {
            f[(v, 0)] = m / total;
        }
    }
    for r in 0..rank {
        let share = if r == 0 { 1.0 } else { INIT_SPREAD / (rank - 1) as f64 };
        let mass: f64 = factors.iter().map(|f| f.column(r).sum()).product();
        factors[0].column_mut(r).scale_mut(share * total / mass);
    }

    let grams = |fs: &[DMatrix<f64>]| fs.iter().map(|f| f.transpose() * f).collect::<Vec<_>>();
    let objective = |fs: &[DMatrix<f64>]| {
        let g = grams(fs);
        let mut model_norm2 = 0.0;
        for r in 0..rank {
            for s in 0..rank {
                model_norm2 += g.iter().map(|m| m[(r, s)]).product::<f64>();
            }
        }
        let inner: f64 = records
            .iter()
            .zip(&counts)
            .map(|(rec, &y)| {
                y * (0..rank)
                    .map(|r| fs.iter().zip(&rec.cell).map(|(f, &v)| f[(v, r)]).product::<f64>())
                    .sum::<f64>()
            })
            .sum();
        x_norm2 - 2.0 * inner + model_norm2
    };

    let mut trace = vec![objective(&factors)];
    let mut converged = false;
    let mut mttkrp = Vec::new();
    for _ in 0..config.max_sweeps {
        for a in 0..n_attr {
            let g = grams(&factors);
            let mut h = DMatrix::from_element(rank, rank, 1.0);
            for (b, gb) in g.iter().enumerate() {
                if b != a {
                    h.component_mul_assign(gb);
                }
            }
            mttkrp.clear();
            mttkrp.resize(arities[a] * rank, 0.0);
            for (rec, &y) in records.iter().zip(&counts) {
                let v = rec.cell[a];
                for r in 0..rank {
                    let mut p = y;
                    for (b, f) in factors.iter().enumerate() {
                        if b != a {
                            p *= f[(rec.cell[b], r)];
                        }
                    }
                    mttkrp[v * rank + r] += p;
                }
            }
            // Perturbation components first, so that ones the data does not
            // need are zeroed before the main component refits.
            let f = &mut factors[a];
            for r in (0..rank).rev() {
                let denom = h[(r, r)];
                if denom <= f64::MIN_POSITIVE {
                    continue;
                }
                for v in 0..arities[a] {
                    let mut num = mttkrp[v * rank + r];
                    for s in 0..rank {
                        if s != r {
                            num -= f[(v, s)] * h[(s, r)];
                        }
                    }
                    f[(v, r)] = (num / denom).max(0.0);
                }
            }
        }
        let obj = objective(&factors);
        let prev = *trace.last().unwrap();
        trace.push(obj);
        if prev - obj <= config.tolerance * prev.abs().max(1e-300) {
            converged = true;
            break;
        }
    }
    if !converged {
        warn!(
            "CP decomposition stopped after {} sweeps without converging",
            config.max_sweeps
        );
    }

    let cp_mass: f64 = (0..rank)
        .map(|r| factors.iter().map(|f| f.column(r).sum()).product::<f64>())
        .sum();
    let n_cells = tensor.num_cells();
    let (weights, floor) = if cp_mass > 0.0 {
        let w = (1.0 - FLOOR_SHARE) * total / cp_mass;
        (vec![w; rank], FLOOR_SHARE * total / n_cells)
    } else {
        (vec![0.0; rank], total / n_cells)
    };
    let mut base = BaselineTensor::from_components(arities, weights, factors, floor)?;
    base.objective_trace = trace;
    base.converged = converged;
    Ok(base)
}
