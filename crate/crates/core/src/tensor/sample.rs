use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Poisson;

use super::{aggregate_records, Attribute, BaselineTensor, CaseTensor};
use crate::error::{Error, Result};

/// Draws independent `Poisson(mu(cell))` counts for every grid cell.
///
/// The grid is never enumerated: the total is `Poisson(sum mu)` and each case
/// picks a mixture component (a CP term or the uniform floor) and then one
/// value per attribute, which is equivalent for a sum of separable terms.
#[derive(Debug, Clone)]
pub struct PoissonSampler {
    attributes: Vec<Attribute>,
    base: BaselineTensor,
}

impl PoissonSampler {
    pub fn new(attributes: Vec<Attribute>, base: BaselineTensor) -> Result<Self> {
        let arities: Vec<usize> = attributes.iter().map(|a| a.arity).collect();
        if arities != base.arities() {
            return Err(Error::Config(format!(
                "attribute arities {arities:?} do not match baseline {:?}",
                base.arities()
            )));
        }
        Ok(PoissonSampler { attributes, base })
    }

    pub fn baseline(&self) -> &BaselineTensor {
        &self.base
    }

    /// Null replica over the whole grid.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<CaseTensor> {
        let full: Vec<Vec<bool>> = self.base.arities().iter().map(|&n| vec![true; n]).collect();
        let cases = self.draw_cases(&full, 1.0, rng)?;
        aggregate_records(self.attributes.clone(), cases.into_iter().map(|c| (c, 1)))
    }

    /// Counts for cells inside the region drawn with mean `multiplier * mu`,
    /// all other cells with mean `mu`.
    pub fn sample_with_region<R: Rng + ?Sized>(
        &self,
        region: &[Vec<bool>],
        multiplier: f64,
        rng: &mut R,
    ) -> Result<CaseTensor> {
        if !(multiplier.is_finite() && multiplier >= 1.0) {
            return Err(Error::Config(format!(
                "region multiplier must be >= 1, got {multiplier}"
            )));
        }
        let full: Vec<Vec<bool>> = self.base.arities().iter().map(|&n| vec![true; n]).collect();
        let mut cases = self.draw_cases(&full, 1.0, rng)?;
        if multiplier > 1.0 {
            cases.extend(self.draw_cases(region, multiplier - 1.0, rng)?);
        }
        aggregate_records(self.attributes.clone(), cases.into_iter().map(|c| (c, 1)))
    }

    /// Cells of a Poisson process with intensity `scale * mu` restricted to
    /// the Cartesian product of `sets`.
    fn draw_cases<R: Rng + ?Sized>(&self, sets: &[Vec<bool>], scale: f64, rng: &mut R) -> Result<Vec<Vec<usize>>> {
        let base = &self.base;
        let n_attr = sets.len();
        let allowed: Vec<Vec<usize>> = sets.iter().map(|s| (0..s.len()).filter(|&v| s[v]).collect()).collect();
        if allowed.iter().any(|a| a.is_empty()) {
            return Err(Error::Config("sampling region has an empty attribute set".into()));
        }
        // Component masses: CP terms then the floor.
        let mut comp: Vec<f64> = (0..base.rank())
            .map(|r| {
                base.weights()[r]
                    * (0..n_attr)
                        .map(|a| allowed[a].iter().map(|&v| base.factor(a)[(v, r)]).sum::<f64>())
                        .product::<f64>()
            })
            .collect();
        comp.push(base.floor() * allowed.iter().map(|a| a.len() as f64).product::<f64>());
        let mass: f64 = comp.iter().sum::<f64>() * scale;
        if mass <= 0.0 {
            return Ok(Vec::new());
        }
        let n = Poisson::new(mass)
            .map_err(|e| Error::Config(format!("cannot sample Poisson({mass}): {e}")))?
            .sample(rng) as usize;
        if n == 0 {
            return Ok(Vec::new());
        }
        let pick_comp = WeightedIndex::new(&comp).map_err(|e| Error::Config(e.to_string()))?;
        let floor_comp = base.rank();
        // Per (component, attribute) value distributions, built lazily.
        let mut value_dists: Vec<Vec<Option<WeightedIndex<f64>>>> = vec![vec![None; n_attr]; base.rank()];
        let mut cases = Vec::with_capacity(n);
        for _ in 0..n {
            let r = pick_comp.sample(rng);
            let mut cell = Vec::with_capacity(n_attr);
            for a in 0..n_attr {
                let idx = if r == floor_comp {
                    rng.random_range(0..allowed[a].len())
                } else {
                    let slot = &mut value_dists[r][a];
                    if slot.is_none() {
                        let w: Vec<f64> = allowed[a].iter().map(|&v| base.factor(a)[(v, r)]).collect();
                        *slot = Some(WeightedIndex::new(&w).map_err(|e| Error::Config(e.to_string()))?);
                    }
                    slot.as_ref().unwrap().sample(rng)
                };
                cell.push(allowed[a][idx]);
            }
            cases.push(cell);
        }
        Ok(cases)
    }
}
