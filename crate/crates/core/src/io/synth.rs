use std::io::Write;

use chrono::NaiveDate;
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::aggregated::MISSING;
use super::cases::{CategoryDictionaries, DATE_COLUMN};
use crate::error::{Error, Result};
use crate::gp::{GpModel, GpSampler, PointDataset};
use crate::mdts::Subspace;
use crate::tensor::{Attribute, BaselineTensor, CaseTensor, PoissonSampler};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InjectionKind {
    /// Adds `magnitude` to every response in the region.
    AdditiveShift,
    /// Multiplies the expected count of every cell in the region by
    /// `magnitude`.
    MultiplicativeRisk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Region {
    Points(Vec<usize>),
    /// Points within `radius` (Euclidean, raw covariates) of `center`.
    Ball {
        center: Vec<f64>,
        radius: f64,
    },
    Subspace(Subspace),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InjectionSpec {
    pub kind: InjectionKind,
    pub region: Region,
    pub magnitude: f64,
    pub seed: u64,
}

impl InjectionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.magnitude.is_finite() && self.magnitude > 0.0) {
            return Err(Error::Config(format!(
                "injection magnitude must be positive, got {}",
                self.magnitude
            )));
        }
        if self.kind == InjectionKind::MultiplicativeRisk && self.magnitude <= 1.0 {
            return Err(Error::Config(format!(
                "relative risk must exceed 1, got {}",
                self.magnitude
            )));
        }
        Ok(())
    }
}

/// Indices of the points of `x` inside a ball.
pub fn ball_members(x: &DMatrix<f64>, center: &[f64], radius: f64) -> Result<Vec<usize>> {
    if center.len() != x.ncols() {
        return Err(Error::Config(format!(
            "ball centre has {} coordinates, data has {}",
            center.len(),
            x.ncols()
        )));
    }
    Ok((0..x.nrows())
        .filter(|&i| {
            let d2: f64 = center.iter().enumerate().map(|(d, c)| (x[(i, d)] - c).powi(2)).sum();
            d2 <= radius * radius
        })
        .collect())
}

/// Draws responses from `model` at the observed points of `template`, then
/// shifts the observed points of the region. Returns the dataset and the
/// shifted indices.
pub fn synth_points(
    model: &GpModel,
    template: &PointDataset,
    spec: &InjectionSpec,
) -> Result<(PointDataset, Vec<usize>)> {
    spec.validate()?;
    if spec.kind != InjectionKind::AdditiveShift {
        return Err(Error::Config("point data takes an additive-shift injection".into()));
    }
    let region = match &spec.region {
        Region::Points(p) => {
            if let Some(&i) = p.iter().find(|&&i| i >= template.len()) {
                return Err(Error::Config(format!("region point {i} outside the dataset")));
            }
            p.clone()
        }
        Region::Ball { center, radius } => ball_members(template.x(), center, *radius)?,
        Region::Subspace(_) => return Err(Error::Config("point data takes a point or ball region".into())),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut y = GpSampler::new(model, template)?.sample(&mut rng);
    let mut truth: Vec<usize> = region.into_iter().filter(|&i| template.is_observed(i)).collect();
    truth.sort_unstable();
    truth.dedup();
    for &i in &truth {
        y[i] += spec.magnitude;
    }
    Ok((template.with_responses(y)?, truth))
}

/// Draws a case tensor from `Poisson(mu)` with the region's cells at
/// `Poisson(q mu)`.
pub fn synth_cases(
    attributes: &[Attribute],
    base: &BaselineTensor,
    spec: &InjectionSpec,
) -> Result<(CaseTensor, Subspace)> {
    spec.validate()?;
    if spec.kind != InjectionKind::MultiplicativeRisk {
        return Err(Error::Config("case data takes a multiplicative-risk injection".into()));
    }
    let Region::Subspace(region) = &spec.region else {
        return Err(Error::Config("case data takes a subspace region".into()));
    };
    let arities: Vec<usize> = attributes.iter().map(|a| a.arity).collect();
    if region.sets().len() != arities.len() || region.sets().iter().zip(&arities).any(|(s, &n)| s.len() != n) {
        return Err(Error::Config("injection region does not fit the attribute grid".into()));
    }
    let sampler = PoissonSampler::new(attributes.to_vec(), base.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tensor = sampler.sample_with_region(region.sets(), spec.magnitude, &mut rng)?;
    Ok((tensor, region.clone()))
}

/// `locations x months` points, location-major, with covariates
/// (location index, month index).
pub fn monthly_layout(locations: usize, months: usize) -> Result<PointDataset> {
    let n = locations * months;
    let x = DMatrix::from_fn(n, 2, |i, d| {
        if d == 0 {
            (i / months) as f64
        } else {
            (i % months) as f64
        }
    });
    PointDataset::complete(x, vec![0.0; n])
}

/// Writes a point dataset laid out by [`monthly_layout`] as an aggregated
/// counts table; `first_month` is `year * 12 + month - 1`. Responses are
/// rounded and clamped at zero; unobserved points are written as `MISSING`.
pub fn write_monthly_counts<W: Write>(
    out: W,
    data: &PointDataset,
    location_names: &[String],
    months: usize,
    first_month: i64,
) -> Result<()> {
    if location_names.len() * months != data.len() {
        return Err(Error::Config("layout does not match the dataset".into()));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["location_id", "time_index", "count"])?;
    for i in 0..data.len() {
        let t = first_month + (i % months) as i64;
        let month = format!("{:04}-{:02}", t.div_euclid(12), t.rem_euclid(12) + 1);
        let count = if data.is_observed(i) {
            (data.y()[i].round().max(0.0) as u64).to_string()
        } else {
            MISSING.to_string()
        };
        w.write_record([location_names[i / months].as_str(), month.as_str(), count.as_str()])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a case tensor whose attribute 0 is time and whose other
/// attributes follow `dictionaries`, one row per case dated at the start
/// of its bin.
pub fn write_case_rows<W: Write>(out: W, tensor: &CaseTensor, dictionaries: &CategoryDictionaries) -> Result<()> {
    if tensor.num_attributes() != dictionaries.attributes.len() + 1 {
        return Err(Error::Config("tensor does not match the dictionaries".into()));
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![DATE_COLUMN.to_string()];
    header.extend(dictionaries.attributes.iter().map(|(n, _)| n.clone()));
    w.write_record(&header)?;
    for rec in tensor.records() {
        let date: NaiveDate = dictionaries.bin_start(rec.cell[0]);
        let mut row = vec![date.format("%Y-%m-%d").to_string()];
        row.extend(
            rec.cell[1..]
                .iter()
                .enumerate()
                .map(|(a, &v)| dictionaries.attributes[a].1[v].clone()),
        );
        for _ in 0..rec.count {
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}
