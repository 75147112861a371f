use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Values of one attribute inside a reported subspace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeValues {
    pub attribute: String,
    pub values: Vec<String>,
}

/// A point inside a reported GPSS subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointRef {
    pub index: usize,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SubsetReport {
    Points(Vec<PointRef>),
    Subspace(Vec<AttributeValues>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Support {
    /// Observed and conditional expected sums over the subset.
    Gaussian { size: usize, observed: f64, expected: f64 },
    /// Observed count `C` and expected count `B`.
    Poisson { count: f64, baseline: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub id: usize,
    pub description: String,
    pub subset: SubsetReport,
    pub score: f64,
    pub effect: f64,
    pub p_value: f64,
    pub significant: bool,
    pub support: Support,
}

/// Everything a scan reports: the clusters and the null distribution
/// summary they were tested against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsDocument {
    pub method: String,
    pub seed: u64,
    pub alpha: f64,
    pub replicas: usize,
    pub threshold: f64,
    pub clusters: Vec<ClusterReport>,
}

impl ResultsDocument {
    pub fn significant(&self) -> impl Iterator<Item = &ClusterReport> {
        self.clusters.iter().filter(|c| c.significant)
    }

    pub fn to_json(&self) -> Result<String> {
        let finite = self.clusters.iter().all(|c| {
            c.score.is_finite()
                && c.effect.is_finite()
                && match c.support {
                    Support::Gaussian { observed, expected, .. } => observed.is_finite() && expected.is_finite(),
                    Support::Poisson { count, baseline } => count.is_finite() && baseline.is_finite(),
                }
        });
        if !finite || !self.threshold.is_finite() {
            return Err(Error::Serialization("results contain non-finite numbers".into()));
        }
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self> {
        let mut s = String::new();
        input.read_to_string(&mut s)?;
        Self::from_json(&s)
    }
}

/// One row of the plot table: a point or tensor cell with its observed and
/// expected values and the first reported cluster containing it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub point_id: String,
    pub coordinates: String,
    /// Empty for unobserved points.
    pub observed: Option<f64>,
    pub expected: Option<f64>,
    pub cluster: Option<usize>,
}

pub fn write_plot_rows<W: Write>(out: W, rows: &[PlotRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Serialization(e.to_string()))?;
    }
    if rows.is_empty() {
        w.write_record(["point_id", "coordinates", "observed", "expected", "cluster"])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_plot_rows<R: Read>(input: R) -> Result<Vec<PlotRow>> {
    let mut rdr = csv::Reader::from_reader(input);
    rdr.deserialize()
        .map(|r| r.map_err(|e| Error::Serialization(e.to_string())))
        .collect()
}

/// Files to write under an output directory, as (relative name, bytes).
/// Everything is rendered before the directory is touched so that a
/// failing run leaves no partial output.
#[derive(Debug, Default)]
pub struct OutputBundle {
    files: Vec<(String, Vec<u8>)>,
}

impl OutputBundle {
    pub fn add(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes));
    }

    pub fn files(&self) -> &[(String, Vec<u8>)] {
        &self.files
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::Io(e).context(format!("creating {}", dir.display())))?;
        for (name, bytes) in &self.files {
            let path = dir.join(name);
            fs::write(&path, bytes).map_err(|e| Error::Io(e).context(format!("writing {}", path.display())))?;
        }
        Ok(())
    }
}
