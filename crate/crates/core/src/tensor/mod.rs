//! Case data over discrete attributes and the CP-decomposition baseline.

mod cp;
mod sample;

pub use cp::{baseline_lookup, cp_decompose, BaselineTensor, CpConfig, FLOOR_SHARE};
pub use sample::PoissonSampler;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A discrete attribute with values `0..arity`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub arity: usize,
}

impl Attribute {
    pub fn new(name: impl Into<String>, arity: usize) -> Self {
        Attribute {
            name: name.into(),
            arity,
        }
    }
}

/// Aggregated count for one cell of the attribute grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub cell: Vec<usize>,
    pub count: u64,
}

/// Sparse count tensor: one record per nonzero cell, in lexicographic cell
/// order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseTensor {
    attributes: Vec<Attribute>,
    records: Vec<CaseRecord>,
}

impl CaseTensor {
    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    pub fn arities(&self) -> Vec<usize> {
        self.attributes.iter().map(|a| a.arity).collect()
    }

    pub fn records(&self) -> &[CaseRecord] {
        &self.records
    }

    pub fn num_attributes(&self) -> usize {
        self.attributes.len()
    }

    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    /// Sum of arities.
    pub fn total_arity(&self) -> usize {
        self.attributes.iter().map(|a| a.arity).sum()
    }

    /// Number of grid cells (as a float; the grid can exceed `u64`).
    pub fn num_cells(&self) -> f64 {
        self.attributes.iter().map(|a| a.arity as f64).product()
    }

    pub fn total(&self) -> u64 {
        self.records.iter().map(|r| r.count).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records whose value on attribute `attr` lies in `keep`, with that
    /// attribute re-indexed to positions within `keep` (which must be sorted).
    pub fn slice(&self, attr: usize, keep: &[usize]) -> Result<CaseTensor> {
        let mut attributes = self.attributes.clone();
        attributes[attr].arity = keep.len();
        let raw = self.records.iter().filter_map(|r| {
            keep.binary_search(&r.cell[attr]).ok().map(|pos| {
                let mut cell = r.cell.clone();
                cell[attr] = pos;
                (cell, r.count)
            })
        });
        aggregate_records(attributes, raw)
    }
}

/// Merges records with identical cells by summing counts. Zero-count rows
/// are dropped; the result is in lexicographic cell order.
pub fn aggregate_records<I>(attributes: Vec<Attribute>, raw: I) -> Result<CaseTensor>
where
    I: IntoIterator<Item = (Vec<usize>, u64)>,
{
    if let Some(a) = attributes.iter().find(|a| a.arity == 0) {
        return Err(Error::Ingestion(format!("attribute '{}' has no values", a.name)));
    }
    let mut cells: BTreeMap<Vec<usize>, u64> = BTreeMap::new();
    for (row, (cell, count)) in raw.into_iter().enumerate() {
        if cell.len() != attributes.len() {
            return Err(Error::Ingestion(format!(
                "row {row}: {} values for {} attributes",
                cell.len(),
                attributes.len()
            )));
        }
        for (a, (&v, attr)) in cell.iter().zip(&attributes).enumerate() {
            if v >= attr.arity {
                return Err(Error::Ingestion(format!(
                    "row {row}: value index {v} out of range for attribute {a} '{}' (arity {})",
                    attr.name, attr.arity
                )));
            }
        }
        if count > 0 {
            *cells.entry(cell).or_insert(0) += count;
        }
    }
    Ok(CaseTensor {
        attributes,
        records: cells
            .into_iter()
            .map(|(cell, count)| CaseRecord { cell, count })
            .collect(),
    })
}
