use std::collections::BTreeSet;
use std::io::Read;

use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{aggregate_records, Attribute, CaseTensor};

pub const DATE_COLUMN: &str = "date";
pub const DEMOGRAPHIC_COLUMNS: [&str; 4] = ["zip", "age_decile", "gender", "race"];
pub const DRUG_PREFIX: &str = "drug_";
pub const TIME_ATTRIBUTE: &str = "time";

const DATE_FORMAT: &str = "%Y-%m-%d";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaseOptions {
    pub bin_days: u32,
    /// First day of bin 0; defaults to the earliest date in the file, or
    /// the origin stored in supplied dictionaries.
    pub origin: Option<NaiveDate>,
    /// Accept categories missing from supplied dictionaries (appended).
    pub allow_new: bool,
}

impl Default for CaseOptions {
    fn default() -> Self {
        CaseOptions {
            bin_days: 7,
            origin: None,
            allow_new: false,
        }
    }
}

/// Label tables for the categorical attributes plus the time binning, so
/// that later runs encode the same way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryDictionaries {
    pub origin: NaiveDate,
    pub bin_days: u32,
    /// Attribute name and labels, in column order (time excluded).
    pub attributes: Vec<(String, Vec<String>)>,
}

impl CategoryDictionaries {
    pub fn labels(&self, name: &str) -> Option<&[String]> {
        self.attributes
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, l)| l.as_slice())
    }

    /// Start date of a time bin.
    pub fn bin_start(&self, bin: usize) -> NaiveDate {
        self.origin + Days::new(bin as u64 * self.bin_days as u64)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Case tensor with its dictionaries. The time attribute comes first,
/// then the columns in file order.
#[derive(Debug, Clone)]
pub struct CaseData {
    pub tensor: CaseTensor,
    pub dictionaries: CategoryDictionaries,
    pub time_attribute: usize,
    pub rows: usize,
}

impl CaseData {
    /// Human-readable label of value `v` of attribute `attr`.
    pub fn label(&self, attr: usize, v: usize) -> String {
        if attr == self.time_attribute {
            self.dictionaries.bin_start(v).format(DATE_FORMAT).to_string()
        } else {
            let idx = if attr > self.time_attribute { attr - 1 } else { attr };
            self.dictionaries.attributes[idx].1[v].clone()
        }
    }
}

fn is_drug(name: &str) -> bool {
    name.starts_with(DRUG_PREFIX)
}

/// Reads victim rows `date,zip,age_decile,gender,race,drug_*`. Dates bin
/// into `bin_days`-day periods; categories are index-encoded with
/// dictionaries built from the file (labels sorted) or taken from `known`.
pub fn read_case_records<R: Read>(
    input: R,
    options: &CaseOptions,
    known: Option<&CategoryDictionaries>,
) -> Result<CaseData> {
    if options.bin_days == 0 {
        return Err(Error::Config("bin_days must be at least 1".into()));
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers()?.clone();
    let names: Vec<String> = headers.iter().map(str::to_string).collect();
    if names.first().map(String::as_str) != Some(DATE_COLUMN) {
        return Err(Error::Ingestion(format!("first column must be '{DATE_COLUMN}'")));
    }
    for (i, expected) in DEMOGRAPHIC_COLUMNS.iter().enumerate() {
        if names.get(i + 1).map(String::as_str) != Some(*expected) {
            return Err(Error::Ingestion(format!("column {} must be '{expected}'", i + 2)));
        }
    }
    if let Some(extra) = names[5..].iter().find(|n| !is_drug(n)) {
        return Err(Error::Ingestion(format!("unexpected column '{extra}'")));
    }
    let cat_names = &names[1..];
    if let Some(k) = known {
        let expected: Vec<&str> = k.attributes.iter().map(|(n, _)| n.as_str()).collect();
        if expected != cat_names.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Ingestion("columns differ from the supplied dictionaries".into()));
        }
        if k.bin_days != options.bin_days {
            return Err(Error::Config(format!(
                "dictionaries use {}-day bins but {} were requested",
                k.bin_days, options.bin_days
            )));
        }
    }

    let mut dates = Vec::new();
    let mut raw: Vec<Vec<String>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != names.len() {
            return Err(Error::Ingestion(format!(
                "line {line}: expected {} fields, got {}",
                names.len(),
                rec.len()
            )));
        }
        let date = NaiveDate::parse_from_str(&rec[0], DATE_FORMAT)
            .map_err(|e| Error::Ingestion(format!("line {line}: bad date '{}': {e}", &rec[0])))?;
        let mut vals = Vec::with_capacity(cat_names.len());
        for (c, name) in cat_names.iter().enumerate() {
            let v = rec[c + 1].to_string();
            if is_drug(name) && v != "0" && v != "1" {
                return Err(Error::Ingestion(format!(
                    "line {line}: {name} must be 0 or 1, got '{v}'"
                )));
            }
            if v.is_empty() {
                return Err(Error::Ingestion(format!("line {line}: empty {name}")));
            }
            vals.push(v);
        }
        dates.push((date, line));
        raw.push(vals);
    }
    if raw.is_empty() {
        return Err(Error::Ingestion("no data rows".into()));
    }

    let origin = options
        .origin
        .or(known.map(|k| k.origin))
        .unwrap_or_else(|| dates.iter().map(|(d, _)| *d).min().unwrap());
    let mut bins = Vec::with_capacity(dates.len());
    for &(d, line) in &dates {
        let days = (d - origin).num_days();
        if days < 0 {
            return Err(Error::Ingestion(format!(
                "line {line}: date {d} precedes origin {origin}"
            )));
        }
        bins.push(days as usize / options.bin_days as usize);
    }

    let mut dict_attrs: Vec<(String, Vec<String>)> = Vec::with_capacity(cat_names.len());
    for (c, name) in cat_names.iter().enumerate() {
        let labels = match known {
            Some(k) => {
                let mut labels = k.attributes[c].1.clone();
                let mut new: BTreeSet<&str> = BTreeSet::new();
                for vals in &raw {
                    if !labels.iter().any(|l| *l == vals[c]) {
                        new.insert(&vals[c]);
                    }
                }
                if let Some(first) = new.first() {
                    if !options.allow_new {
                        return Err(Error::Ingestion(format!("unknown {name} category '{first}'")));
                    }
                }
                labels.extend(new.into_iter().map(str::to_string));
                labels
            }
            None if is_drug(name) => vec!["0".to_string(), "1".to_string()],
            None => raw
                .iter()
                .map(|v| v[c].as_str())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .map(str::to_string)
                .collect(),
        };
        dict_attrs.push((name.clone(), labels));
    }

    let n_bins = bins.iter().max().unwrap() + 1;
    let mut attributes = vec![Attribute::new(TIME_ATTRIBUTE, n_bins)];
    attributes.extend(dict_attrs.iter().map(|(n, l)| Attribute::new(n.clone(), l.len())));
    let lookups: Vec<std::collections::HashMap<&str, usize>> = dict_attrs
        .iter()
        .map(|(_, l)| l.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect())
        .collect();
    let cells = raw.iter().zip(&bins).map(|(vals, &b)| {
        let mut cell = Vec::with_capacity(vals.len() + 1);
        cell.push(b);
        cell.extend(vals.iter().enumerate().map(|(c, v)| lookups[c][v.as_str()]));
        (cell, 1)
    });
    let tensor = aggregate_records(attributes, cells)?;
    Ok(CaseData {
        tensor,
        dictionaries: CategoryDictionaries {
            origin,
            bin_days: options.bin_days,
            attributes: dict_attrs,
        },
        time_attribute: 0,
        rows: raw.len(),
    })
}
