use std::collections::{BTreeMap, HashMap};
use std::io::Read;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::PointDataset;

/// Marker for an unobserved (location, time) count.
pub const MISSING: &str = "MISSING";

/// How the time column was written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeFormat {
    Integer,
    /// `YYYY-MM`.
    Month,
}

/// Point dataset read from an aggregated counts table, with the labels
/// needed to describe results.
#[derive(Debug, Clone)]
pub struct AggregatedCounts {
    /// Covariates are the location coordinates followed by the time index.
    pub data: PointDataset,
    /// Location labels in first-appearance order.
    pub locations: Vec<String>,
    /// Location index of every point.
    pub point_location: Vec<usize>,
    /// Time index of every point (months since January of year 0 for
    /// monthly data).
    pub point_time: Vec<i64>,
    pub time_format: TimeFormat,
}

impl AggregatedCounts {
    pub fn time_label(&self, t: i64) -> String {
        match self.time_format {
            TimeFormat::Integer => t.to_string(),
            TimeFormat::Month => format!("{:04}-{:02}", t.div_euclid(12), t.rem_euclid(12) + 1),
        }
    }

    /// `location@time` for a point.
    pub fn point_label(&self, i: usize) -> String {
        format!(
            "{}@{}",
            self.locations[self.point_location[i]],
            self.time_label(self.point_time[i])
        )
    }

    /// Sum of observed counts.
    pub fn total(&self) -> f64 {
        self.data.observed_indices().iter().map(|&i| self.data.y()[i]).sum()
    }
}

fn column(headers: &csv::StringRecord, names: &[&str]) -> Result<usize> {
    headers
        .iter()
        .position(|h| names.contains(&h.trim()))
        .ok_or_else(|| Error::Ingestion(format!("missing column '{}'", names[0])))
}

fn parse_time(raw: &str, line: u64) -> Result<(i64, TimeFormat)> {
    let raw = raw.trim();
    if let Ok(t) = raw.parse::<i64>() {
        return Ok((t, TimeFormat::Integer));
    }
    let bad = || Error::Ingestion(format!("line {line}: cannot parse time '{raw}'"));
    let (y, m) = raw.split_once('-').ok_or_else(bad)?;
    let year: i64 = y.parse().map_err(|_| bad())?;
    let month: i64 = m.parse().map_err(|_| bad())?;
    if y.len() != 4 || !(1..=12).contains(&month) {
        return Err(bad());
    }
    Ok((year * 12 + month - 1, TimeFormat::Month))
}

/// Reads `location_id,time_index,count` rows. Counts are nonnegative
/// integers or `MISSING` (an empty field is also treated as missing).
/// Every location's time indices must form a contiguous range.
///
/// With `coordinates`, each location maps to the numeric columns of its
/// row in that table; otherwise locations get integer positions in order
/// of first appearance.
pub fn read_aggregated_counts<R: Read, C: Read>(input: R, coordinates: Option<C>) -> Result<AggregatedCounts> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
        return Err(Error::Ingestion("missing header row".into()));
    }
    let loc_col = column(&headers, &["location_id", "location"])?;
    let time_col = column(&headers, &["time_index", "time", "month"])?;
    let count_col = column(&headers, &["count"])?;

    let mut locations: Vec<String> = Vec::new();
    let mut loc_index: HashMap<String, usize> = HashMap::new();
    let mut seen: HashMap<(usize, i64), u64> = HashMap::new();
    let mut point_location = Vec::new();
    let mut point_time = Vec::new();
    let mut y = Vec::new();
    let mut observed = Vec::new();
    let mut format = None;
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |c: usize| {
            rec.get(c)
                .ok_or_else(|| Error::Ingestion(format!("line {line}: too few fields")))
        };
        let loc = field(loc_col)?.to_string();
        if loc.is_empty() {
            return Err(Error::Ingestion(format!("line {line}: empty location")));
        }
        let (t, fmt) = parse_time(field(time_col)?, line)?;
        match format {
            None => format = Some(fmt),
            Some(f) if f != fmt => {
                return Err(Error::Ingestion(format!(
                    "line {line}: time format differs from earlier rows"
                )));
            }
            _ => {}
        }
        let li = *loc_index.entry(loc.clone()).or_insert_with(|| {
            locations.push(loc.clone());
            locations.len() - 1
        });
        if let Some(prev) = seen.insert((li, t), line) {
            return Err(Error::Ingestion(format!(
                "duplicate ({loc}, {}) on lines {prev} and {line}",
                field(time_col)?
            )));
        }
        let raw = field(count_col)?;
        if raw.is_empty() || raw.eq_ignore_ascii_case(MISSING) {
            y.push(f64::NAN);
            observed.push(false);
        } else {
            let c: u64 = raw
                .parse()
                .map_err(|_| Error::Ingestion(format!("line {line}: count '{raw}' is not a nonnegative integer")))?;
            y.push(c as f64);
            observed.push(true);
        }
        point_location.push(li);
        point_time.push(t);
    }
    if y.is_empty() {
        return Err(Error::Ingestion("no data rows".into()));
    }

    let mut ranges: BTreeMap<usize, Vec<i64>> = BTreeMap::new();
    for (&l, &t) in point_location.iter().zip(&point_time) {
        ranges.entry(l).or_default().push(t);
    }
    for (l, mut times) in ranges {
        times.sort_unstable();
        if let Some(w) = times.windows(2).find(|w| w[1] != w[0] + 1) {
            return Err(Error::Ingestion(format!(
                "location '{}' has no row between times {} and {} (mark gaps as {MISSING})",
                locations[l], w[0], w[1]
            )));
        }
    }

    let coords = match coordinates {
        Some(c) => read_coordinates(c, &locations)?,
        None => locations.iter().enumerate().map(|(i, _)| vec![i as f64]).collect(),
    };
    let n_coord = coords[0].len();
    let n = y.len();
    let x = DMatrix::from_fn(n, n_coord + 1, |i, d| {
        if d < n_coord {
            coords[point_location[i]][d]
        } else {
            point_time[i] as f64
        }
    });
    Ok(AggregatedCounts {
        data: PointDataset::new(x, y, observed)?,
        locations,
        point_location,
        point_time,
        time_format: format.unwrap_or(TimeFormat::Integer),
    })
}

/// `location_id` followed by one or more numeric columns.
fn read_coordinates<R: Read>(input: R, locations: &[String]) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = rdr.headers()?.clone();
    let loc_col = column(&headers, &["location_id", "location"])?;
    let mut table: HashMap<String, Vec<f64>> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let mut values = Vec::new();
        for (c, v) in rec.iter().enumerate() {
            if c != loc_col {
                values.push(
                    v.parse::<f64>()
                        .ok()
                        .filter(|x| x.is_finite())
                        .ok_or_else(|| Error::Ingestion(format!("coordinates line {line}: bad value '{v}'")))?,
                );
            }
        }
        if values.is_empty() {
            return Err(Error::Ingestion("coordinate table has no numeric columns".into()));
        }
        table.insert(rec[loc_col].to_string(), values);
    }
    locations
        .iter()
        .map(|l| {
            table
                .get(l)
                .cloned()
                .ok_or_else(|| Error::Ingestion(format!("no coordinates for location '{l}'")))
        })
        .collect()
}
