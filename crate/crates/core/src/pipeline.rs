//! End-to-end runs (fit, scan, randomization test, report), prospective
//! replay, and the Monte Carlo calibration loops.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{GpModel, GpSampler, PointDataset};
use crate::gpss::{gpss_scan, GpssConfig, GpssScanResult, GpssScanner};
use crate::inference::{gpss_null_distribution, mdts_null_distribution, NullDistribution, RandomizationConfig};
use crate::io::{AttributeValues, ClusterReport, PlotRow, PointRef, ResultsDocument, SubsetReport, Support};
use crate::mdts::{mdts_scan, non_overlapping, MdtsConfig, MdtsScanResult, Subspace, TimeWindow};
use crate::tensor::{cp_decompose, Attribute, BaselineTensor, CaseTensor, CpConfig, PoissonSampler};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpssRunConfig {
    pub gpss: GpssConfig,
    pub randomization: RandomizationConfig,
    /// Most clusters to report.
    pub max_clusters: usize,
}

impl Default for GpssRunConfig {
    fn default() -> Self {
        GpssRunConfig {
            gpss: GpssConfig::default(),
            randomization: RandomizationConfig::default(),
            max_clusters: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GpssOutcome {
    pub scanner: GpssScanner,
    pub null: NullDistribution,
    /// Pairwise disjoint subsets in score order, with p-values.
    pub clusters: Vec<GpssScanResult>,
}

/// Fits the GP, scans, and tests every reported subset against the
/// replica maximum-score distribution.
pub fn run_gpss(data: &PointDataset, config: &GpssRunConfig) -> Result<GpssOutcome> {
    let (scanner, results) = gpss_scan(data, &config.gpss)?;
    let null = gpss_null_distribution(&scanner, data, &config.randomization)?;
    let mut clusters: Vec<GpssScanResult> = Vec::new();
    for r in results {
        if clusters.len() == config.max_clusters {
            break;
        }
        if clusters
            .iter()
            .all(|c| c.subset.iter().all(|i| r.subset.binary_search(i).is_err()))
        {
            clusters.push(GpssScanResult {
                p_value: Some(null.p_value(r.score)),
                ..r
            });
        }
    }
    Ok(GpssOutcome {
        scanner,
        null,
        clusters,
    })
}

/// Results document and plot table for a GPSS run. `label` names a point.
pub fn gpss_report(
    outcome: &GpssOutcome,
    data: &PointDataset,
    label: impl Fn(usize) -> String,
    seed: u64,
) -> Result<(ResultsDocument, Vec<PlotRow>)> {
    let y = data.y();
    let mut clusters = Vec::with_capacity(outcome.clusters.len());
    let mut member_of = vec![None; data.len()];
    for (k, c) in outcome.clusters.iter().enumerate() {
        let expected = outcome.scanner.conditional_means(y, &c.subset)?;
        for &i in &c.subset {
            member_of[i].get_or_insert(k + 1);
        }
        let p = c.p_value.unwrap_or(1.0);
        clusters.push(ClusterReport {
            id: k + 1,
            description: c.subset.iter().map(|&i| label(i)).collect::<Vec<_>>().join(", "),
            subset: SubsetReport::Points(
                c.subset
                    .iter()
                    .map(|&i| PointRef {
                        index: i,
                        label: label(i),
                    })
                    .collect(),
            ),
            score: c.score,
            effect: c.effect,
            p_value: p,
            significant: p <= outcome.null.alpha,
            support: Support::Gaussian {
                size: c.subset.len(),
                observed: c.subset.iter().map(|&i| y[i]).sum(),
                expected: expected.iter().sum(),
            },
        });
    }
    let loo = outcome.scanner.loo_means(y)?;
    let plot = (0..data.len())
        .map(|i| PlotRow {
            point_id: i.to_string(),
            coordinates: label(i),
            observed: data.is_observed(i).then(|| y[i]),
            expected: data.is_observed(i).then(|| loo[i]),
            cluster: member_of[i],
        })
        .collect();
    let doc = ResultsDocument {
        method: "gpss".into(),
        seed,
        alpha: outcome.null.alpha,
        replicas: outcome.null.replicas(),
        threshold: outcome.null.threshold,
        clusters,
    };
    Ok((doc, plot))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MdtsRunConfig {
    pub mdts: MdtsConfig,
    pub cp: CpConfig,
    pub randomization: RandomizationConfig,
    pub max_clusters: usize,
}

impl Default for MdtsRunConfig {
    fn default() -> Self {
        MdtsRunConfig {
            mdts: MdtsConfig::default(),
            cp: CpConfig::default(),
            randomization: RandomizationConfig::default(),
            max_clusters: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MdtsOutcome {
    pub base: BaselineTensor,
    pub null: NullDistribution,
    /// Pairwise non-overlapping subspaces in score order, with p-values.
    pub clusters: Vec<MdtsScanResult>,
}

/// Scans `tensor` against `base` and tests the reported subspaces.
pub fn run_mdts_with_baseline(
    tensor: &CaseTensor,
    base: BaselineTensor,
    config: &MdtsRunConfig,
) -> Result<MdtsOutcome> {
    let results = mdts_scan(tensor, &base, &config.mdts)?;
    let null = mdts_null_distribution(
        tensor.attributes(),
        &base,
        &config.mdts,
        &config.cp,
        &config.randomization,
    )?;
    let clusters = non_overlapping(&results)
        .into_iter()
        .take(config.max_clusters)
        .map(|r| MdtsScanResult {
            p_value: Some(null.p_value(r.score)),
            ..r
        })
        .collect();
    Ok(MdtsOutcome { base, null, clusters })
}

/// Fits the CP baseline, then scans and tests.
pub fn run_mdts(tensor: &CaseTensor, config: &MdtsRunConfig) -> Result<MdtsOutcome> {
    let base = cp_decompose(tensor, &config.cp)?;
    run_mdts_with_baseline(tensor, base, config)
}

/// `name ∈ {a,b}` for every attribute that is not fully included.
pub fn describe_subspace(s: &Subspace, attributes: &[Attribute], label: &impl Fn(usize, usize) -> String) -> String {
    let parts: Vec<String> = s
        .sets()
        .iter()
        .enumerate()
        .filter(|(_, set)| !set.iter().all(|&b| b))
        .map(|(a, _)| {
            let vals: Vec<String> = s.values(a).into_iter().map(|v| label(a, v)).collect();
            format!("{} ∈ {{{}}}", attributes[a].name, vals.join(","))
        })
        .collect();
    if parts.is_empty() {
        "all cells".into()
    } else {
        parts.join(", ")
    }
}

/// Results document and plot table for an MDTS run. `label(attr, value)`
/// names a value; plot rows cover the nonzero cells.
pub fn mdts_report(
    outcome: &MdtsOutcome,
    tensor: &CaseTensor,
    label: impl Fn(usize, usize) -> String,
    seed: u64,
) -> (ResultsDocument, Vec<PlotRow>) {
    let attributes = tensor.attributes();
    let clusters = outcome
        .clusters
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let p = c.p_value.unwrap_or(1.0);
            ClusterReport {
                id: k + 1,
                description: describe_subspace(&c.subspace, attributes, &label),
                subset: SubsetReport::Subspace(
                    attributes
                        .iter()
                        .enumerate()
                        .map(|(a, attr)| AttributeValues {
                            attribute: attr.name.clone(),
                            values: c.subspace.values(a).into_iter().map(|v| label(a, v)).collect(),
                        })
                        .collect(),
                ),
                score: c.score,
                effect: c.effect,
                p_value: p,
                significant: p <= outcome.null.alpha,
                support: Support::Poisson {
                    count: c.count,
                    baseline: c.baseline,
                },
            }
        })
        .collect();
    let plot = tensor
        .records()
        .iter()
        .enumerate()
        .map(|(i, rec)| PlotRow {
            point_id: i.to_string(),
            coordinates: rec
                .cell
                .iter()
                .enumerate()
                .map(|(a, &v)| label(a, v))
                .collect::<Vec<_>>()
                .join(";"),
            observed: Some(rec.count as f64),
            expected: Some(outcome.base.mu(&rec.cell)),
            cluster: outcome
                .clusters
                .iter()
                .position(|c| c.subspace.contains(&rec.cell))
                .map(|k| k + 1),
        })
        .collect();
    let doc = ResultsDocument {
        method: "mdts".into(),
        seed,
        alpha: outcome.null.alpha,
        replicas: outcome.null.replicas(),
        threshold: outcome.null.threshold,
        clusters,
    };
    (doc, plot)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplayConfig {
    /// Longest trailing window, in bins.
    pub window: usize,
    /// Bins of history required before the first window.
    pub min_history: usize,
    pub restarts: usize,
    pub cp: CpConfig,
    pub randomization: RandomizationConfig,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        ReplayConfig {
            window: 4,
            min_history: 2,
            restarts: 50,
            cp: CpConfig::default(),
            randomization: RandomizationConfig::default(),
        }
    }
}

/// Outcome of one replay step, scanning the trailing windows that end at
/// `bin` against a baseline fitted on bins before `window_start`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayStep {
    pub bin: usize,
    pub window_start: usize,
    /// Best subspace, in the coordinates of the full tensor.
    pub top: Option<MdtsScanResult>,
    pub significant: bool,
}

/// First step at which a cluster with the given non-time value sets was
/// significant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstDetection {
    /// Value sets of the non-time attributes, in attribute order.
    pub key: Vec<Vec<usize>>,
    pub bin: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub time_attribute: usize,
    pub steps: Vec<ReplayStep>,
    pub first_detections: Vec<FirstDetection>,
}

/// Steps through the time bins as if the data arrived one bin at a time.
///
/// At bin `t` the window is bins `t - W + 1 ..= t`; the CP baseline is fitted
/// on the bins before it and extended over the window with the mean time
/// profile, and the scan only considers trailing windows ending at `t`.
pub fn replay(tensor: &CaseTensor, time_attr: usize, config: &ReplayConfig) -> Result<ReplayReport> {
    let arities = tensor.arities();
    if time_attr >= arities.len() {
        return Err(Error::Config(format!("time attribute {time_attr} out of range")));
    }
    let w = config.window;
    if w == 0 {
        return Err(Error::Config("window must be at least one bin".into()));
    }
    let bins = arities[time_attr];
    let history = config.min_history.max(2);
    if bins < history + w {
        return Err(Error::Config(format!(
            "replay needs at least {history} bins of history before a {w}-bin window; the data has {bins} bins"
        )));
    }
    let mut steps = Vec::new();
    let mut first: Vec<FirstDetection> = Vec::new();
    for t in (history + w - 1)..bins {
        let start = t + 1 - w;
        let past = tensor.slice(time_attr, &(0..start).collect::<Vec<_>>())?;
        let current = tensor.slice(time_attr, &(start..=t).collect::<Vec<_>>())?;
        if past.is_empty() {
            steps.push(ReplayStep {
                bin: t,
                window_start: start,
                top: None,
                significant: false,
            });
            continue;
        }
        let step_seed = (t as u64) << 32;
        let cp = CpConfig {
            seed: config.cp.seed.wrapping_add(step_seed),
            ..config.cp.clone()
        };
        let base = cp_decompose(&past, &cp)?.extrapolate_time(time_attr, w)?;
        let run = MdtsRunConfig {
            mdts: MdtsConfig {
                restarts: config.restarts,
                seed: config.randomization.seed.wrapping_add(step_seed),
                time_window: Some(TimeWindow {
                    attribute: time_attr,
                    max_len: w,
                }),
                randomize_order: false,
            },
            cp,
            randomization: RandomizationConfig {
                seed: config.randomization.seed.wrapping_add(step_seed),
                ..config.randomization.clone()
            },
            max_clusters: 1,
        };
        let outcome =
            run_mdts_with_baseline(&current, base, &run).map_err(|e| e.context(format!("replay step at bin {t}")))?;
        let top = outcome.clusters.into_iter().next().map(|mut r| {
            let mut sets = r.subspace.sets().to_vec();
            let mut full = vec![false; bins];
            for (v, &b) in sets[time_attr].iter().enumerate() {
                full[start + v] = b;
            }
            sets[time_attr] = full;
            r.subspace = Subspace::new(sets).expect("nonempty sets stay nonempty");
            r
        });
        let significant = top
            .as_ref()
            .is_some_and(|r| r.p_value.is_some_and(|p| p <= outcome.null.alpha));
        if significant {
            let s = &top.as_ref().unwrap().subspace;
            let key: Vec<Vec<usize>> = (0..arities.len())
                .filter(|&a| a != time_attr)
                .map(|a| s.values(a))
                .collect();
            if !first.iter().any(|f| f.key == key) {
                first.push(FirstDetection { key, bin: t });
            }
        }
        steps.push(ReplayStep {
            bin: t,
            window_start: start,
            top,
            significant,
        });
    }
    Ok(ReplayReport {
        time_attribute: time_attr,
        steps,
        first_detections: first,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    pub trials: usize,
    pub replicas: usize,
    pub alpha: f64,
    pub seed: u64,
    /// Search restarts for the MDTS scans.
    pub restarts: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            trials: 200,
            replicas: 99,
            alpha: 0.05,
            seed: 0,
            restarts: 50,
        }
    }
}

/// Empirical size of the randomization test under a known null.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub method: String,
    pub trials: usize,
    pub replicas: usize,
    pub alpha: f64,
    pub significant: usize,
    pub rate: f64,
}

impl CalibrationReport {
    fn new(method: &str, config: &CalibrationConfig, significant: usize) -> Self {
        CalibrationReport {
            method: method.into(),
            trials: config.trials,
            replicas: config.replicas,
            alpha: config.alpha,
            significant,
            rate: significant as f64 / config.trials as f64,
        }
    }
}

fn trial_seeds(config: &CalibrationConfig, trial: usize) -> (u64, RandomizationConfig) {
    let data_seed = config.seed.wrapping_add(trial as u64);
    let randomization = RandomizationConfig {
        replicas: config.replicas,
        alpha: config.alpha,
        seed: config.seed.wrapping_add((trial as u64 + 1) << 32),
        refit_per_replica: false,
    };
    (data_seed, randomization)
}

/// GPSS calibration on a 6 x 10 grid (n = 60) with k = 6 under a fixed GP.
pub fn calibrate_gpss(config: &CalibrationConfig) -> Result<CalibrationReport> {
    if config.trials == 0 {
        return Err(Error::Config("at least one trial is required".into()));
    }
    let x = DMatrix::from_fn(60, 2, |i, d| if d == 0 { (i / 10) as f64 } else { (i % 10) as f64 });
    let data = PointDataset::complete(x, vec![0.0; 60])?;
    let model = GpModel::new(0.0, 1.0, vec![1.5, 2.5], 0.25)?;
    let scanner = GpssScanner::new(
        model.clone(),
        &data,
        &GpssConfig {
            k: 6,
            seed: config.seed,
            ..Default::default()
        },
    )?;
    let sampler = GpSampler::new(&model, &data)?;
    let mut significant = 0;
    for trial in 0..config.trials {
        let (data_seed, randomization) = trial_seeds(config, trial);
        let y = sampler.sample(&mut ChaCha8Rng::seed_from_u64(data_seed));
        let observed = scanner.max_score(&y)?;
        let null =
            gpss_null_distribution(&scanner, &data, &randomization).map_err(|e| e.context(format!("trial {trial}")))?;
        if null.is_significant(observed) {
            significant += 1;
        }
    }
    Ok(CalibrationReport::new("gpss", config, significant))
}

/// MDTS calibration on a 4 x 4 x 4 grid with expected count 2 per cell.
pub fn calibrate_mdts(config: &CalibrationConfig) -> Result<CalibrationReport> {
    if config.trials == 0 {
        return Err(Error::Config("at least one trial is required".into()));
    }
    let arities = vec![4, 4, 4];
    let attributes: Vec<Attribute> = arities
        .iter()
        .enumerate()
        .map(|(i, &n)| Attribute::new(format!("a{i}"), n))
        .collect();
    let base = BaselineTensor::constant(arities, 2.0)?;
    let sampler = PoissonSampler::new(attributes.clone(), base.clone())?;
    let mdts = MdtsConfig {
        restarts: config.restarts,
        seed: config.seed,
        ..Default::default()
    };
    let mut significant = 0;
    for trial in 0..config.trials {
        let (data_seed, randomization) = trial_seeds(config, trial);
        let tensor = sampler.sample(&mut ChaCha8Rng::seed_from_u64(data_seed))?;
        let observed = mdts_scan(&tensor, &base, &mdts)?.first().map_or(0.0, |r| r.score);
        let null = mdts_null_distribution(&attributes, &base, &mdts, &CpConfig::default(), &randomization)
            .map_err(|e| e.context(format!("trial {trial}")))?;
        if null.is_significant(observed) {
            significant += 1;
        }
    }
    Ok(CalibrationReport::new("mdts", config, significant))
}
