//! Command-line front end.
//!
//! Settings resolve in three layers: built-in defaults, then an optional
//! TOML file (`--config`), then flags.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::GpModel;
use crate::gpss::GpssConfig;
use crate::inference::RandomizationConfig;
use crate::io::{
    monthly_layout, read_aggregated_counts, read_case_records, synth_cases, synth_points, write_case_rows,
    write_monthly_counts, write_plot_rows, CaseData, CaseOptions, CategoryDictionaries, InjectionKind, InjectionSpec,
    OutputBundle, Region, ResultsDocument,
};
use crate::mdts::{MdtsConfig, Subspace};
use crate::pipeline::{
    calibrate_gpss, calibrate_mdts, describe_subspace, gpss_report, mdts_report, replay, run_gpss, run_mdts,
    CalibrationConfig, GpssRunConfig, MdtsRunConfig, ReplayConfig,
};
use crate::tensor::{Attribute, BaselineTensor, CpConfig};

/// Prints a line to stdout, ignoring a closed pipe.
macro_rules! outln {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Debug, Parser)]
#[command(name = "subscan", version, about = "Subset-scan anomaly detection (GPSS and MDTS)")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Gaussian process subset scan over an aggregated counts table.
    GpssScan(GpssArgs),
    /// Multidimensional tensor scan over case records.
    MdtsScan(MdtsArgs),
    /// Prospective replay of case records, one time bin at a time.
    Replay(ReplayArgs),
    /// Write a synthetic input file with an injected cluster.
    Synth(SynthArgs),
    /// Empirical size of the randomization test under a known null.
    Calibrate(CalibrateArgs),
}

/// Flags shared by every command.
#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Directory for output files (created at the end of a successful run).
    #[arg(long)]
    pub output_dir: PathBuf,
    /// TOML file with settings; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Random seed [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TestArgs {
    /// Significance level [default: 0.05].
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Null replicas for the randomization test [default: 200].
    #[arg(long)]
    pub replicas: Option<usize>,
    /// Search restarts [default: 50].
    #[arg(long)]
    pub restarts: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GpssArgs {
    /// Aggregated counts CSV (location_id,time_index,count).
    #[arg(long)]
    pub input: PathBuf,
    /// Optional CSV of location coordinates (location_id, then numbers).
    #[arg(long)]
    pub coordinates: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub test: TestArgs,
    /// Neighbourhood size [default: 10].
    #[arg(long)]
    pub k: Option<usize>,
    /// Allow negative as well as positive mean shifts [default: true].
    #[arg(long)]
    pub two_sided: Option<bool>,
}

#[derive(Debug, Args)]
pub struct CaseArgs {
    /// Case records CSV (date,zip,age_decile,gender,race,drug_*).
    #[arg(long)]
    pub input: PathBuf,
    /// Days per time bin [default: 7].
    #[arg(long)]
    pub bin_days: Option<u32>,
    /// Category dictionaries from an earlier run.
    #[arg(long)]
    pub dictionaries: Option<PathBuf>,
    /// Accept categories missing from the dictionaries.
    #[arg(long)]
    pub allow_new: bool,
    /// CP decomposition rank [default: 5].
    #[arg(long)]
    pub rank: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MdtsArgs {
    #[command(flatten)]
    pub cases: CaseArgs,
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub test: TestArgs,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[command(flatten)]
    pub cases: CaseArgs,
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub test: TestArgs,
    /// Longest trailing window, in bins [default: 4].
    #[arg(long)]
    pub window: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Gpss,
    Mdts,
    Both,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Which input shape to generate (gpss: aggregated counts, mdts: case records).
    #[arg(long, value_enum)]
    pub kind: Method,
    #[command(flatten)]
    pub common: CommonArgs,
    /// Generate without an injected cluster.
    #[arg(long)]
    pub null: bool,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long, value_enum, default_value = "both")]
    pub method: Method,
    #[command(flatten)]
    pub common: CommonArgs,
    /// Outer Monte Carlo trials [default: 200].
    #[arg(long)]
    pub trials: Option<usize>,
    /// Null replicas per trial [default: 99].
    #[arg(long)]
    pub replicas: Option<usize>,
    /// Significance level [default: 0.05].
    #[arg(long)]
    pub alpha: Option<f64>,
}

/// Settings readable from a config file. Unset keys keep their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub alpha: f64,
    pub replicas: usize,
    pub k: usize,
    pub restarts: usize,
    pub rank: usize,
    pub window: usize,
    pub bin_days: u32,
    pub two_sided: bool,
    pub max_clusters: usize,
    pub trials: usize,
    pub calibration_replicas: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            alpha: 0.05,
            replicas: 200,
            k: 10,
            restarts: 50,
            rank: 5,
            window: 4,
            bin_days: 7,
            two_sided: true,
            max_clusters: 10,
            trials: 200,
            calibration_replicas: 99,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text =
                    fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    fn apply_common(&mut self, c: &CommonArgs) {
        if let Some(s) = c.seed {
            self.seed = s;
        }
    }

    fn apply_test(&mut self, t: &TestArgs) {
        if let Some(a) = t.alpha {
            self.alpha = a;
        }
        if let Some(r) = t.replicas {
            self.replicas = r;
        }
        if let Some(r) = t.restarts {
            self.restarts = r;
        }
    }

    fn apply_cases(&mut self, c: &CaseArgs) {
        if let Some(b) = c.bin_days {
            self.bin_days = b;
        }
        if let Some(r) = c.rank {
            self.rank = r;
        }
    }

    fn randomization(&self) -> RandomizationConfig {
        RandomizationConfig {
            replicas: self.replicas,
            alpha: self.alpha,
            seed: self.seed,
            refit_per_replica: false,
        }
    }

    fn cp(&self) -> CpConfig {
        CpConfig {
            rank: self.rank,
            seed: self.seed,
            ..Default::default()
        }
    }
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GpssScan(a) => cmd_gpss_scan(&a),
        Command::MdtsScan(a) => cmd_mdts_scan(&a),
        Command::Replay(a) => cmd_replay(&a),
        Command::Synth(a) => cmd_synth(&a),
        Command::Calibrate(a) => cmd_calibrate(&a),
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::Ingestion(format!("cannot open {}: {e}", path.display())))
}

fn csv_bytes(rows: &[crate::io::PlotRow]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_plot_rows(&mut buf, rows)?;
    Ok(buf)
}

fn print_clusters(doc: &ResultsDocument) {
    outln!(
        "{}: {} clusters, threshold {:.4} ({} replicas, alpha {})",
        doc.method,
        doc.clusters.len(),
        doc.threshold,
        doc.replicas,
        doc.alpha
    );
    for c in doc.clusters.iter().take(5) {
        outln!(
            "  #{} score {:.4} effect {:.4} p {:.4}{}  {}",
            c.id,
            c.score,
            c.effect,
            c.p_value,
            if c.significant { " *" } else { "" },
            c.description
        );
    }
}

pub fn cmd_gpss_scan(args: &GpssArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.common.config.as_deref())?;
    cfg.apply_common(&args.common);
    cfg.apply_test(&args.test);
    if let Some(k) = args.k {
        cfg.k = k;
    }
    if let Some(t) = args.two_sided {
        cfg.two_sided = t;
    }
    let coords = args.coordinates.as_deref().map(open).transpose()?;
    let counts = read_aggregated_counts(open(&args.input)?, coords)?;
    info!(
        "read {} points over {} locations",
        counts.data.len(),
        counts.locations.len()
    );
    let run_cfg = GpssRunConfig {
        gpss: GpssConfig {
            k: cfg.k,
            restarts: cfg.restarts,
            two_sided: cfg.two_sided,
            seed: cfg.seed,
            ..Default::default()
        },
        randomization: cfg.randomization(),
        max_clusters: cfg.max_clusters,
    };
    let outcome = run_gpss(&counts.data, &run_cfg)?;
    let (doc, plot) = gpss_report(&outcome, &counts.data, |i| counts.point_label(i), cfg.seed)?;
    let model: &GpModel = outcome.scanner.model();
    let mut out = OutputBundle::default();
    out.add("results.json", doc.to_json()?.into_bytes());
    out.add("plot_data.csv", csv_bytes(&plot)?);
    out.add("model.json", (serde_json::to_string_pretty(model)? + "\n").into_bytes());
    out.write_to(&args.common.output_dir)?;
    print_clusters(&doc);
    Ok(())
}

fn load_cases(c: &CaseArgs, cfg: &RunConfig) -> Result<CaseData> {
    let known = match &c.dictionaries {
        Some(p) => Some(CategoryDictionaries::from_json(
            &fs::read_to_string(p).map_err(|e| Error::Ingestion(format!("cannot read {}: {e}", p.display())))?,
        )?),
        None => None,
    };
    let opts = CaseOptions {
        bin_days: cfg.bin_days,
        origin: None,
        allow_new: c.allow_new,
    };
    let data = read_case_records(open(&c.input)?, &opts, known.as_ref())?;
    info!("read {} rows into {} cells", data.rows, data.tensor.records().len());
    Ok(data)
}

pub fn cmd_mdts_scan(args: &MdtsArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.common.config.as_deref())?;
    cfg.apply_common(&args.common);
    cfg.apply_test(&args.test);
    cfg.apply_cases(&args.cases);
    let cases = load_cases(&args.cases, &cfg)?;
    let run_cfg = MdtsRunConfig {
        mdts: MdtsConfig {
            restarts: cfg.restarts,
            seed: cfg.seed,
            ..Default::default()
        },
        cp: cfg.cp(),
        randomization: cfg.randomization(),
        max_clusters: cfg.max_clusters,
    };
    let outcome = run_mdts(&cases.tensor, &run_cfg)?;
    let (doc, plot) = mdts_report(&outcome, &cases.tensor, |a, v| cases.label(a, v), cfg.seed);
    let mut out = OutputBundle::default();
    out.add("results.json", doc.to_json()?.into_bytes());
    out.add("plot_data.csv", csv_bytes(&plot)?);
    out.add("dictionaries.json", cases.dictionaries.to_json()?.into_bytes());
    out.write_to(&args.common.output_dir)?;
    print_clusters(&doc);
    Ok(())
}

#[derive(Debug, Serialize)]
struct TimelineRow {
    bin: usize,
    date: String,
    window_start: String,
    cluster: String,
    count: Option<f64>,
    baseline: Option<f64>,
    score: Option<f64>,
    p_value: Option<f64>,
    significant: bool,
}

#[derive(Debug, Serialize)]
struct DetectionRecord {
    cluster: String,
    first_bin: usize,
    first_date: String,
}

pub fn cmd_replay(args: &ReplayArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.common.config.as_deref())?;
    cfg.apply_common(&args.common);
    cfg.apply_test(&args.test);
    cfg.apply_cases(&args.cases);
    if let Some(w) = args.window {
        cfg.window = w;
    }
    let cases = load_cases(&args.cases, &cfg)?;
    let replay_cfg = ReplayConfig {
        window: cfg.window,
        restarts: cfg.restarts,
        cp: cfg.cp(),
        randomization: cfg.randomization(),
        ..Default::default()
    };
    let report = replay(&cases.tensor, cases.time_attribute, &replay_cfg)?;
    let attributes = cases.tensor.attributes();
    let label = |a: usize, v: usize| cases.label(a, v);
    let date = |bin: usize| cases.dictionaries.bin_start(bin).format("%Y-%m-%d").to_string();

    let mut timeline = csv::Writer::from_writer(Vec::new());
    for step in &report.steps {
        let top = step.top.as_ref();
        timeline
            .serialize(TimelineRow {
                bin: step.bin,
                date: date(step.bin),
                window_start: date(step.window_start),
                cluster: top.map_or(String::new(), |r| describe_subspace(&r.subspace, attributes, &label)),
                count: top.map(|r| r.count),
                baseline: top.map(|r| r.baseline),
                score: top.map(|r| r.score),
                p_value: top.and_then(|r| r.p_value),
                significant: step.significant,
            })
            .map_err(|e| Error::Serialization(e.to_string()))?;
    }
    let timeline = timeline.into_inner().map_err(|e| Error::Serialization(e.to_string()))?;
    let detections: Vec<DetectionRecord> = report
        .first_detections
        .iter()
        .map(|d| {
            let non_time: Vec<usize> = (0..attributes.len()).filter(|&a| a != cases.time_attribute).collect();
            let mut sets: Vec<Vec<bool>> = attributes.iter().map(|a| vec![true; a.arity]).collect();
            for (vals, &a) in d.key.iter().zip(&non_time) {
                sets[a] = (0..attributes[a].arity).map(|v| vals.contains(&v)).collect();
            }
            let s = Subspace::new(sets).expect("detected subspaces are nonempty");
            DetectionRecord {
                cluster: describe_subspace(&s, attributes, &label),
                first_bin: d.bin,
                first_date: date(d.bin),
            }
        })
        .collect();

    let mut out = OutputBundle::default();
    out.add("timeline.csv", timeline);
    out.add(
        "detections.json",
        (serde_json::to_string_pretty(&detections)? + "\n").into_bytes(),
    );
    out.add("dictionaries.json", cases.dictionaries.to_json()?.into_bytes());
    out.write_to(&args.common.output_dir)?;
    let n_sig = report.steps.iter().filter(|s| s.significant).count();
    outln!("replay: {} steps, {} significant", report.steps.len(), n_sig);
    for d in &detections {
        outln!("  first detected {} (bin {}): {}", d.first_date, d.first_bin, d.cluster);
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct Truth {
    kind: InjectionKind,
    magnitude: f64,
    seed: u64,
    description: String,
    /// Point indices (counts) or cell value lists per attribute (cases).
    members: serde_json::Value,
}

const SYNTH_LOCATIONS: usize = 6;
const SYNTH_MONTHS: usize = 36;
const SYNTH_FIRST_MONTH: i64 = 2010 * 12;

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.common.config.as_deref())?;
    cfg.apply_common(&args.common);
    let mut out = OutputBundle::default();
    match args.kind {
        Method::Gpss => {
            let template = monthly_layout(SYNTH_LOCATIONS, SYNTH_MONTHS)?;
            let model = GpModel::new(20.0, 9.0, vec![2.0, 6.0], 4.0)?;
            let sigma = (model.signal_var + model.noise_var).sqrt();
            let spec = InjectionSpec {
                kind: InjectionKind::AdditiveShift,
                region: Region::Points((22..27).map(|t| 2 * SYNTH_MONTHS + t).collect()),
                magnitude: if args.null { 1e-9 } else { 4.0 * sigma },
                seed: cfg.seed,
            };
            let (data, truth) = synth_points(&model, &template, &spec)?;
            let names: Vec<String> = (1..=SYNTH_LOCATIONS).map(|i| format!("L{i}")).collect();
            let mut buf = Vec::new();
            write_monthly_counts(&mut buf, &data, &names, SYNTH_MONTHS, SYNTH_FIRST_MONTH)?;
            out.add("counts.csv", buf);
            let members = if args.null { Vec::new() } else { truth };
            let truth = Truth {
                kind: spec.kind,
                magnitude: if args.null { 0.0 } else { spec.magnitude },
                seed: spec.seed,
                description: members
                    .iter()
                    .map(|&i| {
                        let t = SYNTH_FIRST_MONTH + (i % SYNTH_MONTHS) as i64;
                        format!("{}@{:04}-{:02}", names[i / SYNTH_MONTHS], t / 12, t % 12 + 1)
                    })
                    .collect::<Vec<_>>()
                    .join(", "),
                members: serde_json::to_value(&members)?,
            };
            out.add(
                "truth.json",
                (serde_json::to_string_pretty(&truth)? + "\n").into_bytes(),
            );
        }
        Method::Mdts => {
            let dict = synth_dictionaries();
            let mut attributes = vec![Attribute::new("time", 12)];
            attributes.extend(dict.attributes.iter().map(|(n, l)| Attribute::new(n.clone(), l.len())));
            let arities: Vec<usize> = attributes.iter().map(|a| a.arity).collect();
            let cells: f64 = arities.iter().map(|&a| a as f64).product();
            let base = BaselineTensor::constant(arities.clone(), 2000.0 / cells)?;
            let mut values: Vec<Vec<usize>> = arities.iter().map(|&n| (0..n).collect()).collect();
            values[0] = vec![9, 10, 11];
            values[1] = vec![1];
            values[2] = vec![1, 2];
            let region = Subspace::from_values(&arities, &values)?;
            let spec = InjectionSpec {
                kind: InjectionKind::MultiplicativeRisk,
                region: Region::Subspace(region.clone()),
                magnitude: if args.null { 1.0 + 1e-9 } else { 3.0 },
                seed: cfg.seed,
            };
            let (tensor, _) = synth_cases(&attributes, &base, &spec)?;
            let mut buf = Vec::new();
            write_case_rows(&mut buf, &tensor, &dict)?;
            out.add("cases.csv", buf);
            let label = |a: usize, v: usize| {
                if a == 0 {
                    dict.bin_start(v).format("%Y-%m-%d").to_string()
                } else {
                    dict.attributes[a - 1].1[v].clone()
                }
            };
            let truth = Truth {
                kind: spec.kind,
                magnitude: if args.null { 1.0 } else { spec.magnitude },
                seed: spec.seed,
                description: if args.null {
                    String::new()
                } else {
                    describe_subspace(&region, &attributes, &label)
                },
                members: if args.null {
                    serde_json::Value::Null
                } else {
                    serde_json::to_value(&values)?
                },
            };
            out.add(
                "truth.json",
                (serde_json::to_string_pretty(&truth)? + "\n").into_bytes(),
            );
        }
        Method::Both => return Err(Error::Config("synth needs --kind gpss or --kind mdts".into())),
    }
    out.write_to(&args.common.output_dir)?;
    for (name, bytes) in out.files() {
        outln!(
            "wrote {} ({} bytes)",
            args.common.output_dir.join(name).display(),
            bytes.len()
        );
    }
    Ok(())
}

fn synth_dictionaries() -> CategoryDictionaries {
    let strings = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    CategoryDictionaries {
        origin: chrono::NaiveDate::from_ymd_opt(2016, 1, 4).expect("valid date"),
        bin_days: 7,
        attributes: vec![
            ("zip".into(), strings(&["15201", "15206", "15210", "15213", "15221"])),
            ("age_decile".into(), strings(&["20-29", "30-39", "40-49", "50-59"])),
            ("gender".into(), strings(&["female", "male"])),
            ("race".into(), strings(&["black", "other", "white"])),
            ("drug_fentanyl".into(), strings(&["0", "1"])),
            ("drug_heroin".into(), strings(&["0", "1"])),
        ],
    }
}

pub fn cmd_calibrate(args: &CalibrateArgs) -> Result<()> {
    let mut cfg = RunConfig::load(args.common.config.as_deref())?;
    cfg.apply_common(&args.common);
    if let Some(t) = args.trials {
        cfg.trials = t;
    }
    if let Some(r) = args.replicas {
        cfg.calibration_replicas = r;
    }
    if let Some(a) = args.alpha {
        cfg.alpha = a;
    }
    let cal = CalibrationConfig {
        trials: cfg.trials,
        replicas: cfg.calibration_replicas,
        alpha: cfg.alpha,
        seed: cfg.seed,
        restarts: cfg.restarts,
    };
    let mut reports = Vec::new();
    if matches!(args.method, Method::Gpss | Method::Both) {
        reports.push(calibrate_gpss(&cal)?);
    }
    if matches!(args.method, Method::Mdts | Method::Both) {
        reports.push(calibrate_mdts(&cal)?);
    }
    let mut out = OutputBundle::default();
    out.add(
        "calibration.json",
        (serde_json::to_string_pretty(&reports)? + "\n").into_bytes(),
    );
    out.write_to(&args.common.output_dir)?;
    for r in &reports {
        outln!(
            "{}: {}/{} significant, empirical size {:.3} (nominal {})",
            r.method,
            r.significant,
            r.trials,
            r.rate,
            r.alpha
        );
    }
    Ok(())
}
