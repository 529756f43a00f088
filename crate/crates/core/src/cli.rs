//! Command-line front end. Every command is a pure function of its inputs,
//! config and seed; files are written through a temporary and renamed.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baselines::BaselineError;
use crate::evaluation::{
    at_matched_fpr, prepare, prepare_on_prefix, prepare_suite, run_method, standard_suite, sweep, EvalError, Method,
    MethodConfig, Prepared, SWEEP_KAPPAS, SWEEP_WINDOWS,
};
use crate::loda_detector::LodaError;
use crate::metrics::{
    detection_delay, error_stats, gamma_grid, read_outcomes, recovered_error_stats, roc_sweep, write_outcomes,
    EpochOutcome, MetricsError, Tally,
};
use crate::pipeline::PipelineError;
use crate::simulator::{simulate_batch, SimConfig, SimError};
use crate::trace_model::{read_jsonl, write_jsonl, Trace, TraceError};

#[derive(Debug, Parser)]
#[command(name = "pads", version, about = "GNSS spoofing detection from network positions and motion data")]
pub struct Cli {
    /// Log more (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate traces.
    Simulate(SimulateArgs),
    /// Run one detector over a trace and write per-epoch outcomes.
    Detect(DetectArgs),
    /// ROC and error statistics from outcome files.
    Eval(EvalArgs),
    /// Every method on the standard attack suite at matched false-positive rates.
    Suite(SuiteArgs),
    /// PADS-A true-positive rate over window lengths and kernel widths.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "traces")]
    pub out: PathBuf,
    /// Overrides the config seed; trace `i` uses `seed + i`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    /// Print the default config and exit.
    #[arg(long)]
    pub print_defaults: bool,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[arg(long, required_unless_present = "print_defaults")]
    pub trace: Option<PathBuf>,
    /// pads-a, pads-n, pads-o, sop, kf, pf or glrt.
    #[arg(long, default_value = "pads-a")]
    pub method: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, required_unless_present = "print_defaults")]
    pub out: Option<PathBuf>,
    /// Benign trace to train on; without it the trace's own benign prefix
    /// is used.
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub print_defaults: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Outcome files, optionally `label=path`; files sharing a label are
    /// pooled. The default label is the file stem.
    #[arg(long, num_args = 1.., required = true)]
    pub outcomes: Vec<String>,
    /// `lo:hi:steps`; defaults to the observed score range in 101 steps.
    #[arg(long)]
    pub gamma_grid: Option<String>,
    #[arg(long, default_value = "eval")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SuiteArgs {
    #[arg(long, default_value_t = 1000)]
    pub seed: u64,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Target false-positive rates.
    #[arg(long, num_args = 1.., default_values_t = [0.05, 0.1, 0.15])]
    pub fpr: Vec<f64>,
    #[arg(long, default_value = "suite")]
    pub out: PathBuf,
    /// Also write per-epoch outcomes for every method at the first target.
    #[arg(long)]
    pub outcomes: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, default_value_t = 1000)]
    pub seed: u64,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub windows: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub kappas: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0.1)]
    pub fpr: f64,
    #[arg(long, default_value = "sweep")]
    pub out: PathBuf,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config {path}: {message}")]
    Config { path: String, message: String },
    #[error("{0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 1,
            CliError::Data(_) | CliError::Io { .. } => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

impl From<TraceError> for CliError {
    fn from(e: TraceError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(m) => CliError::Config {
                path: "simulation".into(),
                message: m,
            },
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::UnknownMethod(_) => CliError::Usage(e.to_string()),
            EvalError::Sim(s) => s.into(),
            EvalError::Baseline(BaselineError::NumericalFailure) => CliError::Numerical(e.to_string()),
            EvalError::Pipeline(PipelineError::Config(m)) => CliError::Config {
                path: "pipeline".into(),
                message: m,
            },
            EvalError::Pipeline(PipelineError::Training(LodaError::NonFinite(_))) => CliError::Numerical(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

/// Reads a TOML config, reporting the offending field path on errors.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<(T, String), CliError> {
    let Some(path) = path else {
        return Ok((T::default(), String::new()));
    };
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let de = toml::Deserializer::parse(&text).map_err(|e| CliError::Config {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let value = serde_path_to_error::deserialize(de).map_err(|e| CliError::Config {
        path: path.display().to_string(),
        message: format!("at `{}`: {}", e.path(), e.inner()),
    })?;
    Ok((value, text))
}

fn to_toml<T: Serialize>(v: &T) -> Result<String, CliError> {
    toml::to_string_pretty(v).map_err(|e| CliError::Numerical(e.to_string()))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `path` through a sibling temporary file and an atomic rename.
pub fn write_atomic(path: &Path, write: impl FnOnce(&mut dyn Write) -> Result<(), CliError>) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let tmp = tempfile::NamedTempFile::new_in(&dir).map_err(io_err(&dir))?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        write(&mut w)?;
        w.flush().map_err(io_err(path))?;
    }
    tmp.persist(path).map_err(|e| CliError::Io {
        path: path.display().to_string(),
        source: e.error,
    })?;
    Ok(())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    write_atomic(path, |w| {
        let mut c = csv::Writer::from_writer(w);
        for r in rows {
            c.serialize(r).map_err(|e| CliError::Data(e.to_string()))?;
        }
        c.flush().map_err(io_err(path))
    })
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), CliError> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, v).map_err(|e| CliError::Data(e.to_string()))?;
        writeln!(w).map_err(io_err(path))
    })
}

pub fn read_trace(path: &Path) -> Result<Trace, CliError> {
    let f = File::open(path).map_err(io_err(path))?;
    read_jsonl(BufReader::new(f)).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

#[derive(Debug, Serialize)]
struct Manifest {
    command: &'static str,
    config_sha256: String,
    seeds: Vec<u64>,
    files: Vec<String>,
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    if args.print_defaults {
        print!("{}", to_toml(&SimConfig::default())?);
        return Ok(());
    }
    if args.count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    let (mut cfg, _) = load_config::<SimConfig>(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let traces = simulate_batch(&cfg, args.count)?;
    let mut files = Vec::new();
    let mut seeds = Vec::new();
    for (i, trace) in traces.iter().enumerate() {
        let seed = cfg.seed + i as u64;
        let name = format!("trace-{seed}.jsonl");
        write_atomic(&args.out.join(&name), |w| write_jsonl(trace, w).map_err(CliError::from))?;
        files.push(name);
        seeds.push(seed);
    }
    let manifest = Manifest {
        command: "simulate",
        config_sha256: sha256_hex(to_toml(&cfg)?.as_bytes()),
        seeds,
        files,
    };
    write_json(&args.out.join("manifest.json"), &manifest)?;
    eprintln!("wrote {} trace(s) to {}", traces.len(), args.out.display());
    Ok(())
}

fn fmt_rate(r: Result<f64, MetricsError>) -> String {
    r.map(|v| format!("{v:.4}")).unwrap_or_else(|_| "n/a".into())
}

pub fn cmd_detect(args: &DetectArgs) -> Result<(), CliError> {
    if args.print_defaults {
        print!("{}", to_toml(&MethodConfig::default())?);
        return Ok(());
    }
    let method: Method = args.method.parse()?;
    let (cfg, _) = load_config::<MethodConfig>(args.config.as_deref())?;
    let trace_path = args.trace.as_deref().expect("clap enforces --trace");
    let out = args.out.as_deref().expect("clap enforces --out");
    let trace = read_trace(trace_path)?;
    if method == Method::Sop && !trace.has_station_data() {
        return Err(CliError::Data(format!(
            "method sop is unsupported for {}: the trace has no station positions or RSS (direct network mode)",
            trace_path.display()
        )));
    }
    let prepared: Prepared = match &args.train {
        Some(p) => prepare(method, &read_trace(p)?, &cfg)?,
        None => prepare_on_prefix(method, &trace, &cfg)?,
    };
    let outcomes = run_method(method, &trace, &cfg, &prepared, prepared.gamma)?;
    write_atomic(out, |w| write_outcomes(w, &outcomes).map_err(CliError::from))?;
    let tally = Tally::of(&outcomes);
    let delay = detection_delay(&outcomes).map(|d| format!("{d}")).unwrap_or_else(|| "n/a".into());
    println!(
        "method={} gamma={:.6} tpr={} fpr={} delta_t={} epochs={}",
        method,
        prepared.gamma,
        fmt_rate(tally.tpr()),
        fmt_rate(tally.fpr()),
        delay,
        outcomes.len()
    );
    Ok(())
}

/// Parses `lo:hi:steps`.
pub fn parse_grid(s: &str) -> Result<Vec<f64>, CliError> {
    let bad = || CliError::Usage(format!("gamma grid {s:?} is not lo:hi:steps"));
    let parts: Vec<&str> = s.split(':').collect();
    let [lo, hi, steps] = parts.as_slice() else {
        return Err(bad());
    };
    let lo: f64 = lo.parse().map_err(|_| bad())?;
    let hi: f64 = hi.parse().map_err(|_| bad())?;
    let steps: usize = steps.parse().map_err(|_| bad())?;
    if !(lo.is_finite() && hi.is_finite()) || hi < lo || steps == 0 {
        return Err(bad());
    }
    Ok(gamma_grid(lo, hi, steps))
}

#[derive(Debug, Serialize)]
struct RocRow {
    label: String,
    gamma: f64,
    tpr: f64,
    fpr: f64,
    delta_t_mean: f64,
    misses: usize,
}

#[derive(Debug, Serialize)]
struct StatsRow {
    label: String,
    mean: f64,
    median: f64,
    best20: f64,
    worst20: f64,
    count: usize,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let mut groups: BTreeMap<String, Vec<Vec<EpochOutcome>>> = BTreeMap::new();
    for spec in &args.outcomes {
        let (label, path) = match spec.split_once('=') {
            Some((l, p)) => (l.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(spec);
                let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                (stem, p)
            }
        };
        let f = File::open(&path).map_err(io_err(&path))?;
        let o = read_outcomes(BufReader::new(f)).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        groups.entry(label).or_default().push(o);
    }
    let grid = match &args.gamma_grid {
        Some(g) => parse_grid(g)?,
        None => {
            let (lo, hi) = groups
                .values()
                .flatten()
                .flatten()
                .map(|o| o.score)
                .filter(|s| s.is_finite())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), s| (a.min(s), b.max(s)));
            if lo > hi {
                return Err(CliError::Data("no finite scores".into()));
            }
            gamma_grid(lo, hi, 101)
        }
    };
    let mut roc = Vec::new();
    let mut stats = Vec::new();
    for (label, traces) in &groups {
        for p in roc_sweep(traces, &grid)? {
            roc.push(RocRow {
                label: label.clone(),
                gamma: p.gamma,
                tpr: p.tpr,
                fpr: p.fpr,
                delta_t_mean: p.delta_t_mean,
                misses: p.misses,
            });
        }
        let all: Vec<EpochOutcome> = traces.iter().flatten().copied().collect();
        match recovered_error_stats(&all) {
            Ok(s) => stats.push(StatsRow {
                label: label.clone(),
                mean: s.mean,
                median: s.median,
                best20: s.best20,
                worst20: s.worst20,
                count: s.count,
            }),
            Err(e) => tracing::warn!(%label, error = %e, "no error statistics"),
        }
    }
    write_csv(&args.out.join("roc.csv"), &roc)?;
    write_csv(&args.out.join("stats.csv"), &stats)?;
    eprintln!("wrote {} ROC rows for {} label(s) to {}", roc.len(), groups.len(), args.out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct SuiteRow {
    method: String,
    target_fpr: f64,
    gamma: f64,
    fpr: f64,
    tpr: f64,
    delta_t: Option<f64>,
    misses: usize,
}

/// Raw spoofed-GNSS error on attacked epochs, the no-defence row.
fn spoofed_errors(traces: &[&Trace]) -> Vec<f64> {
    traces
        .iter()
        .flat_map(|t| t.epochs())
        .filter(|e| e.attacked)
        .filter_map(|e| e.gnss.map(|g| g.distance(e.truth)))
        .collect()
}

pub fn cmd_suite(args: &SuiteArgs) -> Result<(), CliError> {
    let (cfg, text) = load_config::<MethodConfig>(args.config.as_deref())?;
    if args.fpr.iter().any(|f| !(0.0..=1.0).contains(f)) || args.fpr.is_empty() {
        return Err(CliError::Usage("--fpr values must lie in [0, 1]".into()));
    }
    let suite = standard_suite(args.seed)?;
    let methods = [Method::PadsA, Method::PadsN, Method::PadsO, Method::Kf, Method::Pf, Method::Glrt];
    let mut rows = Vec::new();
    let mut stats = Vec::new();
    for m in methods {
        let prepared = prepare_suite(m, &suite, &cfg)?;
        let cases: Vec<(&Trace, &Prepared)> = suite.iter().map(|c| &c.attacked).zip(&prepared).collect();
        for (i, &target) in args.fpr.iter().enumerate() {
            let op = at_matched_fpr(m, &cases, &cfg, target)?;
            eprintln!(
                "{m:7} target {target:.2}: fpr {:.3} tpr {:.3} delta_t {:?}",
                op.fpr, op.tpr, op.delta_t
            );
            if i == 0 {
                let all: Vec<EpochOutcome> = op.outcomes.iter().flatten().copied().collect();
                if let Ok(s) = recovered_error_stats(&all) {
                    stats.push(StatsRow {
                        label: m.to_string(),
                        mean: s.mean,
                        median: s.median,
                        best20: s.best20,
                        worst20: s.worst20,
                        count: s.count,
                    });
                }
                if args.outcomes {
                    for (case, o) in suite.iter().zip(&op.outcomes) {
                        let path = args.out.join(format!("{m}-{}.csv", case.name));
                        write_atomic(&path, |w| write_outcomes(w, o).map_err(CliError::from))?;
                    }
                }
            }
            rows.push(SuiteRow {
                method: m.to_string(),
                target_fpr: target,
                gamma: op.gamma,
                fpr: op.fpr,
                tpr: op.tpr,
                delta_t: op.delta_t,
                misses: op.misses,
            });
        }
    }
    let attacked: Vec<&Trace> = suite.iter().map(|c| &c.attacked).collect();
    if let Ok(s) = error_stats(&spoofed_errors(&attacked)) {
        stats.push(StatsRow {
            label: "gnss".into(),
            mean: s.mean,
            median: s.median,
            best20: s.best20,
            worst20: s.worst20,
            count: s.count,
        });
    }
    write_csv(&args.out.join("summary.csv"), &rows)?;
    write_csv(&args.out.join("stats.csv"), &stats)?;
    let seeds = suite.iter().flat_map(|c| c.seeds).collect();
    write_json(
        &args.out.join("manifest.json"),
        &Manifest {
            command: "suite",
            config_sha256: sha256_hex(text.as_bytes()),
            seeds,
            files: vec!["summary.csv".into(), "stats.csv".into()],
        },
    )
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<(), CliError> {
    let (cfg, text) = load_config::<MethodConfig>(args.config.as_deref())?;
    let windows = args.windows.clone().unwrap_or_else(|| SWEEP_WINDOWS.to_vec());
    let kappas = args.kappas.clone().unwrap_or_else(|| SWEEP_KAPPAS.to_vec());
    let suite = standard_suite(args.seed)?;
    let rows = sweep(&suite, &cfg, &windows, &kappas, args.fpr)?;
    write_csv(&args.out.join("sweep.csv"), &rows)?;
    write_json(
        &args.out.join("manifest.json"),
        &Manifest {
            command: "sweep",
            config_sha256: sha256_hex(text.as_bytes()),
            seeds: suite.iter().flat_map(|c| c.seeds).collect(),
            files: vec!["sweep.csv".into()],
        },
    )
}

/// Caps rayon's pool at `PADS_THREADS` when set.
pub fn configure_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("PADS_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| CliError::Usage(format!("PADS_THREADS={v:?} is not a positive integer")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    configure_threads()?;
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Suite(a) => cmd_suite(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("0:1:3").unwrap(), vec![0.0, 0.5, 1.0]);
        for bad in ["0:1", "1:0:3", "a:1:2", "0:1:0"] {
            assert_eq!(parse_grid(bad).unwrap_err().exit_code(), 1, "{bad}");
        }
    }

    #[test]
    fn config_errors_name_the_field() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "[attack]\ngrowth = \"fast\"\n").unwrap();
        let e = load_config::<SimConfig>(Some(&p)).unwrap_err();
        assert_eq!(e.exit_code(), 1);
        assert!(e.to_string().contains("attack.growth"), "{e}");
        fs::write(&p, "duraton = 5\n").unwrap();
        assert!(load_config::<SimConfig>(Some(&p)).is_err());
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let s = to_toml(&SimConfig::default()).unwrap();
        let back: SimConfig = toml::from_str(&s).unwrap();
        assert_eq!(back, SimConfig::default());
        let s = to_toml(&MethodConfig::default()).unwrap();
        let back: MethodConfig = toml::from_str(&s).unwrap();
        assert_eq!(back, MethodConfig::default());
    }

    #[test]
    fn atomic_write_replaces_whole_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/x.txt");
        write_atomic(&p, |w| w.write_all(b"first").map_err(io_err(Path::new("x")))).unwrap();
        write_atomic(&p, |w| w.write_all(b"second").map_err(io_err(Path::new("x")))).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "second");
        assert_eq!(fs::read_dir(dir.path().join("sub")).unwrap().count(), 1);
    }
}
