//! `soh`: command-line driver for the SOH estimation pipeline.
//!
//! Settings come from three layers, later layers winning:
//! built-in defaults, the TOML file given by `--config`, command-line flags.
//!
//! Config file grammar (every key optional):
//!
//! ```toml
//! seed = 7              # master seed; overrides the seeds of all sections
//! jobs = 1
//! lenient = false
//!
//! [schema]              # CSV ingestion: column mapping and validation
//! [synth]               # synthetic generator
//! [experiment]          # features, learner, split, ECM fit options
//! [transfer]            # target-domain construction and TL method
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use soh_core::dataset::{load_dataset, save_dataset, DataSchemaConfig, Dataset, DatasetId};
use soh_core::evaluation::{
    relaxation_sweep, rmse_table, run_experiment, write_predictions_csv, write_rmse_table_csv, write_sweep_csv,
    ExperimentConfig, ExperimentReport, SplitKind,
};
use soh_core::features::{extract_dataset, fit_ecm, write_features, FeatureFamily};
use soh_core::learners::{LearnerKind, ModelFile};
use soh_core::synthgen::{domain_shift_pair, gen_aging_dataset, write_truth, SynthConfig};
use soh_core::transfer::{run_transfer, TlMethod, TransferConfig};
use soh_core::{dataset, evaluation, Error, ErrorKind};

#[derive(Debug, Parser)]
#[command(name = "soh", version, about = "Battery state-of-health estimation from voltage relaxation curves")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML config file; flags override its values
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed for all randomness
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (results do not depend on this)
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    /// Downgrade plausible data-validation failures to warnings
    #[arg(long, global = true)]
    lenient: bool,
    /// Increase log verbosity (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic aging dataset with ground truth
    Synth(SynthArgs),
    /// Extract one feature family for every record
    Extract(ExtractArgs),
    /// Fit the two-RC circuit model to one relaxation curve
    FitEcm(FitEcmArgs),
    /// Train a learner on every record and save the model
    Train(TrainArgs),
    /// Run one split experiment and write its report
    Eval(EvalArgs),
    /// Run one experiment per relaxation duration
    Sweep(SweepArgs),
    /// Compare transfer-learning methods from a source to a target dataset
    Transfer(TransferArgs),
    /// Verify reports and tabulate their RMSE
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Also write a target-domain dataset with drifts moved by this fraction of their span
    #[arg(long, value_name = "F")]
    domain_shift: Option<f64>,
    /// Relaxation-voltage noise standard deviation, volts
    #[arg(long, value_name = "V")]
    noise: Option<f64>,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    /// Feature family: ecm, stats or origi
    #[arg(long)]
    features: Option<FeatureFamily>,
    /// Learner: gpr, svr, gbrt or constant_mean
    #[arg(long)]
    learner: Option<LearnerKind>,
    /// Relaxation duration in seconds (default: full curve)
    #[arg(long, value_name = "SECONDS")]
    duration: Option<f64>,
    /// Restrict to one dataset id (D1, D2, D3)
    #[arg(long)]
    dataset: Option<DatasetId>,
    /// Drop ECM records whose fit RSS exceeds this, V²
    #[arg(long, value_name = "V2")]
    max_fit_rss: Option<f64>,
}

#[derive(Debug, Args)]
struct SplitArgs {
    /// Split strategy: default, s1, s2, s3 or s4
    #[arg(long)]
    split: Option<SplitKind>,
    /// Train:test ratio for s1/s2, e.g. 1:1 or 0.5
    #[arg(long, value_name = "R")]
    ratio: Option<String>,
    /// Held-out temperature for s3, °C
    #[arg(long, value_name = "C")]
    held_out_temp: Option<f64>,
    /// Repeats for s1/s2
    #[arg(long)]
    repeats: Option<usize>,
}

#[derive(Debug, Args)]
struct ExtractArgs {
    /// Input dataset CSV
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    features: Option<FeatureFamily>,
    /// Relaxation duration in seconds (default: full curve)
    #[arg(long, value_name = "SECONDS")]
    duration: Option<f64>,
    /// Output CSV (default: stdout)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FitEcmArgs {
    /// Input dataset CSV
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    cell: String,
    #[arg(long)]
    cycle: u32,
    /// Relaxation duration in seconds (default: full curve)
    #[arg(long, value_name = "SECONDS")]
    duration: Option<f64>,
    /// Output JSON (default: stdout)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Input dataset CSV
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    exp: ExperimentArgs,
    /// Output model JSON
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Input dataset CSV
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    exp: ExperimentArgs,
    #[command(flatten)]
    split: SplitArgs,
    /// Output report JSON (default: stdout)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write per-sample predictions as CSV
    #[arg(long, value_name = "FILE")]
    predictions: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// Input dataset CSV
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated relaxation durations in seconds
    #[arg(long, value_delimiter = ',', required = true, value_name = "SECONDS")]
    durations: Vec<f64>,
    #[command(flatten)]
    exp: ExperimentArgs,
    #[command(flatten)]
    split: SplitArgs,
    /// Output directory for one report per duration and sweep.csv
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TransferArgs {
    /// Source-domain dataset CSV
    #[arg(long)]
    source: PathBuf,
    /// Target-domain dataset CSV
    #[arg(long)]
    target: PathBuf,
    #[command(flatten)]
    exp: ExperimentArgs,
    /// zsl, no_tl, tl1, tl2 or tl3 (default: all)
    #[arg(long)]
    method: Option<TlMethod>,
    /// Keep target cycles 1, 1+K, 1+2K, …
    #[arg(long, value_name = "K")]
    td_stride: Option<u32>,
    /// Target cells per condition with labels
    #[arg(long, value_name = "N")]
    td_cells: Option<usize>,
    /// Independent target-domain draws
    #[arg(long)]
    groups: Option<usize>,
    /// Output report JSON (default: stdout)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write per-group RMSE as CSV
    #[arg(long, value_name = "FILE")]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Report JSON files
    #[arg(required = true)]
    files: Vec<PathBuf>,
    /// Write an RMSE table (learner rows by feature columns) as CSV
    #[arg(long, value_name = "FILE")]
    table: Option<PathBuf>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    jobs: Option<usize>,
    lenient: bool,
    schema: DataSchemaConfig,
    synth: SynthConfig,
    experiment: ExperimentConfig,
    transfer: TransferConfig,
}

/// Fully resolved settings.
struct Settings {
    cfg: FileConfig,
}

impl Settings {
    fn resolve(g: &GlobalArgs) -> Result<Settings, Error> {
        let mut cfg = match &g.config {
            Some(path) => {
                let text = fs::read_to_string(path)?;
                toml::from_str::<FileConfig>(&text)
                    .map_err(|e| Error::Usage(format!("{}: {}", path.display(), e.message())))?
            }
            None => FileConfig::default(),
        };
        if let Some(s) = g.seed.or(cfg.seed) {
            cfg.seed = Some(s);
            cfg.synth.seed = s;
            cfg.experiment.seed = s;
        }
        if g.jobs.is_some() {
            cfg.jobs = g.jobs;
        }
        cfg.lenient |= g.lenient;
        cfg.schema.validation.lenient |= cfg.lenient;
        Ok(Settings { cfg })
    }

    fn load(&self, path: &Path) -> Result<Dataset, Error> {
        let (ds, warnings) = load_dataset(path, &self.cfg.schema)?;
        for w in warnings {
            log::warn!("{}: {w}", path.display());
        }
        Ok(ds)
    }

    fn experiment(&self, a: &ExperimentArgs) -> ExperimentConfig {
        let mut e = self.cfg.experiment.clone();
        if let Some(f) = a.features {
            e.features = f;
        }
        if let Some(l) = a.learner {
            e.learner.kind = l;
        }
        if a.duration.is_some() {
            e.relaxation_duration_s = a.duration;
        }
        if a.dataset.is_some() {
            e.dataset = a.dataset;
        }
        if a.max_fit_rss.is_some() {
            e.max_fit_rss = a.max_fit_rss;
        }
        e
    }
}

fn apply_split(e: &mut ExperimentConfig, a: &SplitArgs) -> Result<(), Error> {
    if let Some(k) = a.split {
        e.split.kind = k;
    }
    if let Some(r) = &a.ratio {
        e.split.ratio_train = evaluation::parse_ratio(r)?;
    }
    if a.held_out_temp.is_some() {
        e.split.held_out_temp_c = a.held_out_temp;
    }
    if a.repeats.is_some() {
        e.split.repeats = a.repeats;
    }
    e.split.validate()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(io::Error::other(e))
}

/// Writes `text` to `path`, or stdout when `path` is `None`.
fn emit(path: Option<&Path>, text: &str) -> Result<(), Error> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, text)?;
        }
        None => {
            let mut out = io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

fn create(path: &Path) -> Result<fs::File, Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(fs::File::create(path)?)
}

fn cmd_synth(s: &Settings, a: &SynthArgs) -> Result<(), Error> {
    let mut cfg = s.cfg.synth.clone();
    if let Some(noise) = a.noise {
        cfg = cfg.with_noise(noise);
    }
    fs::create_dir_all(&a.out)?;
    let write = |cfg: &SynthConfig, stem: &str| -> Result<(), Error> {
        let out = gen_aging_dataset(cfg)?;
        save_dataset(&out.dataset, &a.out.join(format!("{stem}.csv")))?;
        write_truth(&out.truth, create(&a.out.join(format!("{stem}_truth.csv")))?).map_err(csv_err)?;
        let echo = toml::to_string(cfg).map_err(|e| Error::Usage(e.to_string()))?;
        fs::write(a.out.join(format!("{stem}_config.toml")), echo)?;
        log::info!("{stem}: {} records from {} cells", out.dataset.len(), out.dataset.n_cells());
        Ok(())
    };
    match a.domain_shift {
        Some(shift) => {
            let (source, target) = domain_shift_pair(&cfg, shift);
            write(&source, "source")?;
            write(&target, "target")
        }
        None => write(&cfg, "dataset"),
    }
}

fn cmd_extract(s: &Settings, a: &ExtractArgs) -> Result<(), Error> {
    let ds = s.load(&a.data)?;
    let family = a.features.unwrap_or(s.cfg.experiment.features);
    let duration = a.duration.or(s.cfg.experiment.relaxation_duration_s);
    let rows = extract_dataset(&ds, family, duration, &s.cfg.experiment.ecm)?;
    let mut buf = Vec::new();
    write_features(&rows, &mut buf)?;
    match &a.out {
        Some(p) => create(p)?.write_all(&buf)?,
        None => io::stdout().lock().write_all(&buf)?,
    }
    Ok(())
}

#[derive(Serialize)]
struct EcmFitOutput<'a> {
    cell_id: &'a str,
    cycle_number: u32,
    relaxation_duration_s: f64,
    n_samples: usize,
    params: soh_core::features::EcmParams,
    tau1_s: f64,
    tau2_s: f64,
}

fn cmd_fit_ecm(s: &Settings, a: &FitEcmArgs) -> Result<(), Error> {
    let ds = s.load(&a.data)?;
    let record = ds
        .records_of_cell(&a.cell)
        .iter()
        .find(|r| r.cycle_number == a.cycle)
        .ok_or_else(|| Error::Usage(format!("no record for cell {} cycle {}", a.cell, a.cycle)))?;
    let curve = match a.duration {
        Some(d) => dataset::truncate_relaxation(&record.curve, d)?,
        None => record.curve.clone(),
    };
    let params = fit_ecm(&curve, &s.cfg.experiment.ecm)?;
    let out = EcmFitOutput {
        cell_id: record.cell_id(),
        cycle_number: record.cycle_number,
        relaxation_duration_s: curve.last_time(),
        n_samples: curve.len(),
        params,
        tau1_s: params.tau1(),
        tau2_s: params.tau2(),
    };
    emit(a.out.as_deref(), &serde_json::to_string_pretty(&out).expect("serializable"))
}

fn cmd_train(s: &Settings, a: &TrainArgs) -> Result<(), Error> {
    let ds = s.load(&a.data)?;
    let cfg = s.experiment(&a.exp);
    let ds = match cfg.dataset {
        Some(id) => ds.select_dataset(id),
        None => ds,
    };
    let table = evaluation::feature_table(&ds, &cfg)?;
    let rows: Vec<usize> = (0..ds.len()).collect();
    let model = evaluation::fit_on(&cfg.learner, &table, &rows, cfg.learner_seed(0))?;
    let file = ModelFile::new(cfg.features, cfg.relaxation_duration_s, model);
    emit(Some(&a.out), &file.to_json())
}

fn cmd_eval(s: &Settings, a: &EvalArgs) -> Result<(), Error> {
    let ds = s.load(&a.data)?;
    let mut cfg = s.experiment(&a.exp);
    apply_split(&mut cfg, &a.split)?;
    let report = run_experiment(&cfg, &ds)?;
    log::info!("rmse {:.4} % over {} records", report.rmse_pct, report.rows.len());
    if let Some(p) = &a.predictions {
        write_predictions_csv(&report, create(p)?).map_err(csv_err)?;
    }
    emit(a.out.as_deref(), &report.to_json())
}

fn cmd_sweep(s: &Settings, a: &SweepArgs) -> Result<(), Error> {
    let ds = s.load(&a.data)?;
    let mut cfg = s.experiment(&a.exp);
    apply_split(&mut cfg, &a.split)?;
    let points = relaxation_sweep(&cfg, &ds, &a.durations)?;
    fs::create_dir_all(&a.out)?;
    write_sweep_csv(&points, create(&a.out.join("sweep.csv"))?).map_err(csv_err)?;
    let mut first_err = None;
    for p in points {
        match p.result {
            Ok(r) => fs::write(a.out.join(format!("report_{}s.json", p.duration_s)), r.to_json())?,
            Err(e) => {
                log::error!("duration {} s: {e}", p.duration_s);
                first_err.get_or_insert(e);
            }
        }
    }
    match first_err {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn cmd_transfer(s: &Settings, a: &TransferArgs) -> Result<(), Error> {
    let source = s.load(&a.source)?;
    let target = s.load(&a.target)?;
    let exp = s.experiment(&a.exp);
    let mut t = s.cfg.transfer.clone();
    if a.method.is_some() {
        t.tl_method = a.method;
    }
    if let Some(k) = a.td_stride {
        t.td_stride = k;
    }
    if let Some(n) = a.td_cells {
        t.td_cells_per_condition = n;
    }
    if let Some(g) = a.groups {
        t.groups = g;
    }
    let report = run_transfer(&exp, &t, &source, &target)?;
    for m in &report.methods {
        log::info!("{}: mean rmse {:.4} %", m.method, m.mean_rmse_pct);
    }
    if let Some(p) = &a.csv {
        report.write_csv(create(p)?).map_err(csv_err)?;
    }
    emit(a.out.as_deref(), &report.to_json())
}

#[derive(Serialize)]
struct Verified<'a> {
    file: &'a str,
    family: FeatureFamily,
    learner: LearnerKind,
    relaxation_duration_s: Option<f64>,
    rmse_pct: f64,
    baseline_rmse_pct: f64,
    n_rows: usize,
}

fn cmd_report(a: &ReportArgs) -> Result<(), Error> {
    let mut reports = Vec::new();
    let mut lines = Vec::new();
    for path in &a.files {
        let text = fs::read_to_string(path)?;
        let report = ExperimentReport::from_json(&text).map_err(|e| e.context(path.display().to_string()))?;
        report.verify().map_err(|e| e.context(path.display().to_string()))?;
        let v = Verified {
            file: path.to_str().unwrap_or_default(),
            family: report.family,
            learner: report.learner,
            relaxation_duration_s: report.relaxation_duration_s,
            rmse_pct: report.rmse_pct,
            baseline_rmse_pct: report.baseline_rmse_pct,
            n_rows: report.rows.len(),
        };
        lines.push(serde_json::to_string(&v).expect("serializable"));
        reports.push(report);
    }
    if let Some(p) = &a.table {
        write_rmse_table_csv(&rmse_table(&reports), create(p)?).map_err(csv_err)?;
    }
    emit(None, &lines.join("\n"))
}

fn run(cli: Cli) -> Result<(), Error> {
    let settings = Settings::resolve(&cli.global)?;
    let jobs = settings.cfg.jobs.unwrap_or(1);
    if jobs == 0 {
        return Err(Error::Usage("--jobs must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build_global()
        .map_err(|e| Error::Usage(format!("thread pool: {e}")))?;
    match &cli.command {
        Command::Synth(a) => cmd_synth(&settings, a),
        Command::Extract(a) => cmd_extract(&settings, a),
        Command::FitEcm(a) => cmd_fit_ecm(&settings, a),
        Command::Train(a) => cmd_train(&settings, a),
        Command::Eval(a) => cmd_eval(&settings, a),
        Command::Sweep(a) => cmd_sweep(&settings, a),
        Command::Transfer(a) => cmd_transfer(&settings, a),
        Command::Report(a) => cmd_report(a),
    }
}

/// One JSON line on stderr.
fn fail(kind: ErrorKind, message: &str) -> ExitCode {
    let line = serde_json::json!({ "error": kind.as_str(), "exit_code": kind.exit_code(), "message": message });
    eprintln!("{line}");
    ExitCode::from(kind.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            let first = msg.lines().next().unwrap_or_default().trim_start_matches("error: ");
            return fail(ErrorKind::Usage, first);
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), &e.to_string()),
    }
}
