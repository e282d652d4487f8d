//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bands::{simultaneous_bands, BandConfig};
use crate::error::{Error, Result};
use crate::estimator::{fit, FitConfig, ScoreFit, SurvivalModel};
use crate::family::{clamp_events, Family};
use crate::grouped::{group_curves, p_grid, pointwise_ci, GroupCurves, ProbabilityTransform};
use crate::io::{
    coefficient_rows, ingest, quantile_rows, write_band_result, write_csv_rows, write_json, DatasetSpec, Ingested,
    Manifest, PartitionSpec, RunConfig, MANIFEST,
};
use crate::sim::{generate, run_coverage, CoverageTargets, SimScenario};

/// Environment variable holding the default worker-thread count.
pub const THREADS_ENV: &str = "SEMITRANS_THREADS";

#[derive(Debug, Parser)]
#[command(name = "semitrans", version, about = "Transformation models for censored data with grouped quantile bands")]
pub struct Cli {
    /// Worker threads for multiplier and simulation replicates.
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the regression parameter and write the coefficient table.
    Fit(DataArgs),
    /// Fit, then write grouped quantiles with pointwise intervals.
    Quantiles(DataArgs),
    /// Fit, then write simultaneous quantile bands.
    Bands(DataArgs),
    /// Draw one synthetic sample from a scenario.
    Simulate(SimulateArgs),
    /// Monte Carlo coverage study of a scenario.
    Coverage(CoverageArgs),
    /// Repeat a run from its manifest.
    Rerun(RerunArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset recipe (JSON) or CSV with `time`, `status` and covariate columns.
    #[arg(long)]
    pub data: PathBuf,
    /// Run configuration (JSON); flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub family: Option<Family>,
    /// `column` for a categorical partition or `column:c1,c2,...` for thresholds.
    #[arg(long)]
    pub partition: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub p_min: Option<f64>,
    #[arg(long)]
    pub p_max: Option<f64>,
    #[arg(long)]
    pub p_points: Option<usize>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub transform: Option<ProbabilityTransform>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario file (JSON).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub replicate: u64,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CoverageArgs {
    /// Scenario file (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Coverage targets (JSON); defaults to the median and the [0.25, 0.75] band.
    #[arg(long)]
    pub targets: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory; defaults to the manifest's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Fully resolved request, stored in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Invocation {
    Fit { dataset: DatasetSpec, config: RunConfig },
    Quantiles { dataset: DatasetSpec, config: RunConfig },
    Bands { dataset: DatasetSpec, config: RunConfig },
    Simulate { scenario: SimScenario, replicate: u64 },
    Coverage { scenario: SimScenario, targets: CoverageTargets },
}

impl Invocation {
    fn seed(&self) -> Option<u64> {
        match self {
            Invocation::Fit { .. } | Invocation::Quantiles { .. } => None,
            Invocation::Bands { config, .. } => Some(config.seed),
            Invocation::Simulate { scenario, .. } | Invocation::Coverage { scenario, .. } => Some(scenario.seed),
        }
    }
}

fn parse_partition(s: &str) -> Result<PartitionSpec> {
    match s.split_once(':') {
        None => Ok(PartitionSpec::Categorical { column: s.to_string() }),
        Some((column, cuts)) => {
            let cuts = cuts
                .split(',')
                .map(|c| c.trim().parse::<f64>().map_err(|_| Error::InvalidInput(format!("bad partition cut '{c}'"))))
                .collect::<Result<Vec<_>>>()?;
            Ok(PartitionSpec::Thresholds { column: column.to_string(), cuts, labels: None })
        }
    }
}

fn absolute(path: &Path) -> Result<PathBuf> {
    fs::canonicalize(path).map_err(|e| Error::InvalidInput(format!("cannot open {}: {e}", path.display())))
}

fn resolve_data(args: &DataArgs) -> Result<(DatasetSpec, RunConfig)> {
    let mut dataset = if args.data.extension().is_some_and(|e| e == "json") {
        DatasetSpec::load(&args.data)?
    } else {
        let mut rdr = csv::Reader::from_path(&args.data)?;
        let covs: Vec<String> =
            rdr.headers()?.iter().filter(|h| *h != "time" && *h != "status").map(String::from).collect();
        let covs: Vec<&str> = covs.iter().map(String::as_str).collect();
        DatasetSpec::plain(args.data.clone(), "time", "status", &covs)
    };
    dataset.path = absolute(&dataset.path)?;
    if let Some(p) = &args.partition {
        dataset.partition = Some(parse_partition(p)?);
    }
    let mut config = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = args.family {
        config.family = v;
    }
    if let Some(v) = args.alpha {
        config.alpha = v;
    }
    if let Some(v) = args.p_min {
        config.p_min = v;
    }
    if let Some(v) = args.p_max {
        config.p_max = v;
    }
    if let Some(v) = args.p_points {
        config.p_points = v;
    }
    if let Some(v) = args.replicates {
        config.replicates = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.transform {
        config.transform = v;
    }
    if args.tau.is_some() {
        config.tau = args.tau;
    }
    Ok((dataset, config))
}

fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Turns parsed arguments into a resolved invocation and an output directory.
pub fn resolve(command: Command) -> Result<(Invocation, PathBuf)> {
    Ok(match command {
        Command::Fit(a) => {
            let (dataset, config) = resolve_data(&a)?;
            (Invocation::Fit { dataset, config }, a.out)
        }
        Command::Quantiles(a) => {
            let (dataset, config) = resolve_data(&a)?;
            (Invocation::Quantiles { dataset, config }, a.out)
        }
        Command::Bands(a) => {
            let (dataset, config) = resolve_data(&a)?;
            (Invocation::Bands { dataset, config }, a.out)
        }
        Command::Simulate(a) => {
            let mut scenario: SimScenario = load_json(&a.config)?;
            if let Some(s) = a.seed {
                scenario.seed = s;
            }
            (Invocation::Simulate { scenario, replicate: a.replicate }, a.out)
        }
        Command::Coverage(a) => {
            let mut scenario: SimScenario = load_json(&a.config)?;
            if let Some(s) = a.seed {
                scenario.seed = s;
            }
            if let Some(r) = a.replicates {
                scenario.replications = r;
            }
            let mut targets = match &a.targets {
                Some(p) => load_json(p)?,
                None => CoverageTargets::default(),
            };
            if let Some(alpha) = a.alpha {
                targets.alpha = alpha;
            }
            (Invocation::Coverage { scenario, targets }, a.out)
        }
        Command::Rerun(a) => {
            let manifest: Manifest<Invocation> = load_json(&a.manifest)?;
            let out = match a.out {
                Some(o) => o,
                None => a.manifest.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(".")),
            };
            (manifest.invocation, out)
        }
    })
}

/// Summary written next to the coefficient table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitSummary {
    pub family: Family,
    pub n: usize,
    pub events: usize,
    pub grid_size: usize,
    pub tau: f64,
    pub covariates: Vec<String>,
    pub theta_hat: Vec<f64>,
    pub se: Option<Vec<f64>>,
    pub score_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub sigma1: Vec<Vec<f64>>,
    pub sigma2: Vec<Vec<f64>>,
    pub standardization: Vec<(String, f64, f64)>,
    pub group_sizes: Vec<(String, usize)>,
}

fn rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Long-format curve row for plotting `F_D-hat` and `v_D-hat`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub group: String,
    pub time: f64,
    pub f_hat: f64,
    pub v_hat: f64,
}

fn curve_rows(curves: &GroupCurves) -> Vec<CurveRow> {
    curves
        .groups
        .iter()
        .flat_map(|g| {
            curves.times.iter().enumerate().map(move |(k, &t)| CurveRow {
                group: g.label.clone(),
                time: t,
                f_hat: g.f_hat[k],
                v_hat: g.v_hat[k],
            })
        })
        .collect()
}

struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
    warnings: Vec<String>,
}

impl Outputs {
    fn csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        write_csv_rows(&self.dir.join(name), rows)?;
        self.files.push(name.into());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        write_json(&self.dir.join(name), value)?;
        self.files.push(name.into());
        Ok(())
    }
}

fn fit_dataset<'a>(
    ing: &'a Ingested,
    config: &'a RunConfig,
    out: &mut Outputs,
) -> Result<(ScoreFit, SurvivalModel<'a>)> {
    let model = SurvivalModel::new(&ing.sample, &config.family, config.tau)?;
    let fc = FitConfig {
        tolerance: config.tolerance,
        max_iter: config.max_iter,
        phi_mode: config.phi_mode,
        ..FitConfig::default()
    };
    let f = fit(&model, None, &fc)?.require_converged()?;
    out.csv("coefficients.csv", &coefficient_rows(&f, &ing.covariate_names))?;
    let summary = FitSummary {
        family: config.family,
        n: model.n(),
        events: ing.sample.records().iter().filter(|r| r.event).count(),
        grid_size: model.grid.len(),
        tau: model.grid.tau,
        covariates: ing.covariate_names.clone(),
        theta_hat: f.theta_hat.clone(),
        se: f.se.clone(),
        score_norm: f.score_norm,
        iterations: f.iterations,
        converged: f.converged,
        sigma1: rows(&f.sigma1),
        sigma2: rows(&f.sigma2),
        standardization: ing.standardization.clone(),
        group_sizes: ing.partition.labels.iter().cloned().zip(ing.partition.counts()).collect(),
    };
    out.json("fit.json", &summary)?;
    Ok((f, model))
}

fn execute(inv: &Invocation, out: &mut Outputs) -> Result<()> {
    match inv {
        Invocation::Fit { dataset, config } => {
            let ing = ingest(dataset)?;
            fit_dataset(&ing, config, out)?;
        }
        Invocation::Quantiles { dataset, config } | Invocation::Bands { dataset, config } => {
            let ing = ingest(dataset)?;
            let (f, model) = fit_dataset(&ing, config, out)?;
            let curves = group_curves(&model, &f, &ing.partition)?;
            if curves.clamped_total() > 0 {
                out.warnings.push(format!("{} negative plug-in variances clamped to zero", curves.clamped_total()));
            }
            out.csv("curves.csv", &curve_rows(&curves))?;
            let grid = p_grid(config.p_min, config.p_max, config.p_points);
            let pw = pointwise_ci(&curves, &grid, config.alpha, config.transform)?;
            let rows = quantile_rows(&pw);
            let oor = rows.iter().filter(|r| r.out_of_range).count();
            if oor > 0 {
                out.warnings.push(format!("{oor} quantile rows out of range (p above the estimated cdf at tau)"));
            }
            out.csv("quantiles.csv", &rows)?;
            if matches!(inv, Invocation::Bands { .. }) {
                let bc = BandConfig {
                    alpha: config.alpha,
                    p_min: config.p_min,
                    p_max: config.p_max,
                    replicates: config.replicates,
                    seed: config.seed,
                    transform: config.transform,
                };
                let result = simultaneous_bands(&model, &f, &curves, &ing.partition, &grid, &bc)?;
                write_band_result(&out.dir, &result)?;
                out.files.push(crate::io::BAND_TABLE.into());
                out.files.push(crate::io::BAND_META.into());
            }
        }
        Invocation::Simulate { scenario, replicate } => {
            let sample = generate(scenario, *replicate)?;
            let d = scenario.dim();
            let mut w = csv::Writer::from_path(out.dir.join("sample.csv"))?;
            let mut header = vec!["time".to_string(), "status".to_string()];
            header.extend((1..=d).map(|j| format!("z{j}")));
            w.write_record(&header)?;
            for r in sample.records() {
                let mut rec = vec![r.time.to_string(), u8::from(r.event).to_string()];
                rec.extend(r.z.as_slice().iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
            w.flush()?;
            out.files.push("sample.csv".into());
        }
        Invocation::Coverage { scenario, targets } => {
            let report = run_coverage(scenario, targets)?;
            if report.failures > 0 {
                out.warnings.push(format!("{} of {} replicates failed", report.failures, report.replications));
            }
            out.csv("coverage_theta.csv", &report.theta)?;
            out.csv("coverage_quantiles.csv", &report.quantiles)?;
            out.json("coverage.json", &report)?;
        }
    }
    Ok(())
}

/// Runs an invocation into `dir` and writes its manifest.
pub fn run(inv: &Invocation, dir: &Path) -> Result<Manifest<Invocation>> {
    fs::create_dir_all(dir)?;
    let mut out = Outputs { dir: dir.to_path_buf(), files: Vec::new(), warnings: Vec::new() };
    let clamps_before = clamp_events();
    LOGGED.lock().expect("warning log poisoned").clear();
    execute(inv, &mut out)?;
    if clamp_events() > clamps_before {
        out.warnings.push(format!("{} linear predictors clamped", clamp_events() - clamps_before));
    }
    let mut warnings = std::mem::take(&mut *LOGGED.lock().expect("warning log poisoned"));
    warnings.append(&mut out.warnings);
    warnings.sort();
    warnings.dedup();
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: inv.seed(),
        invocation: inv.clone(),
        outputs: out.files,
        warnings,
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

static LOGGED: Mutex<Vec<String>> = Mutex::new(Vec::new());

/// Forwards to `env_logger` and keeps warnings for the manifest.
struct CapturingLogger {
    inner: env_logger::Logger,
}

impl log::Log for CapturingLogger {
    fn enabled(&self, metadata: &log::Metadata<'_>) -> bool {
        metadata.level() <= log::Level::Warn || self.inner.enabled(metadata)
    }

    fn log(&self, record: &log::Record<'_>) {
        if record.level() <= log::Level::Warn {
            LOGGED.lock().expect("warning log poisoned").push(record.args().to_string());
        }
        self.inner.log(record);
    }

    fn flush(&self) {
        self.inner.flush();
    }
}

fn init_logging() {
    let inner = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).build();
    let level = inner.filter().max(log::LevelFilter::Warn);
    if log::set_boxed_logger(Box::new(CapturingLogger { inner })).is_ok() {
        log::set_max_level(level);
    }
}

/// Entry point of the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    init_logging();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            log::debug!("thread pool already configured: {e}");
        }
    }
    let result = resolve(cli.command).and_then(|(inv, dir)| run(&inv, &dir));
    match result {
        Ok(m) => {
            for w in &m.warnings {
                eprintln!("warning: {w}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
