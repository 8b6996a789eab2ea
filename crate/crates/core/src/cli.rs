//! Command-line front end: `nowcast`, `evaluate`, `simulate` and `select-lag`.
//!
//! Failures print one JSON object on stderr and exit with
//! [`Error::exit_code`].

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{Days, NaiveDate};
use clap::{Args, Parser, Subcommand};
use log::warn;

use crate::config::{load_dates, RunConfig};
use crate::data::{best_lag, lag_table, load_indicator_values, load_snapshot_dir, IndicatorSeries, LagForm, Snapshot};
use crate::epi::Variant;
use crate::error::{Error, Result};
use crate::evaluate::{date_seed, model_as_of, retrospective_evaluate, McmcFitter};
use crate::inference::{sample_model, PosteriorSamples, SamplerConfig};
use crate::nowcast::{
    beta_csv, beta_summary, cumulative_csv, delay_summary_csv, nowcast_csv, nowcast_json, nowcast_model, NowcastResult,
};
use crate::posterior::Model;
use crate::simulate::{simulate_surveillance, write_simulation};

/// R-hat above which a fit is reported as unconverged.
pub const RHAT_WARNING: f64 = 1.05;

#[derive(Debug, Parser)]
#[command(name = "nowcast", version, about = "Bayesian nowcasting of delayed daily event counts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration; relative paths inside resolve against its directory.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for chains and reporting dates (default: all cores).
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Nowcast the complete counts as of one reporting date.
    Nowcast {
        #[command(flatten)]
        common: Common,
        /// Reporting date (default: latest snapshot).
        #[arg(long)]
        now: Option<NaiveDate>,
        /// Include every predictive draw in nowcast.json.
        #[arg(long)]
        draws: bool,
    },
    /// Retrospective nowcasts over a list of reporting dates, scored against the final counts.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Reporting dates, one per line.
        #[arg(long)]
        dates: Option<PathBuf>,
        /// Report date of the truth snapshot (default: latest snapshot).
        #[arg(long)]
        truth: Option<NaiveDate>,
    },
    /// Simulate snapshots from the model, with a ready-made config and date list.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Choose the lead of an indicator over the target by least squares.
    SelectLag {
        #[command(flatten)]
        common: Common,
        /// `date,value` (or `event_date,count`) target series.
        #[arg(long)]
        target: Option<PathBuf>,
        /// `date,value` indicator series.
        #[arg(long)]
        indicator: Option<PathBuf>,
        /// Inclusive lag range `MIN:MAX`.
        #[arg(long, value_parser = parse_grid)]
        grid: Option<(usize, usize)>,
        /// Inclusive fit window `FROM:TO` of target dates.
        #[arg(long, value_parser = parse_window)]
        window: Option<(NaiveDate, NaiveDate)>,
        /// Mean structure: `L` or `RL`.
        #[arg(long, value_parser = parse_form)]
        form: Option<LagForm>,
        /// Centered rolling-mean width applied to both series.
        #[arg(long)]
        smoothing: Option<usize>,
    },
}

fn parse_grid(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').unwrap_or((s, s));
    let a = a.trim().parse().map_err(|_| format!("bad lag {a:?}"))?;
    let b = b.trim().parse().map_err(|_| format!("bad lag {b:?}"))?;
    Ok((a, b))
}

fn parse_window(s: &str) -> std::result::Result<(NaiveDate, NaiveDate), String> {
    let (a, b) = s.split_once(':').ok_or("expected FROM:TO")?;
    let date = |v: &str| v.trim().parse::<NaiveDate>().map_err(|_| format!("bad date {v:?}"));
    Ok((date(a)?, date(b)?))
}

fn parse_form(s: &str) -> std::result::Result<LagForm, String> {
    match s {
        "L" => Ok(LagForm::L),
        "RL" => Ok(LagForm::RL),
        other => Err(format!("unknown form {other:?} (expected L or RL)")),
    }
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Nowcast { common, .. }
            | Command::Evaluate { common, .. }
            | Command::Simulate { common }
            | Command::SelectLag { common, .. } => common,
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::with_variant(Variant::R),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.out {
        config.output = out.clone();
    }
    Ok(config)
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn diagnostics_csv(samples: &PosteriorSamples) -> String {
    let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |v| format!("{v:.6}"));
    let mut out = String::from("parameter,rhat,ess\n");
    for d in &samples.diagnostics {
        let _ = writeln!(out, "{},{},{}", d.name, fmt(d.rhat), fmt(d.ess));
    }
    out
}

fn latest(snapshots: &[Snapshot], dir: &Path) -> Result<NaiveDate> {
    snapshots
        .last()
        .map(|s| s.report_date)
        .ok_or_else(|| Error::Data(format!("no snapshots in {}", dir.display())))
}

/// Fitted nowcast as of one reporting date.
pub struct NowcastRun {
    pub model: Model,
    pub samples: PosteriorSamples,
    pub result: NowcastResult,
}

/// Fits the configured model as of `now` (default: the config's date, else
/// the latest snapshot) and draws the predictive distribution.
pub fn run_nowcast(config: &RunConfig, now: Option<NaiveDate>) -> Result<NowcastRun> {
    let now = now.or(config.nowcast.now);
    let calendar = config.calendar()?;
    let spec = config.model_spec()?;
    let snapshots = load_snapshot_dir(&config.data.snapshots, &calendar, now)?;
    let now = match now {
        Some(date) if !snapshots.iter().any(|s| s.report_date == date) => {
            return Err(Error::Data(format!("no snapshot for reporting date {date}")));
        }
        Some(date) => date,
        None => latest(&snapshots, &config.data.snapshots)?,
    };
    let model = model_as_of(now, &spec, &snapshots, &calendar)?;
    let seed = date_seed(config.seed, now);
    let samples = sample_model(&model, &SamplerConfig { seed, ..config.sampler_config() })?;
    let result = nowcast_model(&samples, &model, seed.wrapping_add(1))?;
    Ok(NowcastRun { model, samples, result })
}

fn cmd_nowcast(config: &RunConfig, now: Option<NaiveDate>, with_draws: bool) -> Result<String> {
    let NowcastRun { model, samples, result } = run_nowcast(config, now)?;
    let now = result.now;

    let out = &config.output;
    create_dir(out)?;
    write(out, "nowcast.csv", &nowcast_csv(&result)?)?;
    write(out, "nowcast.json", &nowcast_json(&result, with_draws || config.nowcast.draws_in_json)?)?;
    write(out, "delay_summary.csv", &delay_summary_csv(&result, model.triangle()))?;
    write(out, "cumulative_reporting.csv", &cumulative_csv(&result))?;
    write(out, "diagnostics.csv", &diagnostics_csv(&samples))?;
    if model.spec().variant != Variant::R {
        write(out, "beta.csv", &beta_csv(&beta_summary(&samples, model.spec())?))?;
    }
    let max_rhat = samples.max_rhat();
    if let Some(r) = max_rhat.filter(|&r| r > RHAT_WARNING) {
        warn!("max R-hat {r:.3} exceeds {RHAT_WARNING}; consider more iterations");
    }
    let last = result.rows.last().expect("window has rows");
    Ok(format!(
        "nowcast as of {now}: {} event dates, latest observed {} (mean {:.1}); written to {}\n",
        result.rows.len(),
        last.observed_partial,
        last.mean(),
        out.display()
    ))
}

fn cmd_evaluate(config: &RunConfig, dates: Option<&Path>, truth: Option<NaiveDate>) -> Result<String> {
    let dates_file = dates
        .map(Path::to_path_buf)
        .or_else(|| config.evaluation.dates_file.clone())
        .ok_or_else(|| Error::Config("no reporting dates: pass --dates or set evaluation.dates_file".into()))?;
    let dates = load_dates(&dates_file)?;
    let calendar = config.calendar()?;
    let spec = config.model_spec()?;
    let snapshots = load_snapshot_dir(&config.data.snapshots, &calendar, None)?;
    let truth = match truth.or(config.evaluation.truth) {
        Some(date) => snapshots
            .iter()
            .find(|s| s.report_date == date)
            .ok_or_else(|| Error::Data(format!("no truth snapshot for {date}")))?,
        None => {
            latest(&snapshots, &config.data.snapshots)?;
            snapshots.last().expect("non-empty")
        }
    };
    let fitter = McmcFitter { config: config.sampler_config() };
    let report = retrospective_evaluate(&dates, &spec, &snapshots, truth, &calendar, &fitter, config.seed)?;
    for d in report.dates.iter().filter(|d| d.max_rhat.is_some_and(|r| r > RHAT_WARNING)) {
        warn!("{}: max R-hat {:.3} exceeds {RHAT_WARNING}", d.reporting_date, d.max_rhat.unwrap_or(f64::NAN));
    }

    let out = &config.output;
    create_dir(out)?;
    let aggregate = report.aggregate_json();
    write(out, "scores.csv", &report.scores_csv())?;
    write(out, "aggregate.json", &aggregate)?;
    write(out, "horizon.csv", &report.horizon_csv())?;
    write(out, "per_date.csv", &report.per_date_csv())?;
    if spec.variant != Variant::R {
        write(out, "beta_trajectory.csv", &report.beta_trajectory_csv())?;
    }
    Ok(aggregate)
}

fn cmd_simulate(config: &RunConfig) -> Result<String> {
    let sim = config.simulation_config()?;
    let output = simulate_surveillance(&sim)?;
    let out = &config.output;
    create_dir(out)?;
    write_simulation(out, &output, &sim.calendar)?;

    let truth_date = output.final_snapshot().report_date;
    let first = sim.start + Days::new(config.window_length.saturating_sub(1) as u64);
    let eligible: Vec<NaiveDate> =
        sim.calendar.reporting_days(first, sim.end()).into_iter().filter(|&d| d < truth_date).collect();
    let chosen = &eligible[eligible.len().saturating_sub(config.simulation.evaluation_dates)..];
    let mut dates = String::from("reporting_date\n");
    for d in chosen {
        let _ = writeln!(dates, "{d}");
    }
    write(out, "dates.txt", &dates)?;

    let mut run = config.clone();
    let absolute = |p: &Path| std::path::absolute(p).map_err(|e| Error::io(p, e));
    for i in &mut run.model.indicators {
        i.file = absolute(&i.file)?;
    }
    if let Some(p) = &mut run.simulation.calendar {
        *p = absolute(p)?;
    }
    run.data.snapshots = PathBuf::from("snapshots");
    run.data.calendar = PathBuf::from("calendar.csv");
    run.output = PathBuf::from("results");
    run.evaluation.dates_file = Some(PathBuf::from("dates.txt"));
    run.evaluation.truth = None;
    run.nowcast.now = None;
    run.lag_selection = Default::default();
    let json = serde_json::to_string_pretty(&run).map_err(|e| Error::Internal(e.to_string()))?;
    write(out, "config.json", &(json + "\n"))?;

    Ok(format!(
        "simulated {} days ({} snapshots, {} events); {} evaluation dates; written to {}\n",
        sim.n_days,
        output.snapshots.len(),
        output.truth.values().sum::<u64>(),
        chosen.len(),
        out.display()
    ))
}

struct LagArgs {
    target: Option<PathBuf>,
    indicator: Option<PathBuf>,
    grid: Option<(usize, usize)>,
    window: Option<(NaiveDate, NaiveDate)>,
    form: Option<LagForm>,
    smoothing: Option<usize>,
}

fn cmd_select_lag(config: &RunConfig, args: LagArgs, write_table: bool) -> Result<String> {
    let l = &config.lag_selection;
    let missing = |flag: &str| Error::Config(format!("select-lag needs --{flag} or lag_selection.{flag}"));
    let target = args.target.or_else(|| l.target.clone()).ok_or_else(|| missing("target"))?;
    let indicator = args.indicator.or_else(|| l.indicator.clone()).ok_or_else(|| missing("indicator"))?;
    let (lo, hi) = args.grid.or(l.grid).unwrap_or((0, 28));
    let window = args.window.or(l.window).ok_or_else(|| missing("window"))?;
    let form = args.form.or(l.form).unwrap_or(match config.model.variant {
        Variant::L => LagForm::L,
        _ => LagForm::RL,
    });
    let smoothing = args.smoothing.or(l.smoothing).unwrap_or(7);
    if smoothing == 0 || smoothing % 2 == 0 {
        return Err(Error::Config(format!("smoothing width must be odd, got {smoothing}")));
    }
    let target = load_indicator_values(&target)?;
    let indicator = IndicatorSeries::new("indicator", load_indicator_values(&indicator)?).with_smoothing(smoothing);
    let table = lag_table(&target, &indicator, lo..=hi, window, form)?;
    let mut csv = String::from("lag,rss,slope,intercept,n\n");
    for f in &table {
        let _ = writeln!(csv, "{},{:.6},{:.6},{:.6},{}", f.lag, f.rss, f.slope, f.intercept, f.n);
    }
    if write_table {
        create_dir(&config.output)?;
        write(&config.output, "lag_table.csv", &csv)?;
    }
    Ok(format!("selected lag: {}\n{csv}", best_lag(&table)))
}

/// Runs one command and returns its standard output.
pub fn run(cli: Cli) -> Result<String> {
    let common = cli.command.common().clone();
    let config = load_config(&common)?;
    let workers = match common.workers {
        Some(0) => return Err(Error::Config("--workers must be at least 1".into())),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Internal(format!("thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Nowcast { now, draws, .. } => cmd_nowcast(&config, now, draws),
        Command::Evaluate { dates, truth, .. } => cmd_evaluate(&config, dates.as_deref(), truth),
        Command::Simulate { .. } => cmd_simulate(&config),
        Command::SelectLag { target, indicator, grid, window, form, smoothing, .. } => cmd_select_lag(
            &config,
            LagArgs { target, indicator, grid, window, form, smoothing },
            common.out.is_some(),
        ),
    })
}

/// Machine-readable error line for standard error.
pub fn error_json(e: &Error) -> String {
    serde_json::json!({
        "error": e.kind(),
        "message": e.to_string(),
        "exit_code": e.exit_code(),
    })
    .to_string()
}

pub fn main() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(stdout) => {
            print!("{stdout}");
            0
        }
        Err(e) => {
            eprintln!("{}", error_json(&e));
            e.exit_code()
        }
    }
}
