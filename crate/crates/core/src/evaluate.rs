//! Rolling retrospective evaluation: nowcast as of each reporting date and
//! score the last days against the final counts.

use std::fmt::Write as _;

use chrono::{Datelike, NaiveDate};
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{build_triangle, ReportingCalendar, Snapshot};
use crate::epi::ModelSpec;
use crate::error::{Error, Result};
use crate::inference::{sample_model, ChainStats, PosteriorSamples, SamplerConfig};
use crate::nowcast::{beta_summary, nearest_rank, nowcast_model, CoefficientSummary};
use crate::posterior::Model;
use crate::scoring::{crps, log_score};

/// Offsets `T - 0 ..= T - 6` enter the headline scores.
pub const SCORED_OFFSETS: usize = 7;
/// Largest offset of the horizon profile.
pub const HORIZON: usize = 35;

/// Produces posterior draws for one nowcast.
pub trait Fitter: Sync {
    fn fit(&self, model: &Model, seed: u64) -> Result<PosteriorSamples>;
}

/// MCMC with the given settings; the seed is replaced per reporting date.
#[derive(Debug, Clone)]
pub struct McmcFitter {
    pub config: SamplerConfig,
}

impl Fitter for McmcFitter {
    fn fit(&self, model: &Model, seed: u64) -> Result<PosteriorSamples> {
        let config = SamplerConfig { seed, ..self.config.clone() };
        sample_model(model, &config)
    }
}

/// Degenerate "posterior" repeating one parameter vector, e.g. the
/// parameters that generated synthetic data.
pub struct FixedFitter<F> {
    pub draws: usize,
    pub theta: F,
}

impl<F: Fn(&Model) -> Result<Vec<f64>> + Sync> Fitter for FixedFitter<F> {
    fn fit(&self, model: &Model, _seed: u64) -> Result<PosteriorSamples> {
        let theta = (self.theta)(model)?;
        if theta.len() != model.dim() {
            return Err(Error::Internal(format!(
                "fixed parameters have {} entries, model has {}",
                theta.len(),
                model.dim()
            )));
        }
        let half = self.draws.div_ceil(2).max(1);
        Ok(PosteriorSamples {
            draws: vec![vec![theta; half]; 2],
            parameter_names: model.parameter_names(),
            diagnostics: Vec::new(),
            chain_stats: vec![ChainStats { acceptance: Vec::new(), step_size: None, divergences: 0 }; 2],
        })
    }
}

/// Seed of one reporting date.
pub fn date_seed(seed: u64, date: NaiveDate) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ (date.num_days_from_ce() as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Score of the nowcast of `T - offset` made on `T`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreRecord {
    pub offset: usize,
    pub event_date: String,
    pub truth: u64,
    pub median: u64,
    pub interval75: (u64, u64),
    pub interval90: (u64, u64),
    pub interval95: (u64, u64),
    pub crps: f64,
    pub log_score: f64,
    pub squared_error: f64,
}

fn inside(interval: (u64, u64), truth: u64) -> bool {
    interval.0 <= truth && truth <= interval.1
}

impl ScoreRecord {
    pub fn in75(&self) -> bool {
        inside(self.interval75, self.truth)
    }

    pub fn in90(&self) -> bool {
        inside(self.interval90, self.truth)
    }

    pub fn in95(&self) -> bool {
        inside(self.interval95, self.truth)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DateResult {
    pub reporting_date: NaiveDate,
    /// Offsets `0..=min(HORIZON, window - 1)`.
    pub records: Vec<ScoreRecord>,
    pub beta: Vec<CoefficientSummary>,
    pub max_rhat: Option<f64>,
}

impl DateResult {
    pub fn scored(&self) -> &[ScoreRecord] {
        &self.records[..SCORED_OFFSETS.min(self.records.len())]
    }

    /// Mean CRPS over `T - 6 ..= T`.
    pub fn crps7(&self) -> f64 {
        mean(self.scored().iter().map(|r| r.crps))
    }

    pub fn log_score7(&self) -> f64 {
        mean(self.scored().iter().map(|r| r.log_score))
    }

    pub fn mse7(&self) -> f64 {
        mean(self.scored().iter().map(|r| r.squared_error))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub n_dates: usize,
    pub crps: f64,
    pub logs: f64,
    pub rmse: f64,
    pub coverage_75: f64,
    pub coverage_90: f64,
    pub coverage_95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HorizonScore {
    pub offset: usize,
    pub n: usize,
    pub crps: f64,
    pub logs: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub dates: Vec<DateResult>,
    pub aggregate: Aggregate,
    pub horizon: Vec<HorizonScore>,
}

impl ScoreReport {
    /// Means over dates of the 7-day means; coverage pooled over every
    /// scored (date, offset) pair.
    pub fn from_dates(dates: Vec<DateResult>) -> Self {
        let scored: Vec<&ScoreRecord> = dates.iter().flat_map(|d| d.scored()).collect();
        let pooled = |f: fn(&ScoreRecord) -> bool| mean(scored.iter().map(|r| f64::from(u8::from(f(r)))));
        let aggregate = Aggregate {
            n_dates: dates.len(),
            crps: mean(dates.iter().map(DateResult::crps7)),
            logs: mean(dates.iter().map(DateResult::log_score7)),
            rmse: mean(dates.iter().map(DateResult::mse7)).sqrt(),
            coverage_75: pooled(ScoreRecord::in75),
            coverage_90: pooled(ScoreRecord::in90),
            coverage_95: pooled(ScoreRecord::in95),
        };
        let longest = dates.iter().map(|d| d.records.len()).max().unwrap_or(0);
        let horizon = (0..longest)
            .map(|offset| {
                let at: Vec<&ScoreRecord> = dates.iter().filter_map(|d| d.records.get(offset)).collect();
                HorizonScore {
                    offset,
                    n: at.len(),
                    crps: mean(at.iter().map(|r| r.crps)),
                    logs: mean(at.iter().map(|r| r.log_score)),
                    rmse: mean(at.iter().map(|r| r.squared_error)).sqrt(),
                }
            })
            .collect();
        Self { dates, aggregate, horizon }
    }

    /// `reporting_date,offset,crps,logs,se,in75,in90,in95` over the scored
    /// offsets.
    pub fn scores_csv(&self) -> String {
        let mut out = String::from("reporting_date,offset,crps,logs,se,in75,in90,in95\n");
        for d in &self.dates {
            for r in d.scored() {
                let _ = writeln!(
                    out,
                    "{},{},{:.6},{:.6},{:.6},{},{},{}",
                    d.reporting_date,
                    r.offset,
                    r.crps,
                    r.log_score,
                    r.squared_error,
                    u8::from(r.in75()),
                    u8::from(r.in90()),
                    u8::from(r.in95())
                );
            }
        }
        out
    }

    pub fn aggregate_json(&self) -> String {
        let a = &self.aggregate;
        // fixed precision keeps the file byte-stable
        let round = |v: f64| (v * 1e6).round() / 1e6;
        let value = serde_json::json!({
            "n_dates": a.n_dates,
            "crps": round(a.crps),
            "logs": round(a.logs),
            "rmse": round(a.rmse),
            "coverage_75": round(a.coverage_75),
            "coverage_90": round(a.coverage_90),
            "coverage_95": round(a.coverage_95),
        });
        serde_json::to_string_pretty(&value).expect("plain values serialize") + "\n"
    }

    pub fn horizon_csv(&self) -> String {
        let mut out = String::from("offset,n,crps,logs,rmse\n");
        for h in &self.horizon {
            let _ = writeln!(out, "{},{},{:.6},{:.6},{:.6}", h.offset, h.n, h.crps, h.logs, h.rmse);
        }
        out
    }

    /// Nowcast of `N_T` and the 7-day mean scores per reporting date.
    pub fn per_date_csv(&self) -> String {
        let mut out = String::from("reporting_date,truth,median,q2.5,q97.5,crps7,logs7,rmse7,max_rhat\n");
        for d in &self.dates {
            let r = &d.records[0];
            let rhat = d.max_rhat.map_or(String::new(), |v| format!("{v:.4}"));
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.6},{:.6},{:.6},{rhat}",
                d.reporting_date,
                r.truth,
                r.median,
                r.interval95.0,
                r.interval95.1,
                d.crps7(),
                d.log_score7(),
                d.mse7().sqrt()
            );
        }
        out
    }

    pub fn beta_trajectory_csv(&self) -> String {
        let mut out = String::from("reporting_date,coefficient,mean,q2.5,q50,q97.5\n");
        for d in &self.dates {
            for b in &d.beta {
                let _ = writeln!(
                    out,
                    "{},{},{:.6},{:.6},{:.6},{:.6}",
                    d.reporting_date, b.name, b.mean, b.q2_5, b.q50, b.q97_5
                );
            }
        }
        out
    }
}

fn interval(sorted: &[u64], level: f64) -> Result<(u64, u64)> {
    let tail = (1.0 - level) / 2.0;
    Ok((nearest_rank(sorted, tail)?, nearest_rank(sorted, 1.0 - tail)?))
}

/// Model fitted as of reporting date `date`: snapshots up to `date`, the
/// last `window_length` event dates and indicators truncated at `date`.
pub fn model_as_of(
    date: NaiveDate,
    spec: &ModelSpec,
    snapshots: &[Snapshot],
    calendar: &ReportingCalendar,
) -> Result<Model> {
    let known: Vec<Snapshot> = snapshots.iter().filter(|s| s.report_date <= date).cloned().collect();
    let triangle = build_triangle(&known, date, spec.max_delay, calendar)?;
    if triangle.n_rows() < spec.window_length {
        return Err(Error::Data(format!(
            "{date}: {} days of history, the window needs {}",
            triangle.n_rows(),
            spec.window_length
        )));
    }
    let mut spec = spec.clone();
    spec.indicators = spec.indicators.iter().map(|i| i.truncated(date)).collect();
    Model::new(&spec, &triangle, calendar)
}

/// Nowcast as of `date` and score it against `truth`.
fn evaluate_date(
    date: NaiveDate,
    spec: &ModelSpec,
    snapshots: &[Snapshot],
    truth: &Snapshot,
    calendar: &ReportingCalendar,
    fitter: &dyn Fitter,
    seed: u64,
) -> Result<DateResult> {
    let model = model_as_of(date, spec, snapshots, calendar)?;
    let seed = date_seed(seed, date);
    let samples = fitter.fit(&model, seed)?;
    let nowcast = nowcast_model(&samples, &model, seed.wrapping_add(1))?;
    let rows = nowcast.rows.len();
    let records = (0..=HORIZON.min(rows - 1))
        .map(|offset| {
            let row = &nowcast.rows[rows - 1 - offset];
            let mut sorted = row.predictive_draws.clone();
            sorted.sort_unstable();
            let y = truth.counts.get(&row.event_date).copied().unwrap_or(0);
            let median = nearest_rank(&sorted, 0.5)?;
            Ok(ScoreRecord {
                offset,
                event_date: row.event_date.to_string(),
                truth: y,
                median,
                interval75: interval(&sorted, 0.75)?,
                interval90: interval(&sorted, 0.90)?,
                interval95: interval(&sorted, 0.95)?,
                crps: crps(&sorted, y)?,
                log_score: log_score(&sorted, y)?,
                squared_error: (median as f64 - y as f64).powi(2),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let lambda_rhat = samples
        .diagnostics
        .iter()
        .filter(|d| d.name.starts_with("log_lambda["))
        .filter_map(|d| d.rhat)
        .reduce(f64::max);
    Ok(DateResult {
        reporting_date: date,
        records,
        beta: beta_summary(&samples, model.spec())?,
        max_rhat: lambda_rhat,
    })
}

/// Nowcasts as of every reporting date and scores them against the counts
/// of `truth`. Dates run in parallel; results are ordered as `reporting_dates`.
pub fn retrospective_evaluate(
    reporting_dates: &[NaiveDate],
    spec: &ModelSpec,
    snapshots: &[Snapshot],
    truth: &Snapshot,
    calendar: &ReportingCalendar,
    fitter: &dyn Fitter,
    seed: u64,
) -> Result<ScoreReport> {
    if reporting_dates.is_empty() {
        return Err(Error::Config("no reporting dates to evaluate".into()));
    }
    let missing: Vec<String> = reporting_dates
        .iter()
        .filter(|d| !snapshots.iter().any(|s| s.report_date == **d))
        .map(|d| d.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Data(format!("no snapshot for reporting dates {}", missing.join(", "))));
    }
    if let Some(last) = reporting_dates.iter().max().filter(|&&d| d >= truth.report_date) {
        return Err(Error::Data(format!(
            "truth snapshot {} must be later than every reporting date (latest {last})",
            truth.report_date
        )));
    }
    let dates = reporting_dates
        .par_iter()
        .map(|&date| evaluate_date(date, spec, snapshots, truth, calendar, fitter, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreReport::from_dates(dates))
}
