//! Posterior predictive distribution of the complete counts `N_t` of the
//! window, delay summaries and exports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use chrono::NaiveDate;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use rayon::prelude::*;
use serde::Serialize;

use crate::data::ReportingTriangle;
use crate::delay::{cumulative_reporting_probability, delay_quantile, log_delay_probabilities_into, DelayParams, HazardDesign};
use crate::epi::ModelSpec;
use crate::error::{Error, Result};
use crate::inference::PosteriorSamples;
use crate::posterior::{Model, ParamLayout};

/// Levels of the exported quantile columns.
pub const EXPORT_LEVELS: [f64; 5] = [0.025, 0.25, 0.5, 0.75, 0.975];

/// Estimated delay quantiles (days) of one event date.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DelaySummary {
    pub q05: usize,
    pub q50: usize,
    pub q95: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NowcastRow {
    pub event_date: NaiveDate,
    pub observed_partial: u64,
    /// One draw of `N_t` per posterior draw, chain-major.
    pub predictive_draws: Vec<u64>,
    pub delay_summary: DelaySummary,
    /// Posterior mean cumulative reporting probability over delays `0..=D`.
    pub cumulative: Vec<f64>,
}

impl NowcastRow {
    pub fn mean(&self) -> f64 {
        self.predictive_draws.iter().map(|&v| v as f64).sum::<f64>() / self.predictive_draws.len() as f64
    }

    /// Empirical delay quantiles of a complete row, if it has any events.
    pub fn empirical_delay(&self, triangle: &ReportingTriangle) -> Option<DelaySummary> {
        let row = triangle.row_of(self.event_date)?;
        if !triangle.is_complete(row) {
            return None;
        }
        let p = crate::delay::empirical_delay_distribution(triangle.row(row))?;
        Some(summarize(&cumulative_reporting_probability(&p)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NowcastResult {
    pub now: NaiveDate,
    pub rows: Vec<NowcastRow>,
}

/// Posterior summary of one regression coefficient.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoefficientSummary {
    pub name: String,
    pub mean: f64,
    pub q2_5: f64,
    pub q50: f64,
    pub q97_5: f64,
}

fn summarize(cumulative: &[f64]) -> DelaySummary {
    DelaySummary {
        q05: delay_quantile(cumulative, 0.05),
        q50: delay_quantile(cumulative, 0.5),
        q95: delay_quantile(cumulative, 0.95),
    }
}

fn layout_for(spec: &ModelSpec, triangle: &ReportingTriangle, design: &HazardDesign) -> ParamLayout {
    ParamLayout {
        n_days: triangle.n_rows(),
        n_gamma: design.max_delay(),
        n_eta: design.n_covariates(),
        n_beta: if spec.freeze_beta { 0 } else { spec.n_beta() },
    }
}

fn check_window(
    samples: &PosteriorSamples,
    spec: &ModelSpec,
    triangle: &ReportingTriangle,
    design: &HazardDesign,
) -> Result<ParamLayout> {
    if triangle.start() != design.start() || triangle.now() != design.now() {
        return Err(Error::Domain(format!(
            "triangle window {}..{} does not match design window {}..{}",
            triangle.start(),
            triangle.now(),
            design.start(),
            design.now()
        )));
    }
    if triangle.max_delay() != design.max_delay() || spec.max_delay != design.max_delay() {
        return Err(Error::Domain(format!(
            "max_delay differs: spec {}, triangle {}, design {}",
            spec.max_delay,
            triangle.max_delay(),
            design.max_delay()
        )));
    }
    let layout = layout_for(spec, triangle, design);
    let names = &samples.parameter_names;
    let first = format!("log_lambda[{}]", triangle.start());
    let last = format!("log_lambda[{}]", triangle.now());
    if names.len() != layout.dim() || names.first() != Some(&first) || names.get(layout.n_days - 1) != Some(&last) {
        return Err(Error::Domain(format!(
            "samples do not match the window {}..{} ({} parameters, expected {})",
            triangle.start(),
            triangle.now(),
            names.len(),
            layout.dim()
        )));
    }
    if samples.n_draws() == 0 {
        return Err(Error::Domain("no posterior draws".into()));
    }
    Ok(layout)
}

/// Draws the unreported remainder of one row and adds it to `observed`.
fn draw_row(rng: &mut ChaCha8Rng, observed: u64, log_lambda: f64, lp: &[f64], first_unobserved: usize, phi: f64) -> u64 {
    let mut total = observed;
    for &l in &lp[first_unobserved..] {
        let mu = (log_lambda + l).exp();
        if !(mu > 0.0) {
            continue;
        }
        let rate = Gamma::new(phi, mu / phi).map_or(mu, |g| g.sample(rng));
        if rate > 0.0 {
            if let Ok(p) = Poisson::new(rate) {
                total += p.sample(rng) as u64;
            }
        }
    }
    total
}

/// One posterior-predictive replicate of `N_t` per posterior draw, for every
/// event date of the window. Draw `k` uses its own stream of `seed`.
pub fn predictive_draws(
    samples: &PosteriorSamples,
    triangle: &ReportingTriangle,
    spec: &ModelSpec,
    design: &HazardDesign,
    seed: u64,
) -> Result<NowcastResult> {
    let layout = check_window(samples, spec, triangle, design)?;
    let rows = triangle.n_rows();
    let width = triangle.width();
    let d_max = triangle.max_delay();
    let theta: Vec<&[f64]> = samples.iter_draws().collect();

    let delay_of = |theta: &[f64]| DelayParams {
        gamma: theta[layout.gamma()].to_vec(),
        eta: theta[layout.eta()].to_vec(),
    };
    // N_t of every row, per draw
    let per_draw: Vec<Vec<u64>> = theta
        .par_iter()
        .enumerate()
        .map(|(k, theta)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let params = delay_of(theta);
            let phi = theta[layout.log_phi()].exp();
            let mut lp = vec![0.0; width];
            (0..rows)
                .map(|row| {
                    let observed = triangle.observed_partial(row);
                    let first_unobserved = triangle.elapsed(row) + 1;
                    if first_unobserved > d_max {
                        return observed;
                    }
                    log_delay_probabilities_into(&params, design, row, &mut lp);
                    draw_row(&mut rng, observed, theta[row], &lp, first_unobserved, phi)
                })
                .collect()
        })
        .collect();

    let mut mean_cumulative = vec![0.0; rows * width];
    let mut lp = vec![0.0; width];
    for theta in &theta {
        let params = delay_of(theta);
        for row in 0..rows {
            log_delay_probabilities_into(&params, design, row, &mut lp);
            let mut acc = 0.0;
            for (m, l) in mean_cumulative[row * width..(row + 1) * width].iter_mut().zip(&lp) {
                acc += l.exp();
                *m += acc;
            }
        }
    }
    let n = theta.len() as f64;
    mean_cumulative.iter_mut().for_each(|v| *v /= n);

    let rows = (0..rows)
        .map(|row| {
            let cumulative = mean_cumulative[row * width..(row + 1) * width].to_vec();
            NowcastRow {
                event_date: triangle.date(row),
                observed_partial: triangle.observed_partial(row),
                predictive_draws: per_draw.iter().map(|t| t[row]).collect(),
                delay_summary: summarize(&cumulative),
                cumulative,
            }
        })
        .collect();
    Ok(NowcastResult { now: triangle.now(), rows })
}

/// [`predictive_draws`] on the window, spec and design of a fitted model.
pub fn nowcast_model(samples: &PosteriorSamples, model: &Model, seed: u64) -> Result<NowcastResult> {
    predictive_draws(samples, model.triangle(), model.spec(), model.design(), seed)
}

/// Nearest-rank quantile of sorted values: the `ceil(q S)`-th smallest.
pub fn nearest_rank<T: Copy>(sorted: &[T], level: f64) -> Result<T> {
    if sorted.is_empty() {
        return Err(Error::Domain("quantile of an empty sample".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Domain(format!("quantile level {level} outside (0, 1)")));
    }
    let rank = (level * sorted.len() as f64 - 1e-9).ceil().max(1.0) as usize;
    Ok(sorted[rank.min(sorted.len()) - 1])
}

/// Quantiles of the predictive draws per event date, `[row][level]`.
pub fn quantiles(result: &NowcastResult, levels: &[f64]) -> Result<Vec<Vec<u64>>> {
    result
        .rows
        .iter()
        .map(|row| {
            let mut sorted = row.predictive_draws.clone();
            sorted.sort_unstable();
            levels.iter().map(|&q| nearest_rank(&sorted, q)).collect()
        })
        .collect()
}

/// Summaries of the sampled regression coefficients; empty for `R` or
/// when the coefficients are frozen.
pub fn beta_summary(samples: &PosteriorSamples, spec: &ModelSpec) -> Result<Vec<CoefficientSummary>> {
    if spec.freeze_beta {
        return Ok(Vec::new());
    }
    spec.beta_names()
        .into_iter()
        .map(|name| {
            let mut x = samples.pooled(samples.param_index(&format!("beta[{name}]"))?);
            x.sort_by(f64::total_cmp);
            Ok(CoefficientSummary {
                mean: x.iter().sum::<f64>() / x.len() as f64,
                q2_5: nearest_rank(&x, 0.025)?,
                q50: nearest_rank(&x, 0.5)?,
                q97_5: nearest_rank(&x, 0.975)?,
                name,
            })
        })
        .collect()
}

pub fn nowcast_csv(result: &NowcastResult) -> Result<String> {
    let q = quantiles(result, &EXPORT_LEVELS)?;
    let mut out = String::from("event_date,observed,q2.5,q25,q50,q75,q97.5,mean\n");
    for (row, q) in result.rows.iter().zip(&q) {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{:.4}",
            row.event_date,
            row.observed_partial,
            q[0],
            q[1],
            q[2],
            q[3],
            q[4],
            row.mean()
        );
    }
    Ok(out)
}

#[derive(Serialize)]
struct JsonRow<'a> {
    event_date: String,
    observed: u64,
    quantiles: BTreeMap<String, u64>,
    mean: f64,
    delay: DelaySummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    draws: Option<&'a [u64]>,
}

#[derive(Serialize)]
struct JsonNowcast<'a> {
    now: String,
    rows: Vec<JsonRow<'a>>,
}

pub fn nowcast_json(result: &NowcastResult, with_draws: bool) -> Result<String> {
    let q = quantiles(result, &EXPORT_LEVELS)?;
    let doc = JsonNowcast {
        now: result.now.to_string(),
        rows: result
            .rows
            .iter()
            .zip(q)
            .map(|(row, q)| JsonRow {
                event_date: row.event_date.to_string(),
                observed: row.observed_partial,
                quantiles: EXPORT_LEVELS.iter().map(|l| format!("q{}", l * 100.0)).zip(q).collect(),
                mean: row.mean(),
                delay: row.delay_summary,
                draws: with_draws.then_some(row.predictive_draws.as_slice()),
            })
            .collect(),
    };
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::Internal(e.to_string()))?;
    Ok(text + "\n")
}

/// Estimated delay quantiles per event date, with the empirical ones of
/// complete rows.
pub fn delay_summary_csv(result: &NowcastResult, triangle: &ReportingTriangle) -> String {
    let mut out = String::from("event_date,q05,q50,q95,empirical_q05,empirical_q50,empirical_q95\n");
    for row in &result.rows {
        let s = row.delay_summary;
        let e = row
            .empirical_delay(triangle)
            .map_or_else(|| ",,".to_string(), |e| format!("{},{},{}", e.q05, e.q50, e.q95));
        let _ = writeln!(out, "{},{},{},{},{e}", row.event_date, s.q05, s.q50, s.q95);
    }
    out
}

pub fn cumulative_csv(result: &NowcastResult) -> String {
    let width = result.rows.first().map_or(0, |r| r.cumulative.len());
    let mut out = String::from("event_date");
    for d in 0..width {
        let _ = write!(out, ",d{d}");
    }
    out.push('\n');
    for row in &result.rows {
        out.push_str(&row.event_date.to_string());
        for v in &row.cumulative {
            let _ = write!(out, ",{v:.6}");
        }
        out.push('\n');
    }
    out
}

pub fn beta_csv(summary: &[CoefficientSummary]) -> String {
    let mut out = String::from("coefficient,mean,q2.5,q50,q97.5\n");
    for s in summary {
        let _ = writeln!(out, "{},{:.6},{:.6},{:.6},{:.6}", s.name, s.mean, s.q2_5, s.q50, s.q97_5);
    }
    out
}
