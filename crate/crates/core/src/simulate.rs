//! Synthetic surveillance data drawn from the fitted model family.
//!
//! Cells `n[t][d] ~ NB(lambda_t p[t][d], phi)` are drawn for every event date;
//! the fold column is spread uniformly over the reporting days in
//! `t + D ..= t + D + tail_spread`. Cumulative snapshots are emitted for every
//! reporting day until all events are reported.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::calendar::DATE_FORMAT;
use crate::data::triangle::add_days;
use crate::data::{IndicatorSeries, ReportingCalendar, Snapshot};
use crate::delay::{build_design, delay_probabilities, hazards, DelayParams, HazardDesign};
use crate::epi::{align_covariates, EpiModel, LatentPath, ModelSpec, Variant};
use crate::error::{Error, Result};
use crate::posterior::ParameterState;

/// How the true `log lambda` path is generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathConfig {
    pub variant: Variant,
    pub sigma: f64,
    /// `log lambda` on the first day (`R` and `RL`).
    #[serde(default)]
    pub init_log_lambda: f64,
    /// Same layout as the fitted model: `[b_0, b_1..]` for `L`, `[b_1..]` for `RL`.
    #[serde(default)]
    pub beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub start: NaiveDate,
    pub n_days: usize,
    pub max_delay: usize,
    pub breakpoint_spacing: usize,
    pub path: PathConfig,
    /// Covariates for `L` and `RL`, prepared exactly as in the fitted model.
    pub indicators: Vec<IndicatorSeries>,
    pub gamma: Vec<f64>,
    /// Hazard covariate effects; time effects are relative to the last event date.
    pub eta: Vec<f64>,
    pub phi: f64,
    pub calendar: ReportingCalendar,
    pub seed: u64,
    pub tail_spread: usize,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Baseline hazards with a slow first day and faster reporting later on.
pub fn realistic_gamma(max_delay: usize) -> Vec<f64> {
    (0..max_delay)
        .map(|d| match d {
            0 => logit(0.08),
            1..=9 => logit(0.22),
            _ => logit(0.3),
        })
        .collect()
}

/// Weekday contrasts (Mon, Wed, Thu, Fri, Sat, Sun): Tuesday clears the
/// weekend backlog, Friday reports least.
pub const REALISTIC_WEEKDAY_EFFECTS: [f64; 6] = [0.0, -0.3, -0.2, -0.5, 0.0, 0.0];

impl SimulationConfig {
    /// Random-walk path (`sigma = 0.1`, `phi = 10`, about 40 events a day),
    /// Tuesday-to-Friday reporting, weekday hazard effects and no time trend.
    pub fn realistic(start: NaiveDate, n_days: usize, max_delay: usize, seed: u64) -> Self {
        let spacing = 14;
        let n_time = n_days.div_ceil(spacing);
        let mut eta = vec![0.0; n_time];
        eta.extend_from_slice(&REALISTIC_WEEKDAY_EFFECTS);
        Self {
            start,
            n_days,
            max_delay,
            breakpoint_spacing: spacing,
            path: PathConfig {
                variant: Variant::R,
                sigma: 0.1,
                init_log_lambda: 40f64.ln(),
                beta: Vec::new(),
            },
            indicators: Vec::new(),
            gamma: realistic_gamma(max_delay),
            eta,
            phi: 10.0,
            calendar: ReportingCalendar::tuesday_to_friday(),
            seed,
            tail_spread: 7,
        }
    }

    pub fn end(&self) -> NaiveDate {
        add_days(self.start, self.n_days - 1)
    }

    pub fn design(&self) -> Result<HazardDesign> {
        build_design(self.start, self.end(), self.max_delay, self.breakpoint_spacing, &self.calendar)
    }

    fn model_spec(&self) -> ModelSpec {
        let mut spec = ModelSpec::new(self.path.variant);
        spec.indicators = self.indicators.clone();
        spec.max_delay = self.max_delay;
        spec.breakpoint_spacing = self.breakpoint_spacing;
        spec.window_length = self.n_days;
        spec
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_days < 2 {
            return Err(Error::Config("simulation needs at least 2 days".into()));
        }
        if !(self.phi > 0.0 && self.phi.is_finite()) {
            return Err(Error::Config(format!("phi must be positive, got {}", self.phi)));
        }
        if !(self.path.sigma >= 0.0 && self.path.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be non-negative, got {}", self.path.sigma)));
        }
        let spec = self.model_spec();
        spec.validate()?;
        if self.path.beta.len() != spec.n_beta() {
            return Err(Error::Config(format!(
                "variant {} with {} indicators needs {} regression coefficients, got {}",
                self.path.variant,
                self.indicators.len(),
                spec.n_beta(),
                self.path.beta.len()
            )));
        }
        if self.gamma.len() != self.max_delay {
            return Err(Error::Config(format!(
                "gamma has {} entries, max_delay is {}",
                self.gamma.len(),
                self.max_delay
            )));
        }
        let design = self.design()?;
        if self.eta.len() != design.n_covariates() {
            return Err(Error::Config(format!(
                "eta has {} entries, the hazard design has {} covariates",
                self.eta.len(),
                design.n_covariates()
            )));
        }
        Ok(())
    }
}

/// Reports of one event date on one report date.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabelledCount {
    pub event_date: NaiveDate,
    pub report_date: NaiveDate,
    pub count: u64,
}

#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub snapshots: Vec<Snapshot>,
    pub events: Vec<LabelledCount>,
    pub params: ParameterState,
    /// Generated cells, `n_days x (D + 1)` row-major, fold column included.
    pub cells: Vec<u64>,
    /// Final total per event date.
    pub truth: BTreeMap<NaiveDate, u64>,
    pub design: HazardDesign,
}

impl SimulationOutput {
    pub fn lambda(&self) -> Vec<f64> {
        self.params.path.log_lambda.iter().map(|v| v.exp()).collect()
    }

    /// Snapshot at which every event is reported.
    pub fn final_snapshot(&self) -> &Snapshot {
        self.snapshots.last().expect("simulation emits at least one snapshot")
    }
}

fn nb_draw(rng: &mut ChaCha8Rng, mu: f64, phi: f64) -> u64 {
    if mu <= 0.0 {
        return 0;
    }
    let rate = Gamma::new(phi, mu / phi).expect("positive shape and scale").sample(rng);
    if rate <= 0.0 {
        return 0;
    }
    Poisson::new(rate).expect("positive rate").sample(rng) as u64
}

pub fn simulate_surveillance(config: &SimulationConfig) -> Result<SimulationOutput> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let spec = config.model_spec();
    let covariates = align_covariates(&spec, config.start, config.n_days)?;
    let epi = EpiModel {
        variant: config.path.variant,
        covariates,
        init_mean: config.path.init_log_lambda,
        freeze_beta: false,
    };
    let sigma = config.path.sigma;
    let beta = &config.path.beta;
    let mut log_lambda = vec![0.0; config.n_days];
    for t in 0..config.n_days {
        let noise: f64 = rng.sample(StandardNormal);
        log_lambda[t] = if t == 0 && config.path.variant.has_random_walk() {
            config.path.init_log_lambda
        } else {
            epi.mean(&log_lambda, beta, t) + sigma * noise
        };
    }

    let design = config.design()?;
    let delay = DelayParams {
        gamma: config.gamma.clone(),
        eta: config.eta.clone(),
    };
    let width = config.max_delay + 1;
    let mut cells = vec![0u64; config.n_days * width];
    let mut events = Vec::new();
    let mut truth = BTreeMap::new();
    for t in 0..config.n_days {
        let date = add_days(config.start, t);
        let p = delay_probabilities(&hazards(&delay, &design, date)?)?;
        let lambda = log_lambda[t].exp();
        for d in 0..width {
            let n = nb_draw(&mut rng, lambda * p[d], config.phi);
            cells[t * width + d] = n;
            if n == 0 {
                continue;
            }
            if d < config.max_delay {
                events.push(LabelledCount { event_date: date, report_date: add_days(date, d), count: n });
            } else {
                let days = config
                    .calendar
                    .reporting_days(add_days(date, d), add_days(date, d + config.tail_spread));
                let days = if days.is_empty() {
                    vec![config.calendar.next_reporting_day(add_days(date, d))]
                } else {
                    days
                };
                let mut split = vec![0u64; days.len()];
                for _ in 0..n {
                    split[rng.random_range(0..days.len())] += 1;
                }
                for (day, count) in days.into_iter().zip(split) {
                    if count > 0 {
                        events.push(LabelledCount { event_date: date, report_date: day, count });
                    }
                }
            }
        }
        truth.insert(date, cells[t * width..(t + 1) * width].iter().sum());
    }
    events.sort_by_key(|e| (e.report_date, e.event_date));

    let last_report = config
        .calendar
        .next_reporting_day(add_days(config.end(), config.max_delay + config.tail_spread));
    let mut snapshots = Vec::new();
    let mut cumulative: BTreeMap<NaiveDate, u64> = BTreeMap::new();
    let mut next = events.iter().peekable();
    for day in config.calendar.reporting_days(config.start, last_report) {
        while let Some(e) = next.next_if(|e| e.report_date <= day) {
            *cumulative.entry(e.event_date).or_insert(0) += e.count;
        }
        let last_event = day.min(config.end());
        let counts = config
            .start
            .iter_days()
            .take_while(|d| *d <= last_event)
            .map(|d| (d, cumulative.get(&d).copied().unwrap_or(0)))
            .collect();
        snapshots.push(Snapshot::new(day, counts)?);
    }

    Ok(SimulationOutput {
        snapshots,
        events,
        params: ParameterState {
            path: LatentPath { log_lambda, sigma, beta: beta.clone() },
            delay,
            phi: config.phi,
        },
        cells,
        truth,
        design,
    })
}

/// Writes `snapshots/`, `calendar.csv`, `truth.csv` (`event_date,count`),
/// `lambda.csv` (`event_date,lambda`) and `events.csv`
/// (`event_date,report_date,count`) into `dir`.
pub fn write_simulation(dir: &Path, output: &SimulationOutput, calendar: &ReportingCalendar) -> Result<()> {
    let snap_dir = dir.join("snapshots");
    fs::create_dir_all(&snap_dir).map_err(|e| Error::io(&snap_dir, e))?;
    for s in &output.snapshots {
        s.write_to_dir(&snap_dir)?;
    }
    calendar.write(&dir.join("calendar.csv"))?;
    let mut truth = String::from("event_date,count\n");
    for (date, n) in &output.truth {
        truth.push_str(&format!("{},{n}\n", date.format(DATE_FORMAT)));
    }
    let path = dir.join("truth.csv");
    fs::write(&path, truth).map_err(|e| Error::io(&path, e))?;
    let mut lambda = String::from("event_date,lambda\n");
    for (date, l) in output.truth.keys().zip(output.lambda()) {
        lambda.push_str(&format!("{},{l}\n", date.format(DATE_FORMAT)));
    }
    let path = dir.join("lambda.csv");
    fs::write(&path, lambda).map_err(|e| Error::io(&path, e))?;
    let mut events = String::from("event_date,report_date,count\n");
    for e in &output.events {
        events.push_str(&format!(
            "{},{},{}\n",
            e.event_date.format(DATE_FORMAT),
            e.report_date.format(DATE_FORMAT),
            e.count
        ));
    }
    let path = dir.join("events.csv");
    fs::write(&path, events).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_triangle;
    use crate::data::calendar::parse_date;
    use proptest::prelude::*;

    fn base(seed: u64) -> SimulationConfig {
        SimulationConfig::realistic(parse_date("2021-01-04").unwrap(), 60, 10, seed)
    }

    #[test]
    fn zero_sigma_gives_constant_path() {
        let mut config = base(1);
        config.path.sigma = 0.0;
        let out = simulate_surveillance(&config).unwrap();
        assert!(out.params.path.log_lambda.iter().all(|&v| v == config.path.init_log_lambda));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn snapshots_rebuild_the_generated_cells(seed in 0u64..10_000, every_day in any::<bool>()) {
            let mut config = base(seed);
            if every_day {
                config.calendar = ReportingCalendar::every_day();
            }
            let out = simulate_surveillance(&config).unwrap();
            let now = out.final_snapshot().report_date;
            let tri = build_triangle(&out.snapshots, now, config.max_delay, &config.calendar).unwrap();
            prop_assert_eq!(tri.start(), config.start);
            let width = config.max_delay + 1;
            for t in 0..config.n_days {
                prop_assert_eq!(tri.row(t), &out.cells[t * width..(t + 1) * width]);
            }
            for t in config.n_days..tri.n_rows() {
                prop_assert!(tri.row(t).iter().all(|&n| n == 0));
            }
        }
    }

    #[test]
    fn no_reports_on_non_reporting_days() {
        let config = base(3);
        let out = simulate_surveillance(&config).unwrap();
        assert!(out.events.iter().all(|e| config.calendar.is_reporting_day(e.report_date)));
        assert!(out.snapshots.iter().all(|s| config.calendar.is_reporting_day(s.report_date)));
    }

    #[test]
    fn delay_frequencies_match_probabilities() {
        let mut config = base(4);
        config.path.sigma = 0.0;
        config.path.init_log_lambda = 3000f64.ln();
        config.phi = 1e6;
        let out = simulate_surveillance(&config).unwrap();
        let width = config.max_delay + 1;
        let delay = &out.params.delay;
        for d in 0..width {
            let mut observed = 0.0;
            let mut expected = 0.0;
            let mut var = 0.0;
            for t in 0..config.n_days {
                let date = add_days(config.start, t);
                let p = delay_probabilities(&hazards(delay, &out.design, date).unwrap()).unwrap();
                let mu = 3000.0 * p[d];
                observed += out.cells[t * width + d] as f64;
                expected += mu;
                var += mu + mu * mu / config.phi;
            }
            assert!((observed - expected).abs() <= 3.0 * var.sqrt() + 1e-9, "d={d}: {observed} vs {expected}");
        }
    }

    #[test]
    fn replicate_totals_average_to_lambda() {
        let reps = 300;
        let mut config = base(0);
        config.path.sigma = 0.0;
        let mut sums = vec![0.0; config.n_days];
        for r in 0..reps {
            config.seed = 1000 + r;
            let out = simulate_surveillance(&config).unwrap();
            for (t, n) in out.truth.values().enumerate() {
                sums[t] += *n as f64;
            }
        }
        let level = config.path.init_log_lambda.exp();
        let se = ((level + level * level / config.phi) / reps as f64).sqrt();
        for s in &sums {
            let mean = s / reps as f64;
            assert!((mean - level).abs() < 4.0 * se, "{mean} vs {level}");
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = simulate_surveillance(&base(9)).unwrap();
        let b = simulate_surveillance(&base(9)).unwrap();
        assert_eq!(a.cells, b.cells);
        assert_eq!(a.snapshots, b.snapshots);
    }

    #[test]
    fn config_errors() {
        let mut c = base(1);
        c.gamma.pop();
        assert!(matches!(simulate_surveillance(&c), Err(Error::Config(_))));
        let mut c = base(1);
        c.eta.pop();
        assert!(matches!(simulate_surveillance(&c), Err(Error::Config(_))));
        let mut c = base(1);
        c.phi = 0.0;
        assert!(matches!(simulate_surveillance(&c), Err(Error::Config(_))));
        let mut c = base(1);
        c.path.beta = vec![0.1];
        assert!(matches!(simulate_surveillance(&c), Err(Error::Config(_))));
    }

    #[test]
    fn regression_path_follows_indicator() {
        let start = parse_date("2021-01-04").unwrap();
        let mut c = base(2);
        c.path = PathConfig { variant: Variant::L, sigma: 0.0, init_log_lambda: 0.0, beta: vec![1.0, 1.0] };
        let values = (0..200).map(|i| (add_days(start, 0) - chrono::Days::new(60) + chrono::Days::new(i), 10.0 + i as f64)).collect();
        c.indicators = vec![IndicatorSeries::new("x", values).with_lag(3).with_transform(crate::data::Transform::Log)];
        let out = simulate_surveillance(&c).unwrap();
        for (t, v) in out.params.path.log_lambda.iter().enumerate() {
            let source = add_days(start, t) - chrono::Days::new(3);
            let x = c.indicators[0].values[&source];
            assert!((v - (1.0 + x.ln())).abs() < 1e-12);
        }
    }
}
