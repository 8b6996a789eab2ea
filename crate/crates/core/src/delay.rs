//! Discrete-time hazard model for the reporting delay.
//!
//! `logit h[t][d] = gamma[d] + W[t][d] . eta` for `d < D`, `h[t][D] = 1`, and
//! `h[t][d] = 0` whenever `t + d` is not a reporting day. Delay probabilities
//! follow from `p[d] = h[d] prod_{k<d} (1 - h[k])`.
//!
//! The covariates `W` hold continuous piecewise-linear time effects with knots
//! every `spacing` days counted back from `now`, followed by six one-hot
//! weekday contrasts of the report day `t + d` against Tuesday.

use chrono::{Datelike, NaiveDate, Weekday};

use crate::data::triangle::{add_days, days_between};
use crate::data::ReportingCalendar;
use crate::error::{Error, Result};

pub const REFERENCE_WEEKDAY: Weekday = Weekday::Tue;

/// Non-reference weekdays in contrast column order.
pub const WEEKDAY_CONTRASTS: [Weekday; 6] = [
    Weekday::Mon,
    Weekday::Wed,
    Weekday::Thu,
    Weekday::Fri,
    Weekday::Sat,
    Weekday::Sun,
];

#[derive(Debug, Clone, PartialEq)]
pub struct DelayParams {
    /// Baseline logit hazards, one per delay `0..D`.
    pub gamma: Vec<f64>,
    pub eta: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct HazardDesign {
    start: NaiveDate,
    now: NaiveDate,
    max_delay: usize,
    spacing: usize,
    n_time: usize,
    rows: usize,
    x: Vec<f64>,
    reporting: Vec<bool>,
}

pub fn build_design(
    start: NaiveDate,
    now: NaiveDate,
    max_delay: usize,
    spacing: usize,
    calendar: &ReportingCalendar,
) -> Result<HazardDesign> {
    if spacing == 0 {
        return Err(Error::Config("breakpoint spacing must be at least 1".into()));
    }
    if max_delay == 0 {
        return Err(Error::Config("max_delay must be at least 1".into()));
    }
    if now < start {
        return Err(Error::Config(format!("design window {start}..{now} is empty")));
    }
    let rows = days_between(start, now) as usize + 1;
    if rows < spacing {
        return Err(Error::Config(format!(
            "design window of {rows} days is shorter than one {spacing}-day segment"
        )));
    }
    let n_time = rows.div_ceil(spacing);
    let ncov = n_time + WEEKDAY_CONTRASTS.len();
    let scale = rows as f64;
    let mut x = vec![0.0; rows * max_delay * ncov];
    let mut reporting = vec![false; rows * max_delay];
    for row in 0..rows {
        // Standardized event time: 0 at `now`, -1 one window length earlier.
        let s = -((rows - 1 - row) as f64) / scale;
        for d in 0..max_delay {
            let base = (row * max_delay + d) * ncov;
            for k in 0..n_time {
                let knot = -((k * spacing) as f64) / scale;
                x[base + k] = (s - knot).min(0.0);
            }
            let report = add_days(start, row + d);
            if let Some(j) = WEEKDAY_CONTRASTS.iter().position(|w| *w == report.weekday()) {
                x[base + n_time + j] = 1.0;
            }
            reporting[row * max_delay + d] = calendar.is_reporting_day(report);
        }
    }
    Ok(HazardDesign {
        start,
        now,
        max_delay,
        spacing,
        n_time,
        rows,
        x,
        reporting,
    })
}

impl HazardDesign {
    pub fn start(&self) -> NaiveDate {
        self.start
    }

    pub fn now(&self) -> NaiveDate {
        self.now
    }

    pub fn max_delay(&self) -> usize {
        self.max_delay
    }

    pub fn spacing(&self) -> usize {
        self.spacing
    }

    pub fn n_rows(&self) -> usize {
        self.rows
    }

    /// Number of linear time segments.
    pub fn n_time(&self) -> usize {
        self.n_time
    }

    pub fn n_covariates(&self) -> usize {
        self.n_time + WEEKDAY_CONTRASTS.len()
    }

    pub fn covariate_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.n_time).map(|k| format!("time{k}")).collect();
        names.extend(WEEKDAY_CONTRASTS.iter().map(|w| format!("{w}")));
        names
    }

    pub fn row_of(&self, date: NaiveDate) -> Option<usize> {
        let k = days_between(self.start, date);
        (0..self.rows as i64).contains(&k).then_some(k as usize)
    }

    pub fn covariates(&self, row: usize, d: usize) -> &[f64] {
        let n = self.n_covariates();
        let base = (row * self.max_delay + d) * n;
        &self.x[base..base + n]
    }

    /// Whether `t + d` is a reporting day, for `d < D`.
    pub fn is_reporting(&self, row: usize, d: usize) -> bool {
        self.reporting[row * self.max_delay + d]
    }

    /// Linear predictor `gamma[d] + W[t][d] . eta`.
    pub(crate) fn linear_predictor(&self, params: &DelayParams, row: usize, d: usize) -> f64 {
        let w = self.covariates(row, d);
        params.gamma[d] + w.iter().zip(&params.eta).map(|(a, b)| a * b).sum::<f64>()
    }

    pub(crate) fn check_params(&self, params: &DelayParams) -> Result<()> {
        if params.gamma.len() != self.max_delay || params.eta.len() != self.n_covariates() {
            return Err(Error::Domain(format!(
                "delay parameters have {} gamma / {} eta entries, design expects {} / {}",
                params.gamma.len(),
                params.eta.len(),
                self.max_delay,
                self.n_covariates()
            )));
        }
        Ok(())
    }
}

pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Hazards `h[0..=D]` for event date `t`.
pub fn hazards(params: &DelayParams, design: &HazardDesign, t: NaiveDate) -> Result<Vec<f64>> {
    design.check_params(params)?;
    let row = design
        .row_of(t)
        .ok_or_else(|| Error::Domain(format!("{t} is outside the design window")))?;
    let mut h = Vec::with_capacity(design.max_delay + 1);
    for d in 0..design.max_delay {
        if design.is_reporting(row, d) {
            h.push(logistic(design.linear_predictor(params, row, d)));
        } else {
            h.push(0.0);
        }
    }
    h.push(1.0);
    Ok(h)
}

pub fn delay_probabilities(h: &[f64]) -> Result<Vec<f64>> {
    let Some(&last) = h.last() else {
        return Err(Error::Domain("empty hazard vector".into()));
    };
    if let Some(bad) = h.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("hazard {bad} outside [0, 1]")));
    }
    if last != 1.0 {
        return Err(Error::Domain(format!("final hazard must be 1, got {last}")));
    }
    let mut survival = 1.0;
    Ok(h.iter()
        .map(|&hd| {
            let p = hd * survival;
            survival *= 1.0 - hd;
            p
        })
        .collect())
}

/// Log delay probabilities of one row, written into `out` (length `D + 1`).
/// Non-reporting cells get `-inf`.
pub(crate) fn log_delay_probabilities_into(
    params: &DelayParams,
    design: &HazardDesign,
    row: usize,
    out: &mut [f64],
) {
    let mut log_survival = 0.0;
    for d in 0..design.max_delay {
        if design.is_reporting(row, d) {
            let eta = design.linear_predictor(params, row, d);
            let sp = softplus(-eta);
            out[d] = log_survival - sp;
            log_survival -= sp + eta;
        } else {
            out[d] = f64::NEG_INFINITY;
        }
    }
    out[design.max_delay] = log_survival;
}

pub fn cumulative_reporting_probability(p: &[f64]) -> Vec<f64> {
    p.iter()
        .scan(0.0, |acc, v| {
            *acc += v;
            Some(*acc)
        })
        .collect()
}

/// First delay at which the cumulative probability reaches `q`.
pub fn delay_quantile(cumulative: &[f64], q: f64) -> usize {
    cumulative
        .iter()
        .position(|&c| c >= q - 1e-12)
        .unwrap_or(cumulative.len().saturating_sub(1))
}

/// Empirical delay distribution of a fully observed triangle row.
pub fn empirical_delay_distribution(row: &[u64]) -> Option<Vec<f64>> {
    let total: u64 = row.iter().sum();
    (total > 0).then(|| row.iter().map(|&n| n as f64 / total as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::calendar::parse_date;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn d(s: &str) -> NaiveDate {
        parse_date(s).unwrap()
    }

    /// Brute-force delay probability: P(not reported before d) * h[d].
    fn brute_p(h: &[f64], d: usize) -> f64 {
        let mut prod = 1.0;
        for &hk in &h[..d] {
            prod *= 1.0 - hk;
        }
        prod * h[d]
    }

    #[test]
    fn design_shapes() {
        let cal = ReportingCalendar::every_day();
        let now = d("2021-03-31");
        let one = build_design(now - chrono::Days::new(13), now, 5, 14, &cal).unwrap();
        assert_eq!(one.n_time(), 1);
        let six = build_design(now - chrono::Days::new(83), now, 5, 14, &cal).unwrap();
        assert_eq!(six.n_covariates(), 12);
        assert!(matches!(
            build_design(now - chrono::Days::new(12), now, 5, 14, &cal),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn hinge_terms_are_continuous_and_zero_at_now() {
        let cal = ReportingCalendar::every_day();
        let now = d("2021-03-31");
        let des = build_design(now - chrono::Days::new(83), now, 3, 14, &cal).unwrap();
        let last = des.n_rows() - 1;
        assert!(des.covariates(last, 0)[..6].iter().all(|&v| v == 0.0));
        // Each column is piecewise linear: slope changes only at its knot.
        for k in 0..6 {
            for row in 1..last {
                let a = des.covariates(row - 1, 0)[k];
                let b = des.covariates(row, 0)[k];
                let c = des.covariates(row + 1, 0)[k];
                let kink = (c - b) - (b - a);
                let elapsed = last - row;
                if elapsed != k * 14 {
                    assert!(kink.abs() < 1e-12, "col {k} row {row}");
                }
            }
        }
        // and everything is finite
        for row in 0..des.n_rows() {
            for dd in 0..3 {
                assert!(des.covariates(row, dd).iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn reference_weekday_has_zero_contrast() {
        let cal = ReportingCalendar::every_day();
        // 2021-03-29 is a Monday, so t + 1 is a Tuesday.
        let des = build_design(d("2021-03-18"), d("2021-03-31"), 3, 14, &cal).unwrap();
        let row = des.row_of(d("2021-03-29")).unwrap();
        assert!(des.covariates(row, 1)[des.n_time()..].iter().all(|&v| v == 0.0));
        assert_eq!(des.covariates(row, 0)[des.n_time()], 1.0); // Monday
    }

    #[test]
    fn zero_parameters_give_half_hazards() {
        let cal = ReportingCalendar::every_day();
        let des = build_design(d("2021-03-18"), d("2021-03-31"), 4, 14, &cal).unwrap();
        let params = DelayParams { gamma: vec![0.0; 4], eta: vec![0.0; des.n_covariates()] };
        let h = hazards(&params, &des, d("2021-03-20")).unwrap();
        assert_eq!(h, vec![0.5, 0.5, 0.5, 0.5, 1.0]);
        assert!(hazards(&params, &des, d("2021-04-01")).is_err());
    }

    #[test]
    fn non_reporting_days_have_zero_hazard() {
        let cal = ReportingCalendar::default();
        let des = build_design(d("2021-03-18"), d("2021-03-31"), 4, 14, &cal).unwrap();
        let params = DelayParams { gamma: vec![3.0; 4], eta: vec![0.7; des.n_covariates()] };
        // Friday 2021-03-19: t+2 is Sunday
        let h = hazards(&params, &des, d("2021-03-19")).unwrap();
        assert_eq!(h[1], 0.0);
        assert_eq!(h[2], 0.0);
        assert_eq!(h[3], 0.0);
        assert!(h[0] > 0.0);
        let p = delay_probabilities(&h).unwrap();
        assert_eq!(p[2], 0.0);
    }

    #[test]
    fn hazards_match_scalar_formula() {
        let cal = ReportingCalendar::default();
        let des = build_design(d("2021-01-01"), d("2021-03-31"), 10, 14, &cal).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let params = DelayParams {
                gamma: (0..10).map(|_| rng.random_range(-3.0..3.0)).collect(),
                eta: (0..des.n_covariates()).map(|_| rng.random_range(-1.0..1.0)).collect(),
            };
            let t = d("2021-01-01") + chrono::Days::new(rng.random_range(0..90));
            let h = hazards(&params, &des, t).unwrap();
            let row = des.row_of(t).unwrap();
            for dd in 0..10 {
                let report = t + chrono::Days::new(dd as u64);
                let expected = if cal.is_reporting_day(report) {
                    let mut lin = params.gamma[dd];
                    for (w, e) in des.covariates(row, dd).iter().zip(&params.eta) {
                        lin += w * e;
                    }
                    1.0 / (1.0 + (-lin).exp())
                } else {
                    0.0
                };
                assert!((h[dd] - expected).abs() < 1e-14);
            }
            assert_eq!(h[10], 1.0);
        }
    }

    #[test]
    fn probability_examples() {
        assert_eq!(delay_probabilities(&[1.0, 0.3, 0.9, 1.0]).unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(delay_probabilities(&[0.0, 0.0, 0.0, 1.0]).unwrap(), vec![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(delay_probabilities(&[0.5, 0.5, 1.0]).unwrap(), vec![0.5, 0.25, 0.25]);
        assert!(delay_probabilities(&[1.5, 1.0]).is_err());
        assert!(delay_probabilities(&[0.5, 0.9]).is_err());
    }

    #[test]
    fn cumulative_examples() {
        assert_eq!(cumulative_reporting_probability(&[1.0, 0.0, 0.0]), vec![1.0, 1.0, 1.0]);
        assert_eq!(cumulative_reporting_probability(&[0.5, 0.25, 0.25]), vec![0.5, 0.75, 1.0]);
        let ramp = cumulative_reporting_probability(&[0.25; 4]);
        assert_eq!(ramp, vec![0.25, 0.5, 0.75, 1.0]);
        assert_eq!(delay_quantile(&ramp, 0.5), 1);
        assert_eq!(delay_quantile(&ramp, 0.05), 0);
        assert_eq!(delay_quantile(&ramp, 0.95), 3);
    }

    #[test]
    fn log_probabilities_agree_with_product_formula() {
        let cal = ReportingCalendar::default();
        let des = build_design(d("2021-01-01"), d("2021-03-31"), 12, 14, &cal).unwrap();
        let params = DelayParams {
            gamma: (0..12).map(|k| -1.0 + 0.1 * k as f64).collect(),
            eta: (0..des.n_covariates()).map(|k| 0.05 * k as f64 - 0.2).collect(),
        };
        let mut lp = vec![0.0; 13];
        for row in [0, 30, 89] {
            let t = des.start() + chrono::Days::new(row as u64);
            let p = delay_probabilities(&hazards(&params, &des, t).unwrap()).unwrap();
            log_delay_probabilities_into(&params, &des, row, &mut lp);
            for dd in 0..13 {
                assert!((lp[dd].exp() - p[dd]).abs() < 1e-14, "row {row} d {dd}");
            }
        }
    }

    proptest! {
        #[test]
        fn probabilities_sum_to_one(raw in proptest::collection::vec(0.0f64..=1.0, 1..40), zero_mask in proptest::collection::vec(any::<bool>(), 40)) {
            let mut h: Vec<f64> = raw.iter().zip(&zero_mask).map(|(v, z)| if *z { 0.0 } else { *v }).collect();
            h.push(1.0);
            let p = delay_probabilities(&h).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for dd in 0..h.len() {
                prop_assert!((p[dd] - brute_p(&h, dd)).abs() < 1e-12);
                if h[dd] == 0.0 {
                    prop_assert_eq!(p[dd], 0.0);
                }
            }
        }

        #[test]
        fn raising_first_hazard_moves_mass_forward(raw in proptest::collection::vec(0.01f64..0.99, 2..20), bump in 0.001f64..0.5) {
            let mut h = raw.clone();
            h.push(1.0);
            let mut h2 = h.clone();
            h2[0] = (h[0] + bump).min(1.0);
            prop_assume!(h2[0] > h[0]);
            let p = delay_probabilities(&h).unwrap();
            let p2 = delay_probabilities(&h2).unwrap();
            prop_assert!(p2[0] > p[0]);
            for dd in 1..h.len() {
                prop_assert!(p2[dd] <= p[dd] + 1e-15);
            }
        }
    }
}
