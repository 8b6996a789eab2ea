//! Pre-fit selection of the lead time between an indicator and the target.
//!
//! For each candidate lag an ordinary least-squares fit of the chosen mean
//! structure is computed over the fit window; the lag with the smallest
//! residual sum of squares wins, ties going to the smaller lag.
//!
//! * `L`: `log y_t ~ a + b log x_{t-lag}`
//! * `RL`: `log(y_t / y_{t-7}) ~ b log(x_{t-lag} / x_{t-lag-7})` (no intercept)
//!
//! Both series are smoothed with the indicator's smoothing width first, and
//! the zero-offset rule of the log transform applies to each.

use std::ops::RangeInclusive;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::indicator::{smooth, transform_values, DatedSeries, IndicatorSeries, Transform};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LagForm {
    L,
    RL,
}

impl LagForm {
    fn transform(self) -> Transform {
        match self {
            LagForm::L => Transform::Log,
            LagForm::RL => Transform::RelativeWeeklyChange,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LagFit {
    pub lag: usize,
    pub rss: f64,
    pub slope: f64,
    pub intercept: f64,
    pub n: usize,
}

/// Least-squares fit of `y` on `x`, with or without intercept.
fn ols(x: &[f64], y: &[f64], intercept: bool) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let (mx, my) = if intercept {
        (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n)
    } else {
        (0.0, 0.0)
    };
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let a = my - slope * mx;
    let rss = x.iter().zip(y).map(|(u, v)| (v - a - slope * u).powi(2)).sum();
    (a, slope, rss)
}

/// Residual sum of squares for every lag in `grid`.
pub fn lag_table(
    target: &DatedSeries,
    indicator: &IndicatorSeries,
    grid: RangeInclusive<usize>,
    fit_window: (NaiveDate, NaiveDate),
    form: LagForm,
) -> Result<Vec<LagFit>> {
    if grid.is_empty() {
        return Err(Error::Config("lag grid is empty".into()));
    }
    let (first, last) = fit_window;
    if last < first {
        return Err(Error::Config(format!("empty fit window {first}..{last}")));
    }
    let width = indicator.smoothing_width;
    let target_series = IndicatorSeries::new("target", target.clone()).with_smoothing(width);
    let y_all = transform_values(&smooth(&target_series)?.values, form.transform(), "target")?;
    let x_all = transform_values(&smooth(indicator)?.values, form.transform(), &indicator.name)?;

    let dates: Vec<NaiveDate> = first.iter_days().take_while(|d| *d <= last).collect();
    let mut ys = Vec::with_capacity(dates.len());
    for &t in &dates {
        ys.push(*y_all.get(&t).ok_or_else(|| {
            Error::Data(format!("target has no usable value on {t} within the fit window"))
        })?);
    }
    let mut table = Vec::new();
    for lag in grid {
        let mut xs = Vec::with_capacity(dates.len());
        for &t in &dates {
            let x = IndicatorSeries::lagged(&x_all, lag, t).ok_or_else(|| {
                Error::Data(format!(
                    "insufficient overlap for lag {lag}: {} has no usable value for {t}",
                    indicator.name
                ))
            })?;
            xs.push(x);
        }
        let (intercept, slope, rss) = ols(&xs, &ys, form == LagForm::L);
        table.push(LagFit {
            lag,
            rss,
            slope,
            intercept,
            n: xs.len(),
        });
    }
    Ok(table)
}

/// Lag with the smallest residual sum of squares.
pub fn select_lag(
    target: &DatedSeries,
    indicator: &IndicatorSeries,
    grid: RangeInclusive<usize>,
    fit_window: (NaiveDate, NaiveDate),
    form: LagForm,
) -> Result<usize> {
    let table = lag_table(target, indicator, grid, fit_window, form)?;
    Ok(best_lag(&table))
}

/// Lag with the smallest RSS in a non-empty table; near-ties go to the
/// smaller lag.
pub fn best_lag(table: &[LagFit]) -> usize {
    // Differences below this are rounding noise; the earlier (smaller) lag wins.
    let scale = table.iter().map(|f| f.rss).fold(0.0, f64::max).max(1.0) * 1e-12;
    let mut best = table[0];
    for fit in &table[1..] {
        if fit.rss < best.rss - scale {
            best = *fit;
        }
    }
    best.lag
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::calendar::parse_date;
    use chrono::Days;
    use rand::{Rng, SeedableRng};

    fn curve(start: NaiveDate, len: usize) -> DatedSeries {
        (0..len)
            .map(|i| {
                let x = i as f64;
                (start + Days::new(i as u64), 40.0 + 25.0 * (x / 17.0).sin() + 10.0 * (x / 41.0).cos() + 0.05 * x)
            })
            .collect()
    }

    #[test]
    fn shifted_copy_recovers_every_shift() {
        let start = parse_date("2020-03-01").unwrap();
        let target = curve(start, 260);
        let window = (parse_date("2020-05-01").unwrap(), parse_date("2020-09-30").unwrap());
        for shift in 0..=28usize {
            // indicator leads the target by `shift` days
            let indicator: DatedSeries = target
                .iter()
                .filter_map(|(d, v)| d.checked_sub_days(Days::new(shift as u64)).map(|s| (s, *v * 0.3)))
                .collect();
            let ind = IndicatorSeries::new("ind", indicator).with_smoothing(7);
            for form in [LagForm::L, LagForm::RL] {
                let lag = select_lag(&target, &ind, 0..=28, window, form).unwrap();
                assert_eq!(lag, shift, "form {form:?}");
            }
        }
    }

    #[test]
    fn white_noise_returns_lag_in_grid() {
        let start = parse_date("2020-03-01").unwrap();
        let target = curve(start, 260);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let noise: DatedSeries = target.keys().map(|d| (*d, rng.random_range(5.0..50.0))).collect();
        let ind = IndicatorSeries::new("noise", noise).with_smoothing(7);
        let window = (parse_date("2020-05-01").unwrap(), parse_date("2020-09-30").unwrap());
        let table = lag_table(&target, &ind, 0..=28, window, LagForm::L).unwrap();
        let lag = best_lag(&table);
        assert!(lag <= 28);
        // exhaustive grid: nothing beats the chosen one
        let chosen = table.iter().find(|f| f.lag == lag).unwrap().rss;
        assert!(table.iter().all(|f| f.rss >= chosen - 1e-9));
    }

    #[test]
    fn ties_go_to_smaller_lag() {
        let fit = |lag, rss| LagFit { lag, rss, slope: 0.0, intercept: 0.0, n: 1 };
        assert_eq!(best_lag(&[fit(0, 2.0), fit(1, 1.0), fit(2, 1.0)]), 1);
        assert_eq!(best_lag(&[fit(3, 1.0), fit(4, 1.0 - 1e-15)]), 3);
    }

    #[test]
    fn errors() {
        let start = parse_date("2020-03-01").unwrap();
        let target = curve(start, 60);
        let ind = IndicatorSeries::new("ind", target.clone()).with_smoothing(7);
        let window = (parse_date("2020-03-20").unwrap(), parse_date("2020-04-20").unwrap());
        #[allow(clippy::reversed_empty_ranges)]
        let empty = 5..=4;
        assert!(matches!(select_lag(&target, &ind, empty, window, LagForm::L), Err(Error::Config(_))));
        let err = select_lag(&target, &ind, 0..=28, window, LagForm::L).unwrap_err();
        assert!(err.to_string().contains("insufficient overlap for lag"), "{err}");
    }
}
