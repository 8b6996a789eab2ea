//! Leading-indicator series: smoothing, transforms and lagging.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};

use super::calendar::{parse_date, DATE_FORMAT};
use crate::error::{Error, Result};

pub type DatedSeries = BTreeMap<NaiveDate, f64>;

/// Offset added series-wide before taking logs when any value is zero.
pub const ZERO_OFFSET: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    #[default]
    Raw,
    Log,
    /// `log(x_t / x_{t-7})`
    RelativeWeeklyChange,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorSeries {
    pub name: String,
    pub values: DatedSeries,
    pub smoothing_width: usize,
    pub lag: usize,
    pub transform: Transform,
}

impl IndicatorSeries {
    pub fn new(name: impl Into<String>, values: DatedSeries) -> Self {
        Self {
            name: name.into(),
            values,
            smoothing_width: 1,
            lag: 0,
            transform: Transform::Raw,
        }
    }

    pub fn with_smoothing(mut self, width: usize) -> Self {
        self.smoothing_width = width;
        self
    }

    pub fn with_lag(mut self, lag: usize) -> Self {
        self.lag = lag;
        self
    }

    pub fn with_transform(mut self, transform: Transform) -> Self {
        self.transform = transform;
        self
    }

    /// Smoothed and transformed values, still indexed by their own date.
    pub fn prepared(&self) -> Result<DatedSeries> {
        Ok(apply_transform(&smooth(self)?)?.values)
    }

    /// Covariate value for target date `t`: the prepared series at `t - lag`.
    pub fn lagged(prepared: &DatedSeries, lag: usize, t: NaiveDate) -> Option<f64> {
        prepared.get(&(t - Days::new(lag as u64))).copied()
    }

    /// Drops values dated after `last`.
    pub fn truncated(&self, last: NaiveDate) -> Self {
        let mut out = self.clone();
        out.values = self.values.range(..=last).map(|(k, v)| (*k, *v)).collect();
        out
    }
}

/// Centered rolling mean. Dates without a complete window are dropped. The
/// result carries `smoothing_width = 1`.
pub fn smooth(series: &IndicatorSeries) -> Result<IndicatorSeries> {
    let width = series.smoothing_width;
    if width == 0 || width % 2 == 0 {
        return Err(Error::Config(format!(
            "smoothing width must be odd and >= 1, got {width} for {}",
            series.name
        )));
    }
    let half = (width / 2) as u64;
    let mut values = DatedSeries::new();
    for &date in series.values.keys() {
        let (Some(lo), Some(hi)) = (date.checked_sub_days(Days::new(half)), date.checked_add_days(Days::new(half))) else {
            continue;
        };
        let window: Vec<f64> = series.values.range(lo..=hi).map(|(_, v)| *v).collect();
        if window.len() == width {
            values.insert(date, window.iter().sum::<f64>() / width as f64);
        }
    }
    Ok(IndicatorSeries {
        values,
        smoothing_width: 1,
        ..series.clone()
    })
}

fn log_offset(series: &DatedSeries) -> f64 {
    if series.values().any(|&v| v == 0.0) {
        ZERO_OFFSET
    } else {
        0.0
    }
}

fn checked_log(date: NaiveDate, value: f64, name: &str) -> Result<f64> {
    if value > 0.0 && value.is_finite() {
        Ok(value.ln())
    } else {
        Err(Error::Domain(format!(
            "{name}: value {value} on {} is not positive after the zero offset",
            date.format(DATE_FORMAT)
        )))
    }
}

/// Applies the series' transform. The result carries `transform = Raw`.
pub fn apply_transform(series: &IndicatorSeries) -> Result<IndicatorSeries> {
    let values = transform_values(&series.values, series.transform, &series.name)?;
    Ok(IndicatorSeries {
        values,
        transform: Transform::Raw,
        ..series.clone()
    })
}

pub(crate) fn transform_values(values: &DatedSeries, transform: Transform, name: &str) -> Result<DatedSeries> {
    let offset = log_offset(values);
    match transform {
        Transform::Raw => Ok(values.clone()),
        Transform::Log => values
            .iter()
            .map(|(&date, &v)| Ok((date, checked_log(date, v + offset, name)?)))
            .collect(),
        Transform::RelativeWeeklyChange => {
            let mut out = DatedSeries::new();
            for (&date, &v) in values {
                let Some(prev) = date.checked_sub_days(Days::new(7)).and_then(|p| values.get(&p)) else {
                    continue;
                };
                let now = checked_log(date, v + offset, name)?;
                let before = checked_log(date, prev + offset, name)?;
                out.insert(date, now - before);
            }
            Ok(out)
        }
    }
}

/// Reads a `date,value` series; an `event_date,count` file such as
/// `truth.csv` is accepted as well.
pub fn load_indicator_values(path: &Path) -> Result<DatedSeries> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = rdr.headers().map_err(|e| Error::parse(path, 1, e.to_string()))?.clone();
    let names: Vec<&str> = headers.iter().collect();
    if names != ["date", "value"] && names != ["event_date", "count"] {
        return Err(Error::parse(path, 1, "expected header `date,value` or `event_date,count`"));
    }
    let mut values = DatedSeries::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            Error::parse(path, e.position().map_or(0, |p| p.line()), e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let date = parse_date(&record[0]).map_err(|m| Error::parse(path, line, m))?;
        let value: f64 = record[1]
            .parse()
            .map_err(|_| Error::parse(path, line, format!("malformed value {:?}", &record[1])))?;
        if !value.is_finite() {
            return Err(Error::parse(path, line, "non-finite value"));
        }
        if values.insert(date, value).is_some() {
            return Err(Error::parse(path, line, format!("duplicate date {date}")));
        }
    }
    Ok(values)
}

pub fn write_series(path: &Path, values: &DatedSeries) -> Result<()> {
    let mut out = String::from("date,value\n");
    for (date, v) in values {
        out.push_str(&format!("{},{v}\n", date.format(DATE_FORMAT)));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
