//! Reporting calendar: which calendar days publish a surveillance report.
//!
//! File format (CSV, `#` starts a comment line):
//!
//! ```text
//! kind,value
//! weekdays,0111100
//! holiday,2020-12-25
//! holiday,2021-01-01
//! ```
//!
//! The `weekdays` mask lists Monday through Sunday; `1` marks a weekday on
//! which reports are published. Holidays are never reporting days.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use chrono::{Datelike, NaiveDate, Weekday};

use crate::error::{Error, Result};

pub const DATE_FORMAT: &str = "%Y-%m-%d";

pub(crate) fn parse_date(s: &str) -> std::result::Result<NaiveDate, String> {
    NaiveDate::parse_from_str(s.trim(), DATE_FORMAT).map_err(|e| format!("malformed date {s:?}: {e}"))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportingCalendar {
    weekdays: [bool; 7],
    holidays: BTreeSet<NaiveDate>,
}

impl Default for ReportingCalendar {
    fn default() -> Self {
        Self::tuesday_to_friday()
    }
}

impl ReportingCalendar {
    /// `weekdays` is indexed Monday = 0 .. Sunday = 6.
    pub fn new(weekdays: [bool; 7], holidays: impl IntoIterator<Item = NaiveDate>) -> Result<Self> {
        if !weekdays.iter().any(|&w| w) {
            return Err(Error::Config("calendar has no reporting weekday".into()));
        }
        Ok(Self {
            weekdays,
            holidays: holidays.into_iter().collect(),
        })
    }

    /// Reports published Tuesday to Friday.
    pub fn tuesday_to_friday() -> Self {
        Self {
            weekdays: [false, true, true, true, true, false, false],
            holidays: BTreeSet::new(),
        }
    }

    pub fn every_day() -> Self {
        Self {
            weekdays: [true; 7],
            holidays: BTreeSet::new(),
        }
    }

    pub fn with_holidays(mut self, holidays: impl IntoIterator<Item = NaiveDate>) -> Self {
        self.holidays.extend(holidays);
        self
    }

    pub fn holidays(&self) -> &BTreeSet<NaiveDate> {
        &self.holidays
    }

    pub fn weekday_mask(&self) -> [bool; 7] {
        self.weekdays
    }

    pub fn is_reporting_weekday(&self, day: Weekday) -> bool {
        self.weekdays[day.num_days_from_monday() as usize]
    }

    pub fn is_reporting_day(&self, date: NaiveDate) -> bool {
        self.is_reporting_weekday(date.weekday()) && !self.holidays.contains(&date)
    }

    /// All reporting days in `from..=to`.
    pub fn reporting_days(&self, from: NaiveDate, to: NaiveDate) -> Vec<NaiveDate> {
        from.iter_days()
            .take_while(|d| *d <= to)
            .filter(|d| self.is_reporting_day(*d))
            .collect()
    }

    /// First reporting day on or after `date`.
    pub fn next_reporting_day(&self, date: NaiveDate) -> NaiveDate {
        date.iter_days()
            .find(|d| self.is_reporting_day(*d))
            .expect("a calendar with a reporting weekday always has a next reporting day")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub(crate) fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut weekdays = None;
        let mut holidays = BTreeSet::new();
        let mut seen_header = false;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i as u64 + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if !seen_header {
                if line != "kind,value" {
                    return Err(Error::parse(path, line_no, "expected header `kind,value`"));
                }
                seen_header = true;
                continue;
            }
            let (kind, value) = line
                .split_once(',')
                .ok_or_else(|| Error::parse(path, line_no, "expected `kind,value`"))?;
            match kind.trim() {
                "weekdays" => {
                    let value = value.trim();
                    if weekdays.is_some() {
                        return Err(Error::parse(path, line_no, "duplicate weekdays line"));
                    }
                    if value.len() != 7 || !value.chars().all(|c| c == '0' || c == '1') {
                        return Err(Error::parse(
                            path,
                            line_no,
                            "weekday mask must be seven 0/1 characters, Monday first",
                        ));
                    }
                    let mut mask = [false; 7];
                    for (slot, c) in mask.iter_mut().zip(value.chars()) {
                        *slot = c == '1';
                    }
                    weekdays = Some(mask);
                }
                "holiday" => {
                    let date = parse_date(value).map_err(|m| Error::parse(path, line_no, m))?;
                    holidays.insert(date);
                }
                other => {
                    return Err(Error::parse(path, line_no, format!("unknown kind {other:?}")));
                }
            }
        }
        if !seen_header {
            return Err(Error::parse(path, 1, "empty calendar file"));
        }
        let weekdays =
            weekdays.ok_or_else(|| Error::parse(path, 1, "calendar file has no weekdays line"))?;
        Self::new(weekdays, holidays).map_err(|e| Error::parse(path, 1, e.to_string()))
    }

    pub fn to_csv(&self) -> String {
        let mask: String = self.weekdays.iter().map(|&w| if w { '1' } else { '0' }).collect();
        let mut out = format!("kind,value\nweekdays,{mask}\n");
        for h in &self.holidays {
            out.push_str(&format!("holiday,{}\n", h.format(DATE_FORMAT)));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}
