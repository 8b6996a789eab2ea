//! The reporting triangle: counts `n[t][d]` of events on date `t` first
//! reported with a delay of `d` days, as known on date `now`.

use std::collections::BTreeMap;

use chrono::{Days, NaiveDate};
use log::warn;

use super::calendar::ReportingCalendar;
use super::snapshot::Snapshot;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportingTriangle {
    now: NaiveDate,
    start: NaiveDate,
    max_delay: usize,
    rows: usize,
    cells: Vec<u64>,
    observed: Vec<bool>,
    structural_zero: Vec<bool>,
}

pub(crate) fn days_between(from: NaiveDate, to: NaiveDate) -> i64 {
    (to - from).num_days()
}

pub(crate) fn add_days(date: NaiveDate, days: usize) -> NaiveDate {
    date + Days::new(days as u64)
}

impl ReportingTriangle {
    /// Builds a triangle directly from cell counts (row-major, `max_delay + 1`
    /// columns). Structural-zero cells must be zero.
    pub fn from_cells(
        start: NaiveDate,
        now: NaiveDate,
        max_delay: usize,
        cells: Vec<u64>,
        calendar: &ReportingCalendar,
    ) -> Result<Self> {
        if now < start {
            return Err(Error::Data(format!("triangle start {start} is after now {now}")));
        }
        if max_delay < 1 {
            return Err(Error::Config("max_delay must be at least 1".into()));
        }
        let rows = days_between(start, now) as usize + 1;
        let width = max_delay + 1;
        if cells.len() != rows * width {
            return Err(Error::Data(format!(
                "expected {} cells for {rows} rows x {width} delays, got {}",
                rows * width,
                cells.len()
            )));
        }
        let mut observed = vec![false; cells.len()];
        let mut structural_zero = vec![false; cells.len()];
        for row in 0..rows {
            for d in 0..width {
                let idx = row * width + d;
                let elapsed = rows - 1 - row;
                observed[idx] = d <= elapsed;
                let report = add_days(start, row + d);
                structural_zero[idx] = d < max_delay && !calendar.is_reporting_day(report);
                if structural_zero[idx] && cells[idx] != 0 {
                    return Err(Error::Data(format!(
                        "count {} reported on non-reporting day {report}",
                        cells[idx]
                    )));
                }
                if !observed[idx] && cells[idx] != 0 {
                    return Err(Error::Data(format!(
                        "count reported after now at row {row}, delay {d}"
                    )));
                }
            }
        }
        Ok(Self {
            now,
            start,
            max_delay,
            rows,
            cells,
            observed,
            structural_zero,
        })
    }

    pub fn now(&self) -> NaiveDate {
        self.now
    }

    pub fn start(&self) -> NaiveDate {
        self.start
    }

    pub fn max_delay(&self) -> usize {
        self.max_delay
    }

    pub fn n_rows(&self) -> usize {
        self.rows
    }

    pub fn width(&self) -> usize {
        self.max_delay + 1
    }

    pub fn date(&self, row: usize) -> NaiveDate {
        add_days(self.start, row)
    }

    pub fn row_of(&self, date: NaiveDate) -> Option<usize> {
        let k = days_between(self.start, date);
        (0..self.rows as i64).contains(&k).then_some(k as usize)
    }

    pub fn row(&self, row: usize) -> &[u64] {
        let w = self.width();
        &self.cells[row * w..(row + 1) * w]
    }

    pub fn cell(&self, row: usize, d: usize) -> u64 {
        self.cells[row * self.width() + d]
    }

    pub fn cells(&self) -> &[u64] {
        &self.cells
    }

    /// True iff `t + d <= now`.
    pub fn is_observed(&self, row: usize, d: usize) -> bool {
        self.observed[row * self.width() + d]
    }

    /// True iff `d < max_delay` and `t + d` is not a reporting day.
    pub fn is_structural_zero(&self, row: usize, d: usize) -> bool {
        self.structural_zero[row * self.width() + d]
    }

    /// Number of days elapsed between the event date of `row` and `now`.
    pub fn elapsed(&self, row: usize) -> usize {
        self.rows - 1 - row
    }

    /// A row is complete once every delay up to `max_delay` has been observed.
    pub fn is_complete(&self, row: usize) -> bool {
        self.elapsed(row) >= self.max_delay
    }

    /// Events of `row` reported by `now`.
    pub fn observed_partial(&self, row: usize) -> u64 {
        self.row(row).iter().sum()
    }

    /// The last `len` event dates.
    pub fn tail(&self, len: usize) -> Result<Self> {
        if len == 0 || len > self.rows {
            return Err(Error::Data(format!(
                "window of {len} days requested but the triangle spans {} days ({} to {})",
                self.rows, self.start, self.now
            )));
        }
        let skip = self.rows - len;
        let w = self.width();
        Ok(Self {
            now: self.now,
            start: add_days(self.start, skip),
            max_delay: self.max_delay,
            rows: len,
            cells: self.cells[skip * w..].to_vec(),
            observed: self.observed[skip * w..].to_vec(),
            structural_zero: self.structural_zero[skip * w..].to_vec(),
        })
    }
}

/// Differences consecutive snapshots into per-delay increments.
///
/// Delays beyond `max_delay` are folded into the last column. A downward
/// revision clamps its cell at zero and removes the surplus from the most
/// recent non-zero cells of the same row, so row sums keep matching the last
/// snapshot.
pub fn build_triangle(
    snapshots: &[Snapshot],
    now: NaiveDate,
    max_delay: usize,
    calendar: &ReportingCalendar,
) -> Result<ReportingTriangle> {
    if snapshots.is_empty() {
        return Err(Error::Data("no snapshots".into()));
    }
    if max_delay < 1 {
        return Err(Error::Config("max_delay must be at least 1".into()));
    }
    if !calendar.is_reporting_day(now) {
        return Err(Error::Data(format!("now ({now}) is not a reporting day")));
    }
    for pair in snapshots.windows(2) {
        if pair[1].report_date <= pair[0].report_date {
            return Err(Error::Data(format!(
                "snapshots not strictly ordered by report date: {} then {}",
                pair[0].report_date, pair[1].report_date
            )));
        }
    }
    for s in snapshots {
        if s.report_date > now {
            return Err(Error::Data(format!(
                "snapshot {} is after now ({now})",
                s.report_date
            )));
        }
        if !calendar.is_reporting_day(s.report_date) {
            return Err(Error::Data(format!(
                "snapshot {} is dated on a non-reporting day",
                s.report_date
            )));
        }
    }
    let start = snapshots
        .iter()
        .filter_map(|s| s.counts.keys().next().copied())
        .min()
        .unwrap_or(now);

    let width = max_delay + 1;
    let rows = days_between(start, now) as usize + 1;
    let mut cells = vec![0u64; rows * width];
    let mut previous: BTreeMap<NaiveDate, u64> = BTreeMap::new();

    for snap in snapshots {
        for (&event, &cumulative) in &snap.counts {
            let before = previous.get(&event).copied().unwrap_or(0);
            let row = days_between(start, event) as usize;
            let delay = (days_between(event, snap.report_date) as usize).min(max_delay);
            let row_cells = &mut cells[row * width..(row + 1) * width];
            if cumulative >= before {
                row_cells[delay] += cumulative - before;
            } else {
                let mut surplus = before - cumulative;
                warn!(
                    "downward revision for {event} in report {}: {before} -> {cumulative}; clamped",
                    snap.report_date
                );
                for cell in row_cells.iter_mut().rev() {
                    let take = surplus.min(*cell);
                    *cell -= take;
                    surplus -= take;
                    if surplus == 0 {
                        break;
                    }
                }
            }
            previous.insert(event, cumulative);
        }
    }
    ReportingTriangle::from_cells(start, now, max_delay, cells, calendar)
}
