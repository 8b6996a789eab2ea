//! Daily cumulative report snapshots.
//!
//! One CSV per report, named `YYYY-MM-DD.csv` after the report date, with
//! header `event_date,cumulative_count`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;

use super::calendar::{parse_date, ReportingCalendar, DATE_FORMAT};
use crate::error::{Error, Result};

pub const SNAPSHOT_HEADER: [&str; 2] = ["event_date", "cumulative_count"];

/// Cumulative counts per event date as known on `report_date`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Snapshot {
    pub report_date: NaiveDate,
    pub counts: BTreeMap<NaiveDate, u64>,
}

impl Snapshot {
    pub fn new(report_date: NaiveDate, counts: BTreeMap<NaiveDate, u64>) -> Result<Self> {
        if let Some((&late, _)) = counts.range(report_date.succ_opt().unwrap()..).next() {
            return Err(Error::Data(format!(
                "snapshot {report_date}: event after report date ({late})"
            )));
        }
        Ok(Self {
            report_date,
            counts,
        })
    }

    pub fn file_name(&self) -> String {
        format!("{}.csv", self.report_date.format(DATE_FORMAT))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("event_date,cumulative_count\n");
        for (date, count) in &self.counts {
            out.push_str(&format!("{},{count}\n", date.format(DATE_FORMAT)));
        }
        out
    }

    /// Writes `<dir>/<report_date>.csv` and returns the path.
    pub fn write_to_dir(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(self.file_name());
        fs::write(&path, self.to_csv()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Report date encoded in a snapshot file name.
pub fn report_date_from_path(path: &Path) -> Result<NaiveDate> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::parse(path, 0, "snapshot file name is not valid UTF-8"))?;
    parse_date(stem).map_err(|m| Error::parse(path, 0, format!("file name: {m}")))
}

pub fn ingest_snapshot(path: &Path, calendar: &ReportingCalendar) -> Result<Snapshot> {
    let report_date = report_date_from_path(path)?;
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_snapshot(file, report_date, path, calendar)
}

pub(crate) fn parse_snapshot<R: Read>(
    reader: R,
    report_date: NaiveDate,
    path: &Path,
    calendar: &ReportingCalendar,
) -> Result<Snapshot> {
    if !calendar.is_reporting_day(report_date) {
        return Err(Error::parse(
            path,
            0,
            format!("report date {report_date} is not a reporting day"),
        ));
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::parse(path, 1, e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != SNAPSHOT_HEADER {
        return Err(Error::parse(path, 1, "expected header `event_date,cumulative_count`"));
    }
    let mut counts = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::parse(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let event_date = parse_date(&record[0]).map_err(|m| Error::parse(path, line, m))?;
        let raw = &record[1];
        let count: u64 = match raw.parse::<i64>() {
            Ok(v) if v < 0 => return Err(Error::parse(path, line, format!("negative count {v}"))),
            Ok(v) => v as u64,
            Err(_) => return Err(Error::parse(path, line, format!("malformed count {raw:?}"))),
        };
        if event_date > report_date {
            return Err(Error::parse(
                path,
                line,
                format!("event after report date: {event_date} > {report_date}"),
            ));
        }
        if counts.insert(event_date, count).is_some() {
            return Err(Error::parse(path, line, format!("duplicate event_date {event_date}")));
        }
    }
    Ok(Snapshot {
        report_date,
        counts,
    })
}

/// Loads every `YYYY-MM-DD.csv` in `dir` with report date `<= up_to` (if given),
/// sorted by report date.
pub fn load_snapshot_dir(
    dir: &Path,
    calendar: &ReportingCalendar,
    up_to: Option<NaiveDate>,
) -> Result<Vec<Snapshot>> {
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("csv") {
            continue;
        }
        let date = report_date_from_path(&path)?;
        if up_to.is_none_or(|limit| date <= limit) {
            paths.push((date, path));
        }
    }
    paths.sort();
    paths.iter().map(|(_, p)| ingest_snapshot(p, calendar)).collect()
}
