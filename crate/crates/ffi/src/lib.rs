//! C ABI over the nowcasting library.
//!
//! Every fallible function returns an [`NcStatus`] and writes its result
//! through an out-pointer. On failure a message is available from
//! [`nc_last_error`] on the calling thread until the next failing call.
//! Handles are opaque and released with their `_free` function; pointers
//! passed in must be valid for the stated length, strings NUL-terminated
//! UTF-8, and handles not used after being freed.
#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use chrono::NaiveDate;
use nowcast_core::cli::run_nowcast;
use nowcast_core::config::RunConfig;
use nowcast_core::data::{build_triangle, load_snapshot_dir, ReportingCalendar, ReportingTriangle};
use nowcast_core::delay::delay_probabilities;
use nowcast_core::nowcast::nearest_rank;
use nowcast_core::posterior::nb_logpmf;
use nowcast_core::scoring::{crps, log_score};
use nowcast_core::Error;

/// Result codes; 2 to 4 match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DataError = 3,
    InferenceError = 4,
    Panic = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure {
    status: NcStatus,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.exit_code() {
            2 => NcStatus::InvalidArgument,
            3 => NcStatus::DataError,
            _ => NcStatus::InferenceError,
        };
        Failure { status, message: e.to_string() }
    }
}

fn fail(status: NcStatus, message: impl Into<String>) -> Failure {
    Failure { status, message: message.into() }
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).expect("NUL bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> NcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => NcStatus::Ok,
        Ok(Err(failure)) => {
            set_error(failure.message);
            failure.status
        }
        Err(payload) => {
            let message = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {message}"));
            NcStatus::Panic
        }
    }
}

unsafe fn out_ref<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| fail(NcStatus::NullPointer, format!("{name} is NULL")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(NcStatus::NullPointer, format!("{name} is NULL")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn string<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(NcStatus::NullPointer, format!("{name} is NULL")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(NcStatus::InvalidArgument, format!("{name} is not UTF-8")))
}

/// `None` for a NULL pointer.
unsafe fn optional_date(p: *const c_char, name: &str) -> Result<Option<NaiveDate>, Failure> {
    if p.is_null() {
        return Ok(None);
    }
    let s = string(p, name)?;
    s.parse()
        .map(Some)
        .map_err(|_| fail(NcStatus::InvalidArgument, format!("{name} {s:?} is not YYYY-MM-DD")))
}

/// Message of the last failure on this thread, or NULL.
#[no_mangle]
pub extern "C" fn nc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn nc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Sample CRPS of `n` predictive draws against `truth`.
#[no_mangle]
pub unsafe extern "C" fn nc_crps(draws: *const u64, n: usize, truth: u64, out: *mut f64) -> NcStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = crps(slice(draws, n, "draws")?, truth)?;
        Ok(())
    })
}

/// Log score of `n` predictive draws against `truth`.
#[no_mangle]
pub unsafe extern "C" fn nc_log_score(draws: *const u64, n: usize, truth: u64, out: *mut f64) -> NcStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = log_score(slice(draws, n, "draws")?, truth)?;
        Ok(())
    })
}

/// Negative binomial log pmf with mean `mu` and size `phi`.
#[no_mangle]
pub unsafe extern "C" fn nc_nb_logpmf(y: u64, mu: f64, phi: f64, out: *mut f64) -> NcStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        *out = nb_logpmf(y, mu, phi)?;
        Ok(())
    })
}

/// Delay probabilities from `n` hazards whose last entry is 1; writes `n` values.
#[no_mangle]
pub unsafe extern "C" fn nc_delay_probabilities(hazards: *const f64, n: usize, out: *mut f64) -> NcStatus {
    guard(|| {
        let h = slice(hazards, n, "hazards")?;
        let p = delay_probabilities(h)?;
        if out.is_null() {
            return Err(fail(NcStatus::NullPointer, "out is NULL"));
        }
        std::slice::from_raw_parts_mut(out, n).copy_from_slice(&p);
        Ok(())
    })
}

/// Reporting triangle built from a snapshot directory.
pub struct NcTriangle {
    inner: ReportingTriangle,
}

/// Builds the triangle as of `now` (NULL: latest snapshot) from the
/// `YYYY-MM-DD.csv` snapshots in `snapshot_dir`.
#[no_mangle]
pub unsafe extern "C" fn nc_triangle_load(
    snapshot_dir: *const c_char,
    calendar_path: *const c_char,
    now: *const c_char,
    max_delay: usize,
    out: *mut *mut NcTriangle,
) -> NcStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let dir = PathBuf::from(string(snapshot_dir, "snapshot_dir")?);
        let calendar = ReportingCalendar::load(&PathBuf::from(string(calendar_path, "calendar_path")?))?;
        let now = optional_date(now, "now")?;
        let snapshots = load_snapshot_dir(&dir, &calendar, now)?;
        let now = match now.or_else(|| snapshots.last().map(|s| s.report_date)) {
            Some(d) => d,
            None => return Err(fail(NcStatus::DataError, format!("no snapshots in {}", dir.display()))),
        };
        let inner = build_triangle(&snapshots, now, max_delay, &calendar)?;
        *out = Box::into_raw(Box::new(NcTriangle { inner }));
        Ok(())
    })
}

unsafe fn triangle<'a>(t: *const NcTriangle) -> Result<&'a ReportingTriangle, Failure> {
    t.as_ref().map(|t| &t.inner).ok_or_else(|| fail(NcStatus::NullPointer, "triangle is NULL"))
}

/// Number of event dates (rows).
#[no_mangle]
pub unsafe extern "C" fn nc_triangle_rows(t: *const NcTriangle, out: *mut usize) -> NcStatus {
    guard(|| {
        *out_ref(out, "out")? = triangle(t)?.n_rows();
        Ok(())
    })
}

/// Number of delay columns, `max_delay + 1`.
#[no_mangle]
pub unsafe extern "C" fn nc_triangle_width(t: *const NcTriangle, out: *mut usize) -> NcStatus {
    guard(|| {
        *out_ref(out, "out")? = triangle(t)?.width();
        Ok(())
    })
}

/// Count reported for event row `row` at delay `d`; 0 for unobserved cells.
#[no_mangle]
pub unsafe extern "C" fn nc_triangle_cell(t: *const NcTriangle, row: usize, d: usize, out: *mut u64) -> NcStatus {
    guard(|| {
        let tri = triangle(t)?;
        if row >= tri.n_rows() || d >= tri.width() {
            return Err(fail(
                NcStatus::InvalidArgument,
                format!("cell ({row}, {d}) outside {} x {}", tri.n_rows(), tri.width()),
            ));
        }
        *out_ref(out, "out")? = tri.cell(row, d);
        Ok(())
    })
}

/// Accepts NULL.
#[no_mangle]
pub unsafe extern "C" fn nc_triangle_free(t: *mut NcTriangle) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

struct Row {
    date: CString,
    observed: u64,
    mean: f64,
    /// Predictive draws, ascending.
    sorted: Vec<u64>,
}

/// Predictive distribution of the complete counts per event date.
pub struct NcNowcast {
    rows: Vec<Row>,
}

/// Fits the model of the JSON config at `config_path` as of `now` (NULL: the
/// config's date, else the latest snapshot) and keeps the predictive draws.
#[no_mangle]
pub unsafe extern "C" fn nc_nowcast_run(config_path: *const c_char, now: *const c_char, out: *mut *mut NcNowcast) -> NcStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let config = RunConfig::load(&PathBuf::from(string(config_path, "config_path")?))?;
        let run = run_nowcast(&config, optional_date(now, "now")?)?;
        let rows = run
            .result
            .rows
            .iter()
            .map(|r| {
                let mut sorted = r.predictive_draws.clone();
                sorted.sort_unstable();
                Row {
                    date: CString::new(r.event_date.to_string()).expect("dates have no NUL"),
                    observed: r.observed_partial,
                    mean: r.mean(),
                    sorted,
                }
            })
            .collect();
        *out = Box::into_raw(Box::new(NcNowcast { rows }));
        Ok(())
    })
}

unsafe fn row<'a>(h: *const NcNowcast, index: usize) -> Result<&'a Row, Failure> {
    let h = h.as_ref().ok_or_else(|| fail(NcStatus::NullPointer, "nowcast is NULL"))?;
    h.rows.get(index).ok_or_else(|| {
        fail(NcStatus::InvalidArgument, format!("row {index} outside 0..{}", h.rows.len()))
    })
}

#[no_mangle]
pub unsafe extern "C" fn nc_nowcast_rows(h: *const NcNowcast, out: *mut usize) -> NcStatus {
    guard(|| {
        let h = h.as_ref().ok_or_else(|| fail(NcStatus::NullPointer, "nowcast is NULL"))?;
        *out_ref(out, "out")? = h.rows.len();
        Ok(())
    })
}

/// `YYYY-MM-DD` of row `index`, owned by the handle.
#[no_mangle]
pub unsafe extern "C" fn nc_nowcast_event_date(h: *const NcNowcast, index: usize, out: *mut *const c_char) -> NcStatus {
    guard(|| {
        *out_ref(out, "out")? = row(h, index)?.date.as_ptr();
        Ok(())
    })
}

/// Count reported so far for row `index`.
#[no_mangle]
pub unsafe extern "C" fn nc_nowcast_observed(h: *const NcNowcast, index: usize, out: *mut u64) -> NcStatus {
    guard(|| {
        *out_ref(out, "out")? = row(h, index)?.observed;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn nc_nowcast_mean(h: *const NcNowcast, index: usize, out: *mut f64) -> NcStatus {
    guard(|| {
        *out_ref(out, "out")? = row(h, index)?.mean;
        Ok(())
    })
}

/// Nearest-rank predictive quantile at `level` in (0, 1].
#[no_mangle]
pub unsafe extern "C" fn nc_nowcast_quantile(h: *const NcNowcast, index: usize, level: f64, out: *mut u64) -> NcStatus {
    guard(|| {
        *out_ref(out, "out")? = nearest_rank(&row(h, index)?.sorted, level)?;
        Ok(())
    })
}

/// Ascending predictive draws of row `index`, owned by the handle.
#[no_mangle]
pub unsafe extern "C" fn nc_nowcast_draws(
    h: *const NcNowcast,
    index: usize,
    draws: *mut *const u64,
    n: *mut usize,
) -> NcStatus {
    guard(|| {
        let r = row(h, index)?;
        let draws = out_ref(draws, "draws")?;
        let n = out_ref(n, "n")?;
        *draws = r.sorted.as_ptr();
        *n = r.sorted.len();
        Ok(())
    })
}

/// Accepts NULL.
#[no_mangle]
pub unsafe extern "C" fn nc_nowcast_free(h: *mut NcNowcast) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}
