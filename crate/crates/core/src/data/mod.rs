//! Surveillance data ingestion: snapshots, reporting calendar, the reporting
//! triangle and indicator covariates.

pub mod calendar;
pub mod indicator;
pub mod lag;
pub mod snapshot;
pub mod triangle;

pub use calendar::ReportingCalendar;
pub use indicator::{apply_transform, load_indicator_values, smooth, write_series, DatedSeries, IndicatorSeries, Transform};
pub use lag::{best_lag, lag_table, select_lag, LagFit, LagForm};
pub use snapshot::{ingest_snapshot, load_snapshot_dir, Snapshot};
pub use triangle::{build_triangle, ReportingTriangle};
