//! JSON run configuration shared by the CLI commands.
//!
//! Relative paths are resolved against the directory of the config file.
//! Unknown keys are rejected at every level.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::data::{load_indicator_values, IndicatorSeries, LagForm, ReportingCalendar, Transform};
use crate::epi::{ModelSpec, Variant};
use crate::error::{Error, Result};
use crate::inference::{Algorithm, SamplerConfig};
use crate::posterior::PriorConfig;
use crate::simulate::{realistic_gamma, PathConfig, SimulationConfig, REALISTIC_WEEKDAY_EFFECTS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default = "defaults::window_length")]
    pub window_length: usize,
    #[serde(default = "defaults::max_delay")]
    pub max_delay: usize,
    #[serde(default = "defaults::breakpoint_spacing")]
    pub breakpoint_spacing: usize,
    #[serde(default)]
    pub priors: PriorConfig,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default = "defaults::seed")]
    pub seed: u64,
    #[serde(default = "defaults::output")]
    pub output: PathBuf,
    #[serde(default)]
    pub nowcast: NowcastSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default)]
    pub lag_selection: LagSection,
}

mod defaults {
    use std::path::PathBuf;

    pub fn window_length() -> usize {
        84
    }
    pub fn max_delay() -> usize {
        35
    }
    pub fn breakpoint_spacing() -> usize {
        14
    }
    pub fn seed() -> u64 {
        1
    }
    pub fn output() -> PathBuf {
        PathBuf::from("out")
    }
    pub fn smoothing() -> usize {
        7
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub variant: Variant,
    #[serde(default)]
    pub indicators: Vec<IndicatorConfig>,
    /// Hold the regression coefficients at zero.
    #[serde(default)]
    pub freeze_beta: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndicatorConfig {
    pub name: String,
    /// `date,value` CSV.
    pub file: PathBuf,
    #[serde(default)]
    pub lag: usize,
    /// Centered rolling-mean width (odd).
    #[serde(default = "defaults::smoothing")]
    pub smoothing: usize,
    /// Defaults to `log` for `L` and `relative_weekly_change` for `RL`.
    #[serde(default)]
    pub transform: Option<Transform>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Directory of `YYYY-MM-DD.csv` snapshots.
    pub snapshots: PathBuf,
    pub calendar: PathBuf,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            snapshots: PathBuf::from("snapshots"),
            calendar: PathBuf::from("calendar.csv"),
        }
    }
}

/// Sampler settings; the seed is the top-level `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub chains: usize,
    pub warmup_iters: usize,
    pub sampling_iters: usize,
    pub algorithm: Algorithm,
    pub target_acceptance: Option<f64>,
    pub max_leapfrog: usize,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let d = SamplerConfig::default();
        Self {
            chains: d.chains,
            warmup_iters: d.warmup_iters,
            sampling_iters: d.sampling_iters,
            algorithm: d.algorithm,
            target_acceptance: d.target_acceptance,
            max_leapfrog: d.max_leapfrog,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NowcastSection {
    /// Reporting date of the nowcast; defaults to the latest snapshot.
    pub now: Option<NaiveDate>,
    /// Include every predictive draw in the JSON export.
    pub draws_in_json: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    /// One reporting date per line.
    pub dates_file: Option<PathBuf>,
    /// Report date of the truth snapshot; defaults to the latest snapshot.
    pub truth: Option<NaiveDate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSection {
    pub start: NaiveDate,
    pub n_days: usize,
    pub sigma: f64,
    pub phi: f64,
    /// Expected events on the first day.
    pub initial_lambda: f64,
    pub beta: Vec<f64>,
    /// Baseline logit hazards, one per delay below `max_delay`.
    pub gamma: Option<Vec<f64>>,
    /// Hazard contrasts of Mon, Wed, Thu, Fri, Sat, Sun against Tuesday.
    pub weekday_effects: [f64; 6],
    /// Days after the last event date over which the fold column is reported.
    pub tail_spread: usize,
    /// Defaults to Tuesday-to-Friday reporting.
    pub calendar: Option<PathBuf>,
    /// Number of trailing reporting dates listed in `dates.txt`.
    pub evaluation_dates: usize,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            start: NaiveDate::from_ymd_opt(2021, 1, 4).expect("valid date"),
            n_days: 120,
            sigma: 0.1,
            phi: 10.0,
            initial_lambda: 40.0,
            beta: Vec::new(),
            gamma: None,
            weekday_effects: REALISTIC_WEEKDAY_EFFECTS,
            tail_spread: 7,
            calendar: None,
            evaluation_dates: 20,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LagSection {
    /// `date,value` series being predicted.
    pub target: Option<PathBuf>,
    /// `date,value` candidate indicator.
    pub indicator: Option<PathBuf>,
    /// Inclusive lag range.
    pub grid: Option<(usize, usize)>,
    /// Inclusive fit window of target dates.
    pub window: Option<(NaiveDate, NaiveDate)>,
    pub form: Option<LagForm>,
    pub smoothing: Option<usize>,
}

impl RunConfig {
    /// Defaults with the given variant; paths relative to the working directory.
    pub fn with_variant(variant: Variant) -> Self {
        serde_json::from_value(serde_json::json!({ "model": { "variant": variant } }))
            .expect("default config deserializes")
    }

    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads `path` and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.data.snapshots);
        join(&mut self.data.calendar);
        join(&mut self.output);
        for i in &mut self.model.indicators {
            join(&mut i.file);
        }
        for p in [
            &mut self.evaluation.dates_file,
            &mut self.simulation.calendar,
            &mut self.lag_selection.target,
            &mut self.lag_selection.indicator,
        ]
        .into_iter()
        .flatten()
        {
            join(p);
        }
    }

    /// Checks that need no file access.
    pub fn validate(&self) -> Result<()> {
        self.skeleton_spec().validate()?;
        self.sampler_config().validate()?;
        for i in &self.model.indicators {
            if i.smoothing == 0 || i.smoothing % 2 == 0 {
                return Err(Error::Config(format!(
                    "indicator {}: smoothing width must be odd, got {}",
                    i.name, i.smoothing
                )));
            }
        }
        Ok(())
    }

    /// Model spec with placeholder indicator values.
    fn skeleton_spec(&self) -> ModelSpec {
        let mut spec = ModelSpec::new(self.model.variant);
        spec.indicators =
            self.model.indicators.iter().map(|i| IndicatorSeries::new(i.name.clone(), Default::default())).collect();
        spec.priors = self.priors;
        spec.max_delay = self.max_delay;
        spec.breakpoint_spacing = self.breakpoint_spacing;
        spec.window_length = self.window_length;
        spec.freeze_beta = self.model.freeze_beta;
        spec
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        let s = &self.sampler;
        SamplerConfig {
            chains: s.chains,
            warmup_iters: s.warmup_iters,
            sampling_iters: s.sampling_iters,
            seed: self.seed,
            algorithm: s.algorithm,
            target_acceptance: s.target_acceptance,
            max_leapfrog: s.max_leapfrog,
        }
    }

    fn default_transform(&self) -> Transform {
        match self.model.variant {
            Variant::RL => Transform::RelativeWeeklyChange,
            _ => Transform::Log,
        }
    }

    /// Loads every indicator file.
    pub fn indicators(&self) -> Result<Vec<IndicatorSeries>> {
        self.model
            .indicators
            .iter()
            .map(|i| {
                let values = load_indicator_values(&i.file)?;
                Ok(IndicatorSeries::new(i.name.clone(), values)
                    .with_smoothing(i.smoothing)
                    .with_lag(i.lag)
                    .with_transform(i.transform.unwrap_or(self.default_transform())))
            })
            .collect()
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let mut spec = self.skeleton_spec();
        spec.indicators = self.indicators()?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn calendar(&self) -> Result<ReportingCalendar> {
        ReportingCalendar::load(&self.data.calendar)
    }

    pub fn simulation_config(&self) -> Result<SimulationConfig> {
        let s = &self.simulation;
        if !(s.initial_lambda > 0.0 && s.initial_lambda.is_finite()) {
            return Err(Error::Config(format!("initial_lambda must be positive, got {}", s.initial_lambda)));
        }
        let calendar = match &s.calendar {
            Some(path) => ReportingCalendar::load(path)?,
            None => ReportingCalendar::tuesday_to_friday(),
        };
        let gamma = s.gamma.clone().unwrap_or_else(|| realistic_gamma(self.max_delay));
        if gamma.len() != self.max_delay {
            return Err(Error::Config(format!(
                "simulation.gamma has {} entries, max_delay is {}",
                gamma.len(),
                self.max_delay
            )));
        }
        let mut eta = vec![0.0; s.n_days.div_ceil(self.breakpoint_spacing.max(1))];
        eta.extend_from_slice(&s.weekday_effects);
        Ok(SimulationConfig {
            start: s.start,
            n_days: s.n_days,
            max_delay: self.max_delay,
            breakpoint_spacing: self.breakpoint_spacing,
            path: PathConfig {
                variant: self.model.variant,
                sigma: s.sigma,
                init_log_lambda: s.initial_lambda.ln(),
                beta: s.beta.clone(),
            },
            indicators: self.indicators()?,
            gamma,
            eta,
            phi: s.phi,
            calendar,
            seed: self.seed,
            tail_spread: s.tail_spread,
        })
    }
}

/// Reporting dates, one per line; blank lines, `#` comments and a
/// `reporting_date` header are skipped.
pub fn load_dates(path: &Path) -> Result<Vec<NaiveDate>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut dates = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() || (dates.is_empty() && line == "reporting_date") {
            continue;
        }
        let date = NaiveDate::parse_from_str(line, "%Y-%m-%d")
            .map_err(|_| Error::parse(path, i as u64 + 1, format!("malformed date {line:?}")))?;
        dates.push(date);
    }
    Ok(dates)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let c = RunConfig::parse(r#"{"model": {"variant": "R"}}"#).unwrap();
        assert_eq!(c.window_length, 84);
        assert_eq!(c.max_delay, 35);
        assert_eq!(c.breakpoint_spacing, 14);
        assert_eq!(c.sampler_config(), SamplerConfig::default());
        assert_eq!(c, RunConfig::with_variant(Variant::R));
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_named() {
        for text in [
            r#"{"model": {"variant": "R"}, "windw_length": 3}"#,
            r#"{"model": {"variant": "R", "windw_length": 3}}"#,
            r#"{"model": {"variant": "R"}, "sampler": {"windw_length": 3}}"#,
        ] {
            let e = RunConfig::parse(text).unwrap_err();
            assert!(matches!(e, Error::Config(_)));
            assert!(e.to_string().contains("windw_length"), "{e}");
        }
        assert!(RunConfig::parse(r#"{"model": {"variant": "R"}, "sampler": {"seed": 3}}"#).is_err());
    }

    #[test]
    fn variant_indicator_mismatch_is_a_config_error() {
        let c = RunConfig::parse(r#"{"model": {"variant": "R", "indicators": [{"name": "icu", "file": "icu.csv"}]}}"#)
            .unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = RunConfig::parse(r#"{"model": {"variant": "RL"}}"#).unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = RunConfig::parse(
            r#"{"model": {"variant": "RL", "indicators": [{"name": "icu", "file": "icu.csv", "smoothing": 4}]}}"#,
        )
        .unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn paths_resolve_against_the_config_directory() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(
            &path,
            r#"{"model": {"variant": "L", "indicators": [{"name": "icu", "file": "icu.csv"}]},
                "data": {"snapshots": "/abs/snaps"}, "output": "res"}"#,
        )
        .unwrap();
        let c = RunConfig::load(&path).unwrap();
        assert_eq!(c.data.snapshots, PathBuf::from("/abs/snaps"));
        assert_eq!(c.data.calendar, dir.path().join("calendar.csv"));
        assert_eq!(c.output, dir.path().join("res"));
        assert_eq!(c.model.indicators[0].file, dir.path().join("icu.csv"));
    }

    #[test]
    fn indicators_get_variant_default_transforms() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("icu.csv"), "date,value\n2021-01-01,3\n").unwrap();
        for (variant, transform) in [("L", Transform::Log), ("RL", Transform::RelativeWeeklyChange)] {
            let mut c = RunConfig::parse(&format!(
                r#"{{"model": {{"variant": "{variant}", "indicators": [{{"name": "icu", "file": "icu.csv", "lag": 14}}]}}}}"#
            ))
            .unwrap();
            c.resolve_paths(dir.path());
            let spec = c.model_spec().unwrap();
            assert_eq!(spec.indicators[0].transform, transform);
            assert_eq!(spec.indicators[0].lag, 14);
            assert_eq!(spec.indicators[0].smoothing_width, 7);
        }
    }

    #[test]
    fn dates_file_skips_comments_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dates.txt");
        fs::write(&path, "reporting_date\n# first\n2021-03-02\n\n2021-03-03 # second\n").unwrap();
        let d = load_dates(&path).unwrap();
        assert_eq!(d, vec![NaiveDate::from_ymd_opt(2021, 3, 2).unwrap(), NaiveDate::from_ymd_opt(2021, 3, 3).unwrap()]);
        fs::write(&path, "2021-13-01\n").unwrap();
        assert!(matches!(load_dates(&path), Err(Error::Parse { line: 1, .. })));
    }
}
