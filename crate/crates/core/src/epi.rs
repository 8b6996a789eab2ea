//! Latent epidemic curve `log lambda_t` under the three model variants.
//!
//! * `R`:  `log l_t ~ N(log l_{t-1}, sigma^2)`
//! * `L`:  `log l_t ~ N(b_0 + sum_i b_i m_it, sigma^2)`
//! * `RL`: `log l_t ~ N(log l_{t-1} + sum_i b_i m_it, sigma^2)`
//!
//! For `R` and `RL` the first day of the window has the start prior
//! `N(init_mean, 1)`.

use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::data::triangle::add_days;
use crate::data::{DatedSeries, IndicatorSeries};
use crate::error::{Error, Result};
use crate::posterior::PriorConfig;

pub const INIT_SD: f64 = 1.0;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    R,
    L,
    RL,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::R => "R",
            Variant::L => "L",
            Variant::RL => "RL",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "R" => Ok(Variant::R),
            "L" => Ok(Variant::L),
            "RL" => Ok(Variant::RL),
            other => Err(Error::Config(format!("unknown variant {other:?} (expected R, L or RL)"))),
        }
    }
}

impl Variant {
    pub fn has_random_walk(self) -> bool {
        matches!(self, Variant::R | Variant::RL)
    }
}

#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub variant: Variant,
    pub indicators: Vec<IndicatorSeries>,
    pub priors: PriorConfig,
    pub max_delay: usize,
    pub breakpoint_spacing: usize,
    pub window_length: usize,
    /// Hold every regression coefficient at zero instead of sampling it.
    pub freeze_beta: bool,
}

impl ModelSpec {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            indicators: Vec::new(),
            priors: PriorConfig::default(),
            max_delay: 35,
            breakpoint_spacing: 14,
            window_length: 84,
            freeze_beta: false,
        }
    }

    pub fn with_indicator(mut self, indicator: IndicatorSeries) -> Self {
        self.indicators.push(indicator);
        self
    }

    pub fn validate(&self) -> Result<()> {
        match (self.variant, self.indicators.len()) {
            (Variant::R, 0) => {}
            (Variant::R, _) => {
                return Err(Error::Config("variant R takes no indicators".into()));
            }
            (v, 0) => {
                return Err(Error::Config(format!("variant {v} needs at least one indicator")));
            }
            _ => {}
        }
        if self.max_delay < 1 {
            return Err(Error::Config("max_delay must be at least 1".into()));
        }
        if self.window_length < 2 {
            return Err(Error::Config("window_length must be at least 2".into()));
        }
        if self.breakpoint_spacing < 1 {
            return Err(Error::Config("breakpoint_spacing must be at least 1".into()));
        }
        let mut names: Vec<&str> = self.indicators.iter().map(|i| i.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("indicator names must be unique".into()));
        }
        self.priors.validate()
    }

    /// Number of regression coefficients in the mean, sampled or not.
    pub fn n_beta(&self) -> usize {
        match self.variant {
            Variant::R => 0,
            Variant::L => 1 + self.indicators.len(),
            Variant::RL => self.indicators.len(),
        }
    }

    pub fn beta_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.variant == Variant::L {
            names.push("intercept".to_string());
        }
        names.extend(self.indicators.iter().map(|i| i.name.clone()));
        names
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentPath {
    pub log_lambda: Vec<f64>,
    pub sigma: f64,
    /// `[b_0, b_1..]` for `L`, `[b_1..]` for `RL`, empty for `R`.
    pub beta: Vec<f64>,
}

/// Indicator covariates `m[t][i]` aligned to the model window.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariates {
    pub start: NaiveDate,
    pub values: Vec<Vec<f64>>,
}

impl Covariates {
    pub fn empty(start: NaiveDate, len: usize) -> Self {
        Self {
            start,
            values: vec![Vec::new(); len],
        }
    }
}

/// Smooths, transforms and lags every indicator and reads it off on each
/// window date.
pub fn align_covariates(spec: &ModelSpec, start: NaiveDate, len: usize) -> Result<Covariates> {
    let prepared: Vec<DatedSeries> = spec
        .indicators
        .iter()
        .map(IndicatorSeries::prepared)
        .collect::<Result<_>>()?;
    let mut values = Vec::with_capacity(len);
    for k in 0..len {
        let t = add_days(start, k);
        // RL never uses the first day's covariate.
        let needed = !(spec.variant == Variant::RL && k == 0);
        let mut row = Vec::with_capacity(prepared.len());
        for (series, ind) in prepared.iter().zip(&spec.indicators) {
            match IndicatorSeries::lagged(series, ind.lag, t) {
                Some(v) => row.push(v),
                None if !needed => row.push(0.0),
                None => {
                    let source = t - chrono::Days::new(ind.lag as u64);
                    return Err(Error::Data(format!(
                        "indicator {} has no usable value on {source} (needed for {t} at lag {})",
                        ind.name, ind.lag
                    )));
                }
            }
        }
        values.push(row);
    }
    Ok(Covariates { start, values })
}

pub(crate) fn normal_logpdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -LN_SQRT_2PI - sd.ln() - 0.5 * z * z
}

/// Everything the path density needs besides the path itself.
#[derive(Debug, Clone)]
pub struct EpiModel {
    pub variant: Variant,
    pub covariates: Covariates,
    pub init_mean: f64,
    pub freeze_beta: bool,
}

impl EpiModel {
    pub fn len(&self) -> usize {
        self.covariates.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.covariates.values.is_empty()
    }

    fn regression(&self, beta: &[f64], t: usize) -> f64 {
        self.covariates.values[t].iter().zip(beta).map(|(m, b)| m * b).sum()
    }

    /// Conditional mean of `log_lambda[t]` for `t >= 1` (any `t` for `L`).
    pub(crate) fn mean(&self, log_lambda: &[f64], beta: &[f64], t: usize) -> f64 {
        match self.variant {
            Variant::R => log_lambda[t - 1],
            Variant::RL => {
                if self.freeze_beta {
                    log_lambda[t - 1]
                } else {
                    log_lambda[t - 1] + self.regression(beta, t)
                }
            }
            Variant::L => {
                if self.freeze_beta {
                    0.0
                } else {
                    beta[0] + self.regression(&beta[1..], t)
                }
            }
        }
    }

    /// Density term of day `t` alone.
    pub(crate) fn term(&self, log_lambda: &[f64], sigma: f64, beta: &[f64], t: usize) -> f64 {
        if t == 0 && self.variant.has_random_walk() {
            normal_logpdf(log_lambda[0], self.init_mean, INIT_SD)
        } else {
            normal_logpdf(log_lambda[t], self.mean(log_lambda, beta, t), sigma)
        }
    }

    /// Sum of the terms that involve `log_lambda[t]`.
    #[cfg(test)]
    pub(crate) fn local(&self, log_lambda: &[f64], sigma: f64, beta: &[f64], t: usize) -> f64 {
        let mut v = self.term(log_lambda, sigma, beta, t);
        if self.variant.has_random_walk() && t + 1 < log_lambda.len() {
            v += self.term(log_lambda, sigma, beta, t + 1);
        }
        v
    }

    pub(crate) fn total(&self, log_lambda: &[f64], sigma: f64, beta: &[f64]) -> f64 {
        (0..log_lambda.len()).map(|t| self.term(log_lambda, sigma, beta, t)).sum()
    }
}

pub fn path_logdensity(model: &EpiModel, path: &LatentPath) -> Result<f64> {
    if path.log_lambda.len() != model.len() {
        return Err(Error::Domain(format!(
            "path has {} days, model window has {}",
            path.log_lambda.len(),
            model.len()
        )));
    }
    if !(path.sigma > 0.0) {
        return Err(Error::Domain(format!("sigma must be positive, got {}", path.sigma)));
    }
    let n_beta = match model.variant {
        Variant::R => 0,
        Variant::L => 1 + model.covariates.values.first().map_or(0, Vec::len),
        Variant::RL => model.covariates.values.first().map_or(0, Vec::len),
    };
    if path.beta.len() != n_beta {
        return Err(Error::Domain(format!(
            "expected {n_beta} regression coefficients, got {}",
            path.beta.len()
        )));
    }
    Ok(model.total(&path.log_lambda, path.sigma, &path.beta))
}
