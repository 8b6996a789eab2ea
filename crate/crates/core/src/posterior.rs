//! Joint log-posterior of the nowcasting model.
//!
//! Observed, non-structural triangle cells follow
//! `n[t][d] ~ NB(lambda_t p[t][d], phi)` with variance `mu + mu^2 / phi`.
//! Sampling happens on an unconstrained vector laid out as
//! `[log_lambda (W), gamma (D), eta (K), beta (B), log_sigma, log_phi]`;
//! the Jacobians of the `log sigma` and `log phi` maps are part of the density.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::data::triangle::ReportingTriangle;
use crate::data::ReportingCalendar;
use crate::delay::{build_design, log_delay_probabilities_into, logistic, DelayParams, HazardDesign};
use crate::epi::{align_covariates, normal_logpdf, EpiModel, LatentPath, ModelSpec, Variant};
use crate::error::{Error, Result};

const LN_2: f64 = std::f64::consts::LN_2;

/// Prior scales. Defaults: `sigma ~ HalfNormal(0.5)`, `1/sqrt(phi) ~ HalfNormal(1)`,
/// `beta ~ N(0, 1)`, `gamma ~ N(0, 2)`, `eta ~ N(0, 1)`; the intercept of the
/// `L` variant has its own scale (default 5).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub sigma_scale: f64,
    pub inv_sqrt_phi_scale: f64,
    pub beta_scale: f64,
    pub intercept_scale: f64,
    pub gamma_scale: f64,
    pub eta_scale: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            sigma_scale: 0.5,
            inv_sqrt_phi_scale: 1.0,
            beta_scale: 1.0,
            intercept_scale: 5.0,
            gamma_scale: 2.0,
            eta_scale: 1.0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        let scales = [
            ("sigma_scale", self.sigma_scale),
            ("inv_sqrt_phi_scale", self.inv_sqrt_phi_scale),
            ("beta_scale", self.beta_scale),
            ("intercept_scale", self.intercept_scale),
            ("gamma_scale", self.gamma_scale),
            ("eta_scale", self.eta_scale),
        ];
        for (name, v) in scales {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("prior {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterState {
    pub path: LatentPath,
    pub delay: DelayParams,
    pub phi: f64,
}

fn half_normal_logpdf(x: f64, scale: f64) -> f64 {
    normal_logpdf(x, 0.0, scale) + LN_2
}

/// `ln Gamma(y + phi) - ln Gamma(phi)`.
fn ln_rising(y: u64, phi: f64) -> f64 {
    if y <= 32 {
        (0..y).map(|k| (phi + k as f64).ln()).sum()
    } else if phi >= 20.0 {
        // Stirling form without the cancellation of two large lnGamma values.
        let y = y as f64;
        let x = phi + y;
        (phi - 0.5) * (y / phi).ln_1p() + y * x.ln() - y + stirling_tail(x) - stirling_tail(phi)
    } else {
        ln_gamma(y as f64 + phi) - ln_gamma(phi)
    }
}

fn stirling_tail(x: f64) -> f64 {
    let r = 1.0 / x;
    let r2 = r * r;
    r * (1.0 / 12.0 - r2 * (1.0 / 360.0 - r2 * (1.0 / 1260.0 - r2 / 1680.0)))
}

/// `psi(y + phi) - psi(phi)`.
fn digamma_rising(y: u64, phi: f64) -> f64 {
    if y <= 32 {
        (0..y).map(|k| 1.0 / (phi + k as f64)).sum()
    } else {
        digamma(y as f64 + phi) - digamma(phi)
    }
}

/// Part of the NB log-pmf that does not depend on the mean.
pub(crate) fn nb_log_const(y: u64, phi: f64) -> f64 {
    ln_rising(y, phi) - ln_gamma(y as f64 + 1.0)
}

/// Mean-dependent part of the NB log-pmf, from `log mu`.
pub(crate) fn nb_kernel(y: u64, log_mu: f64, phi: f64, log_phi: f64) -> f64 {
    let log1p = (log_mu - log_phi).exp().ln_1p();
    if y == 0 {
        -phi * log1p
    } else {
        y as f64 * (log_mu - log_phi - log1p) - phi * log1p
    }
}

pub fn nb_logpmf(y: u64, mu: f64, phi: f64) -> Result<f64> {
    if !(mu > 0.0 && mu.is_finite()) || !(phi > 0.0 && phi.is_finite()) {
        return Err(Error::Domain(format!("nb_logpmf needs mu > 0 and phi > 0, got mu = {mu}, phi = {phi}")));
    }
    Ok(nb_log_const(y, phi) + nb_kernel(y, mu.ln(), phi, phi.ln()))
}

/// Positions of each parameter block in the unconstrained vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub n_days: usize,
    pub n_gamma: usize,
    pub n_eta: usize,
    /// Sampled regression coefficients (0 when frozen).
    pub n_beta: usize,
}

impl ParamLayout {
    pub fn dim(&self) -> usize {
        self.n_days + self.n_gamma + self.n_eta + self.n_beta + 2
    }

    pub fn log_lambda(&self) -> Range<usize> {
        0..self.n_days
    }

    pub fn gamma(&self) -> Range<usize> {
        let s = self.n_days;
        s..s + self.n_gamma
    }

    pub fn eta(&self) -> Range<usize> {
        let s = self.gamma().end;
        s..s + self.n_eta
    }

    pub fn beta(&self) -> Range<usize> {
        let s = self.eta().end;
        s..s + self.n_beta
    }

    pub fn log_sigma(&self) -> usize {
        self.beta().end
    }

    pub fn log_phi(&self) -> usize {
        self.beta().end + 1
    }
}

/// Log-posterior split into its parts.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PosteriorTerms {
    pub likelihood: f64,
    pub path: f64,
    pub sigma_prior: f64,
    pub phi_prior: f64,
    pub beta_prior: f64,
    pub gamma_prior: f64,
    pub eta_prior: f64,
    pub jacobian: f64,
}

impl PosteriorTerms {
    pub fn total(&self) -> f64 {
        self.likelihood
            + self.path
            + self.sigma_prior
            + self.phi_prior
            + self.beta_prior
            + self.gamma_prior
            + self.eta_prior
            + self.jacobian
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LikCell {
    pub row: usize,
    pub d: usize,
    pub n: u64,
}

/// A fitted-ready model: spec, windowed triangle, hazard design and aligned
/// covariates.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    triangle: ReportingTriangle,
    design: HazardDesign,
    epi: EpiModel,
    layout: ParamLayout,
    cells: Vec<LikCell>,
    row_cells: Vec<Range<usize>>,
    /// Distinct cell counts with multiplicities, ascending.
    count_hist: Vec<(u64, u64)>,
    ln_factorial_sum: f64,
}

impl Model {
    /// Restricts `triangle` to the last `spec.window_length` days and prepares
    /// every model component.
    pub fn new(spec: &ModelSpec, triangle: &ReportingTriangle, calendar: &ReportingCalendar) -> Result<Self> {
        spec.validate()?;
        if triangle.max_delay() != spec.max_delay {
            return Err(Error::Config(format!(
                "triangle max_delay {} differs from model max_delay {}",
                triangle.max_delay(),
                spec.max_delay
            )));
        }
        let triangle = triangle.tail(spec.window_length)?;
        let design = build_design(
            triangle.start(),
            triangle.now(),
            spec.max_delay,
            spec.breakpoint_spacing,
            calendar,
        )?;
        let covariates = align_covariates(spec, triangle.start(), triangle.n_rows())?;
        let first: Vec<f64> = (0..triangle.n_rows().min(7))
            .map(|r| triangle.observed_partial(r) as f64)
            .collect();
        let init_mean = (first.iter().sum::<f64>() / first.len() as f64).max(1.0).ln();
        let epi = EpiModel {
            variant: spec.variant,
            covariates,
            init_mean,
            freeze_beta: spec.freeze_beta,
        };
        let layout = ParamLayout {
            n_days: triangle.n_rows(),
            n_gamma: spec.max_delay,
            n_eta: design.n_covariates(),
            n_beta: if spec.freeze_beta { 0 } else { spec.n_beta() },
        };
        let mut cells = Vec::new();
        let mut row_cells = Vec::with_capacity(triangle.n_rows());
        for row in 0..triangle.n_rows() {
            let begin = cells.len();
            for d in 0..triangle.width() {
                if triangle.is_observed(row, d) && !triangle.is_structural_zero(row, d) {
                    cells.push(LikCell { row, d, n: triangle.cell(row, d) });
                }
            }
            row_cells.push(begin..cells.len());
        }
        Ok(Self {
            spec: spec.clone(),
            triangle,
            design,
            epi,
            layout,
            cells,
            row_cells,
            count_hist: Vec::new(),
            ln_factorial_sum: 0.0,
        }
        .with_histogram())
    }

    fn with_histogram(mut self) -> Self {
        self.rebuild_histogram();
        self
    }

    fn rebuild_histogram(&mut self) {
        let mut hist = std::collections::BTreeMap::new();
        for c in &self.cells {
            *hist.entry(c.n).or_insert(0u64) += 1;
        }
        self.ln_factorial_sum = hist.iter().map(|(&n, &m)| m as f64 * ln_gamma(n as f64 + 1.0)).sum();
        self.count_hist = hist.into_iter().collect();
    }

    /// Sum of the mean-free NB terms over all likelihood cells.
    pub(crate) fn const_total(&self, phi: f64) -> f64 {
        let mut total = 0.0;
        let mut acc = 0.0;
        let mut reached = 0u64;
        for &(n, m) in &self.count_hist {
            if n <= 4096 {
                while reached < n {
                    acc += (phi + reached as f64).ln();
                    reached += 1;
                }
                total += m as f64 * acc;
            } else {
                total += m as f64 * ln_rising(n, phi);
            }
        }
        total - self.ln_factorial_sum
    }

    /// `sum over cells of d/dphi` of the mean-free NB terms.
    pub(crate) fn const_total_dphi(&self, phi: f64) -> f64 {
        let mut total = 0.0;
        let mut acc = 0.0;
        let mut reached = 0u64;
        for &(n, m) in &self.count_hist {
            if n <= 4096 {
                while reached < n {
                    acc += 1.0 / (phi + reached as f64);
                    reached += 1;
                }
                total += m as f64 * acc;
            } else {
                total += m as f64 * digamma_rising(n, phi);
            }
        }
        total
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn triangle(&self) -> &ReportingTriangle {
        &self.triangle
    }

    pub fn design(&self) -> &HazardDesign {
        &self.design
    }

    pub fn epi(&self) -> &EpiModel {
        &self.epi
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    #[cfg(test)]
    pub(crate) fn cells(&self) -> &[LikCell] {
        &self.cells
    }

    pub(crate) fn row_cells(&self, row: usize) -> &[LikCell] {
        &self.cells[self.row_cells[row].clone()]
    }

    pub fn n_likelihood_cells(&self) -> usize {
        self.cells.len()
    }

    /// Drops the observed cell `(row, d)` from the likelihood.
    pub fn exclude_cell(&mut self, row: usize, d: usize) -> Result<()> {
        let pos = self
            .cells
            .iter()
            .position(|c| c.row == row && c.d == d)
            .ok_or_else(|| Error::Domain(format!("cell ({row}, {d}) is not in the likelihood")))?;
        self.cells.remove(pos);
        for r in self.row_cells.iter_mut() {
            if r.start > pos {
                r.start -= 1;
            }
            if r.end > pos {
                r.end -= 1;
            }
        }
        self.rebuild_histogram();
        Ok(())
    }

    pub fn parameter_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.layout.n_days)
            .map(|t| format!("log_lambda[{}]", self.triangle.date(t)))
            .collect();
        names.extend((0..self.layout.n_gamma).map(|d| format!("gamma[{d}]")));
        names.extend(self.design.covariate_names().into_iter().map(|n| format!("eta[{n}]")));
        if self.layout.n_beta > 0 {
            names.extend(self.spec.beta_names().into_iter().map(|n| format!("beta[{n}]")));
        }
        names.push("log_sigma".into());
        names.push("log_phi".into());
        names
    }

    pub fn state_from_vec(&self, theta: &[f64]) -> ParameterState {
        let l = &self.layout;
        let beta = if l.n_beta > 0 {
            theta[l.beta()].to_vec()
        } else {
            vec![0.0; self.spec.n_beta()]
        };
        ParameterState {
            path: LatentPath {
                log_lambda: theta[l.log_lambda()].to_vec(),
                sigma: theta[l.log_sigma()].exp(),
                beta,
            },
            delay: DelayParams {
                gamma: theta[l.gamma()].to_vec(),
                eta: theta[l.eta()].to_vec(),
            },
            phi: theta[l.log_phi()].exp(),
        }
    }

    pub fn vec_from_state(&self, state: &ParameterState) -> Result<Vec<f64>> {
        self.check_state(state)?;
        let l = &self.layout;
        let mut theta = Vec::with_capacity(l.dim());
        theta.extend_from_slice(&state.path.log_lambda);
        theta.extend_from_slice(&state.delay.gamma);
        theta.extend_from_slice(&state.delay.eta);
        if l.n_beta > 0 {
            theta.extend_from_slice(&state.path.beta);
        }
        theta.push(state.path.sigma.ln());
        theta.push(state.phi.ln());
        Ok(theta)
    }

    fn check_state(&self, state: &ParameterState) -> Result<()> {
        let l = &self.layout;
        if state.path.log_lambda.len() != l.n_days {
            return Err(Error::Domain(format!(
                "state has {} days, model window has {}",
                state.path.log_lambda.len(),
                l.n_days
            )));
        }
        self.design.check_params(&state.delay)?;
        if state.path.beta.len() != self.spec.n_beta() {
            return Err(Error::Domain(format!(
                "state has {} regression coefficients, model expects {}",
                state.path.beta.len(),
                self.spec.n_beta()
            )));
        }
        if self.spec.freeze_beta && state.path.beta.iter().any(|&b| b != 0.0) {
            return Err(Error::Domain("regression coefficients are frozen at zero".into()));
        }
        if !(state.path.sigma > 0.0) || !(state.phi > 0.0) {
            return Err(Error::Domain("sigma and phi must be positive".into()));
        }
        Ok(())
    }

    /// Log delay probabilities for every row (`W x (D + 1)`, row-major).
    pub(crate) fn log_probabilities(&self, delay: &DelayParams, out: &mut [f64]) {
        let w = self.triangle.width();
        for row in 0..self.layout.n_days {
            log_delay_probabilities_into(delay, &self.design, row, &mut out[row * w..(row + 1) * w]);
        }
    }

    pub fn log_likelihood(&self, state: &ParameterState) -> Result<f64> {
        self.check_state(state)?;
        let w = self.triangle.width();
        let mut lp = vec![0.0; self.layout.n_days * w];
        self.log_probabilities(&state.delay, &mut lp);
        let mut total = 0.0;
        for c in &self.cells {
            let log_mu = state.path.log_lambda[c.row] + lp[c.row * w + c.d];
            total += nb_log_const(c.n, state.phi) + nb_kernel(c.n, log_mu, state.phi, state.phi.ln());
        }
        Ok(total)
    }

    pub fn terms(&self, state: &ParameterState) -> Result<PosteriorTerms> {
        self.check_state(state)?;
        let pr = &self.spec.priors;
        let path = &state.path;
        let likelihood = self.log_likelihood(state)?;
        let path_density = self.epi.total(&path.log_lambda, path.sigma, &path.beta);
        let u = state.phi.powf(-0.5);
        let beta_prior = if self.layout.n_beta == 0 {
            0.0
        } else {
            path.beta
                .iter()
                .enumerate()
                .map(|(i, &b)| {
                    let scale = if self.spec.variant == Variant::L && i == 0 {
                        pr.intercept_scale
                    } else {
                        pr.beta_scale
                    };
                    normal_logpdf(b, 0.0, scale)
                })
                .sum()
        };
        Ok(PosteriorTerms {
            likelihood,
            path: path_density,
            sigma_prior: half_normal_logpdf(path.sigma, pr.sigma_scale),
            phi_prior: half_normal_logpdf(u, pr.inv_sqrt_phi_scale),
            beta_prior,
            gamma_prior: state.delay.gamma.iter().map(|&g| normal_logpdf(g, 0.0, pr.gamma_scale)).sum(),
            eta_prior: state.delay.eta.iter().map(|&e| normal_logpdf(e, 0.0, pr.eta_scale)).sum(),
            jacobian: path.sigma.ln() + (u / 2.0).ln(),
        })
    }

    pub fn log_posterior(&self, state: &ParameterState) -> Result<f64> {
        let total = self.terms(state)?.total();
        if total.is_nan() || total == f64::INFINITY {
            return Err(Error::Internal(format!("log posterior evaluated to {total}")));
        }
        Ok(total)
    }

    /// Prior log-density of the unconstrained vector, Jacobians included.
    pub(crate) fn log_prior_flat(&self, theta: &[f64]) -> f64 {
        let l = &self.layout;
        let pr = &self.spec.priors;
        let mut v = 0.0;
        for &g in &theta[l.gamma()] {
            v += normal_logpdf(g, 0.0, pr.gamma_scale);
        }
        for &e in &theta[l.eta()] {
            v += normal_logpdf(e, 0.0, pr.eta_scale);
        }
        v += self.beta_prior_flat(&theta[l.beta()]);
        v + self.sigma_prior_flat(theta[l.log_sigma()]) + self.phi_prior_flat(theta[l.log_phi()])
    }

    pub(crate) fn beta_prior_flat(&self, beta: &[f64]) -> f64 {
        let pr = &self.spec.priors;
        beta.iter()
            .enumerate()
            .map(|(i, &b)| {
                let scale = if self.spec.variant == Variant::L && i == 0 {
                    pr.intercept_scale
                } else {
                    pr.beta_scale
                };
                normal_logpdf(b, 0.0, scale)
            })
            .sum()
    }

    /// Prior plus Jacobian of `log sigma`.
    pub(crate) fn sigma_prior_flat(&self, log_sigma: f64) -> f64 {
        half_normal_logpdf(log_sigma.exp(), self.spec.priors.sigma_scale) + log_sigma
    }

    /// Prior on `1/sqrt(phi)` plus Jacobian of `log phi`.
    pub(crate) fn phi_prior_flat(&self, log_phi: f64) -> f64 {
        let u = (-0.5 * log_phi).exp();
        half_normal_logpdf(u, self.spec.priors.inv_sqrt_phi_scale) + (u / 2.0).ln()
    }

    pub(crate) fn beta_slice<'a>(&self, theta: &'a [f64]) -> &'a [f64] {
        &theta[self.layout.beta()]
    }

    pub(crate) fn delay_params(&self, theta: &[f64]) -> DelayParams {
        DelayParams {
            gamma: theta[self.layout.gamma()].to_vec(),
            eta: theta[self.layout.eta()].to_vec(),
        }
    }

    /// Log density of the unconstrained vector. `-inf` outside the support.
    pub fn log_density(&self, theta: &[f64]) -> f64 {
        let l = &self.layout;
        let log_phi = theta[l.log_phi()];
        let phi = log_phi.exp();
        let sigma = theta[l.log_sigma()].exp();
        if !(phi > 0.0 && phi.is_finite() && sigma > 0.0 && sigma.is_finite()) {
            return f64::NEG_INFINITY;
        }
        let w = self.triangle.width();
        let mut lp = vec![0.0; l.n_days * w];
        self.log_probabilities(&self.delay_params(theta), &mut lp);
        let log_lambda = &theta[l.log_lambda()];
        let mut v = self.const_total(phi);
        for c in &self.cells {
            v += nb_kernel(c.n, log_lambda[c.row] + lp[c.row * w + c.d], phi, log_phi);
        }
        v += self.epi.total(log_lambda, sigma, self.beta_slice(theta));
        v += self.log_prior_flat(theta);
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    }

    /// Log density and its gradient with respect to the unconstrained vector.
    pub fn log_density_gradient(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let l = &self.layout;
        grad.iter_mut().for_each(|g| *g = 0.0);
        let log_phi = theta[l.log_phi()];
        let phi = log_phi.exp();
        let sigma = theta[l.log_sigma()].exp();
        if !(phi > 0.0 && phi.is_finite() && sigma > 0.0 && sigma.is_finite()) {
            return f64::NEG_INFINITY;
        }
        let delay = self.delay_params(theta);
        let log_lambda = &theta[l.log_lambda()];
        let beta = self.beta_slice(theta);
        let w = self.triangle.width();
        let dmax = self.spec.max_delay;
        let n_cov = self.design.n_covariates();
        let pr = self.spec.priors;

        let mut value = 0.0;
        let mut lp = vec![0.0; w];
        let mut g_cell = vec![0.0; w];
        let mut d_log_phi = 0.0;
        for row in 0..l.n_days {
            log_delay_probabilities_into(&delay, &self.design, row, &mut lp);
            g_cell.iter_mut().for_each(|g| *g = 0.0);
            let mut g_lambda = 0.0;
            for c in self.row_cells(row) {
                let log_mu = log_lambda[row] + lp[c.d];
                let mu = log_mu.exp();
                value += nb_kernel(c.n, log_mu, phi, log_phi);
                let n = c.n as f64;
                let g = phi * (n - mu) / (mu + phi);
                g_cell[c.d] = g;
                g_lambda += g;
                let d_phi = -(mu / phi).ln_1p() + (mu - n) / (mu + phi);
                d_log_phi += phi * d_phi;
            }
            grad[row] += g_lambda;
            // Back-propagate through the hazard product.
            let mut later = g_cell[dmax];
            for k in (0..dmax).rev() {
                if self.design.is_reporting(row, k) {
                    let h = logistic(self.design.linear_predictor(&delay, row, k));
                    let dx = g_cell[k] * (1.0 - h) - h * later;
                    grad[l.gamma().start + k] += dx;
                    let wrow = self.design.covariates(row, k);
                    let eta0 = l.eta().start;
                    for j in 0..n_cov {
                        grad[eta0 + j] += dx * wrow[j];
                    }
                }
                later += g_cell[k];
            }
        }
        value += self.const_total(phi);
        grad[l.log_phi()] += d_log_phi + phi * self.const_total_dphi(phi);

        // Epidemic curve.
        value += self.epi.total(log_lambda, sigma, beta);
        let mut d_log_sigma = 0.0;
        let cov = &self.epi.covariates.values;
        for t in 0..l.n_days {
            if t == 0 && self.spec.variant.has_random_walk() {
                grad[0] -= (log_lambda[0] - self.epi.init_mean) / (crate::epi::INIT_SD * crate::epi::INIT_SD);
                continue;
            }
            let mean = self.epi.mean(log_lambda, beta, t);
            let r = (log_lambda[t] - mean) / sigma;
            let g = r / sigma;
            grad[t] -= g;
            d_log_sigma += r * r - 1.0;
            if self.spec.variant.has_random_walk() {
                grad[t - 1] += g;
            }
            if l.n_beta > 0 {
                let b0 = l.beta().start;
                match self.spec.variant {
                    Variant::L => {
                        grad[b0] += g;
                        for (i, m) in cov[t].iter().enumerate() {
                            grad[b0 + 1 + i] += g * m;
                        }
                    }
                    Variant::RL => {
                        for (i, m) in cov[t].iter().enumerate() {
                            grad[b0 + i] += g * m;
                        }
                    }
                    Variant::R => {}
                }
            }
        }

        // Priors and Jacobians.
        value += self.log_prior_flat(theta);
        for i in l.gamma() {
            grad[i] -= theta[i] / (pr.gamma_scale * pr.gamma_scale);
        }
        for i in l.eta() {
            grad[i] -= theta[i] / (pr.eta_scale * pr.eta_scale);
        }
        for (k, i) in l.beta().enumerate() {
            let s = if self.spec.variant == Variant::L && k == 0 {
                pr.intercept_scale
            } else {
                pr.beta_scale
            };
            grad[i] -= theta[i] / (s * s);
        }
        d_log_sigma += -sigma * sigma / (pr.sigma_scale * pr.sigma_scale) + 1.0;
        grad[l.log_sigma()] += d_log_sigma;
        let u2 = 1.0 / phi;
        grad[l.log_phi()] += u2 / (2.0 * pr.inv_sqrt_phi_scale * pr.inv_sqrt_phi_scale) - 0.5;
        if value.is_nan() {
            f64::NEG_INFINITY
        } else {
            value
        }
    }

    /// Data-driven starting point with jitter.
    ///
    /// `log_lambda` starts from a 7-day running mean of the observed partial
    /// sums divided by the empirical fraction reported so far; `gamma` from the
    /// empirical hazards of complete rows; the rest at prior means.
    pub fn initial_point<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let l = &self.layout;
        let tri = &self.triangle;
        let dmax = self.spec.max_delay;
        let jitter = Normal::new(0.0, 0.1).unwrap();

        let complete: Vec<usize> = (0..tri.n_rows()).filter(|&r| tri.is_complete(r)).collect();
        let grand: u64 = complete.iter().map(|&r| tri.observed_partial(r)).sum();
        let mut fraction = vec![1.0; dmax + 1];
        if grand > 0 {
            let mut acc = 0u64;
            for (d, f) in fraction.iter_mut().enumerate() {
                acc += complete.iter().map(|&r| tri.cell(r, d)).sum::<u64>();
                *f = (acc as f64 / grand as f64).max(0.05);
            }
        }
        let inflated: Vec<f64> = (0..tri.n_rows())
            .map(|r| tri.observed_partial(r) as f64 / fraction[tri.elapsed(r).min(dmax)])
            .collect();
        let mut theta = vec![0.0; l.dim()];
        for t in 0..l.n_days {
            let lo = t.saturating_sub(3);
            let hi = (t + 3).min(l.n_days - 1);
            let mean = inflated[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64;
            theta[t] = mean.max(0.5).ln() + jitter.sample(rng);
        }

        for d in 0..dmax {
            let mut hits = 0u64;
            let mut at_risk = 0u64;
            for &r in &complete {
                if !self.design.is_reporting(r, d) {
                    continue;
                }
                let before: u64 = tri.row(r)[..d].iter().sum();
                at_risk += tri.observed_partial(r) - before;
                hits += tri.cell(r, d);
            }
            let h = if at_risk > 0 {
                (hits as f64 / at_risk as f64).clamp(0.02, 0.98)
            } else {
                0.5
            };
            theta[l.gamma().start + d] = (h / (1.0 - h)).ln() + jitter.sample(rng);
        }
        for i in l.eta() {
            theta[i] = jitter.sample(rng);
        }
        for i in l.beta() {
            theta[i] = jitter.sample(rng);
        }
        if self.spec.variant == Variant::L && l.n_beta > 0 {
            let b0 = l.beta().start;
            let cov = &self.epi.covariates.values;
            let mut resid = 0.0;
            for t in 0..l.n_days {
                let reg: f64 = cov[t].iter().zip(&theta[b0 + 1..l.beta().end]).map(|(m, b)| m * b).sum();
                resid += theta[t] - reg;
            }
            theta[b0] = resid / l.n_days as f64;
        }
        let sigma_mean = self.spec.priors.sigma_scale * (2.0 / std::f64::consts::PI).sqrt();
        theta[l.log_sigma()] = sigma_mean.ln() + jitter.sample(rng);
        let u_mean = self.spec.priors.inv_sqrt_phi_scale * (2.0 / std::f64::consts::PI).sqrt();
        theta[l.log_phi()] = -2.0 * u_mean.ln() + jitter.sample(rng);
        theta
    }
}

/// Compares `grad` with central finite differences of `f` at `theta`,
/// coordinate by coordinate, to relative tolerance `1e-4` (absolute below 1).
pub fn finite_difference_check(f: &dyn Fn(&[f64]) -> f64, grad: &[f64], theta: &[f64]) -> Result<()> {
    let mut probe = theta.to_vec();
    for i in 0..theta.len() {
        let h = 1e-5 * theta[i].abs().max(1.0);
        probe[i] = theta[i] + h;
        let up = f(&probe);
        probe[i] = theta[i] - h;
        let down = f(&probe);
        probe[i] = theta[i];
        let fd = (up - down) / (2.0 * h);
        if !fd.is_finite() || (fd - grad[i]).abs() > 1e-4 * fd.abs().max(1.0) {
            return Err(Error::Inference(format!(
                "gradient check failed at coordinate {i}: analytic {} vs finite difference {fd}",
                grad[i]
            )));
        }
    }
    Ok(())
}

pub fn log_likelihood(model: &Model, state: &ParameterState) -> Result<f64> {
    model.log_likelihood(state)
}

pub fn log_posterior(model: &Model, state: &ParameterState) -> Result<f64> {
    model.log_posterior(state)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::calendar::parse_date;
    use crate::data::{DatedSeries, IndicatorSeries, Transform};
    use chrono::{Days, NaiveDate};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn d(s: &str) -> NaiveDate {
        parse_date(s).unwrap()
    }

    fn direct_pmf(y: u64, mu: f64, phi: f64) -> f64 {
        // Gamma(y + phi) / (Gamma(phi) y!) (phi/(phi+mu))^phi (mu/(phi+mu))^y
        (ln_gamma(y as f64 + phi) - ln_gamma(phi) - ln_gamma(y as f64 + 1.0)
            + phi * (phi / (phi + mu)).ln()
            + y as f64 * (mu / (phi + mu)).ln())
        .exp()
    }

    #[test]
    fn nb_examples() {
        assert!((nb_logpmf(0, 1.0, 1.0).unwrap() - 0.5f64.ln()).abs() < 1e-12);
        let poisson = |y: u64, mu: f64| y as f64 * mu.ln() - mu - ln_gamma(y as f64 + 1.0);
        for &(y, mu) in &[(0u64, 0.3f64), (3, 2.5), (17, 12.0), (95, 95.0), (150, 150.0)] {
            let got = nb_logpmf(y, mu, 1e8).unwrap();
            assert!((got - poisson(y, mu)).abs() < 1e-6, "y={y} mu={mu} diff {}", got - poisson(y, mu));
        }
        // Far from the mean the gap is ((y - mu)^2 - y) / (2 phi) to first order.
        for &(y, mu) in &[(120u64, 95.0f64), (1000, 1000.0), (40, 400.0)] {
            let gap = nb_logpmf(y, mu, 1e8).unwrap() - poisson(y, mu);
            let first_order = ((y as f64 - mu).powi(2) - y as f64) / 2e8;
            assert!((gap - first_order).abs() < 1e-3 * first_order.abs().max(1e-8), "y={y} mu={mu} gap {gap}");
        }
        assert!(nb_logpmf(1, 0.0, 1.0).is_err());
        assert!(nb_logpmf(1, 1.0, -1.0).is_err());
        assert!(nb_logpmf(1, f64::NAN, 1.0).is_err());
    }

    #[test]
    fn nb_matches_textbook_formula() {
        for &(y, mu, phi) in &[(0u64, 3.0, 0.5), (5, 3.0, 2.0), (40, 30.0, 7.5), (200, 150.0, 20.0)] {
            let got = nb_logpmf(y, mu, phi).unwrap();
            assert!((got - direct_pmf(y, mu, phi).ln()).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn nb_pmf_sums_to_one(mu in 0.05f64..60.0, phi in 0.3f64..50.0) {
            // Variance mu + mu^2/phi; sum far enough into the tail.
            let sd = (mu + mu * mu / phi).sqrt();
            let upper = (mu + 60.0 * sd + 200.0) as u64;
            let total: f64 = (0..=upper).map(|y| nb_logpmf(y, mu, phi).unwrap().exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-8, "total {}", total);
        }
    }

    pub(crate) fn small_model(variant: Variant, freeze: bool) -> (Model, ChaCha8Rng) {
        let cal = ReportingCalendar::default();
        let now = d("2021-03-26");
        let start = now - Days::new(41);
        let max_delay = 8;
        let rows = 42;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut cells = vec![0u64; rows * (max_delay + 1)];
        for row in 0..rows {
            for dd in 0..=max_delay {
                let report = start + Days::new((row + dd) as u64);
                if report <= now && (dd == max_delay || cal.is_reporting_day(report)) {
                    cells[row * (max_delay + 1) + dd] = rng.random_range(0..12);
                }
            }
        }
        let tri = ReportingTriangle::from_cells(start, now, max_delay, cells, &cal).unwrap();
        let values: DatedSeries = (0..120)
            .map(|i| (start - Days::new(60) + Days::new(i), 20.0 + 10.0 * (i as f64 / 9.0).sin()))
            .collect();
        let mut spec = ModelSpec::new(variant);
        spec.max_delay = max_delay;
        spec.window_length = 28;
        spec.freeze_beta = freeze;
        if variant != Variant::R {
            let transform = if variant == Variant::L { Transform::Log } else { Transform::RelativeWeeklyChange };
            spec = spec.with_indicator(
                IndicatorSeries::new("icu", values).with_smoothing(7).with_lag(5).with_transform(transform),
            );
        }
        (Model::new(&spec, &tri, &cal).unwrap(), rng)
    }

    fn random_theta(model: &Model, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut theta = model.initial_point(rng);
        for v in theta.iter_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
        theta
    }

    #[test]
    fn flat_density_equals_sum_of_terms() {
        for variant in [Variant::R, Variant::L, Variant::RL] {
            let (model, mut rng) = small_model(variant, false);
            for _ in 0..100 {
                let theta = random_theta(&model, &mut rng);
                let state = model.state_from_vec(&theta);
                let terms = model.terms(&state).unwrap();
                let flat = model.log_density(&theta);
                assert!((terms.total() - flat).abs() < 1e-8 * flat.abs().max(1.0), "{variant}");
                // component-wise oracle
                let manual = model.log_likelihood(&state).unwrap()
                    + crate::epi::path_logdensity(model.epi(), &state.path).unwrap()
                    + terms.sigma_prior + terms.phi_prior + terms.beta_prior
                    + terms.gamma_prior + terms.eta_prior + terms.jacobian;
                assert!((manual - model.log_posterior(&state).unwrap()).abs() < 1e-9);
                let back = model.vec_from_state(&state).unwrap();
                for (a, b) in back.iter().zip(&theta) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn likelihood_matches_double_loop() {
        let (model, mut rng) = small_model(Variant::R, false);
        let theta = random_theta(&model, &mut rng);
        let state = model.state_from_vec(&theta);
        let tri = model.triangle();
        let mut expected = 0.0;
        for row in 0..tri.n_rows() {
            let t = tri.date(row);
            let h = crate::delay::hazards(&state.delay, model.design(), t).unwrap();
            let p = crate::delay::delay_probabilities(&h).unwrap();
            for dd in 0..tri.width() {
                if tri.is_observed(row, dd) && !tri.is_structural_zero(row, dd) {
                    let mu = state.path.log_lambda[row].exp() * p[dd];
                    expected += direct_pmf(tri.cell(row, dd), mu, state.phi).ln();
                }
            }
        }
        let got = model.log_likelihood(&state).unwrap();
        assert!((got - expected).abs() < 1e-8, "{got} vs {expected}");
    }

    #[test]
    fn histogram_constant_matches_cellwise_sum() {
        let (model, _) = small_model(Variant::R, false);
        for phi in [0.05, 0.7, 3.0, 45.0, 1e6] {
            let direct: f64 = model.cells().iter().map(|c| nb_log_const(c.n, phi)).sum();
            assert!((model.const_total(phi) - direct).abs() < 1e-9 * direct.abs().max(1.0));
        }
    }

    #[test]
    fn finite_difference_check_rejects_a_wrong_gradient() {
        let f = |x: &[f64]| x[0] * x[0] + 3.0 * x[1];
        finite_difference_check(&f, &[2.0, 3.0], &[1.0, 0.0]).unwrap();
        assert!(finite_difference_check(&f, &[2.0, 3.1], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn masking_a_cell_removes_exactly_its_term() {
        let (model, mut rng) = small_model(Variant::R, false);
        let theta = random_theta(&model, &mut rng);
        let state = model.state_from_vec(&theta);
        let full = model.log_likelihood(&state).unwrap();
        let cell = model.cells()[17];
        let mut masked = model.clone();
        masked.exclude_cell(cell.row, cell.d).unwrap();
        let h = crate::delay::hazards(&state.delay, model.design(), model.triangle().date(cell.row)).unwrap();
        let p = crate::delay::delay_probabilities(&h).unwrap();
        let term = nb_logpmf(cell.n, state.path.log_lambda[cell.row].exp() * p[cell.d], state.phi).unwrap();
        let diff = full - masked.log_likelihood(&state).unwrap();
        assert!((diff - term).abs() < 1e-9, "{diff} vs {term}");
    }

    #[test]
    fn empty_and_single_cell_likelihood() {
        let cal = ReportingCalendar::every_day();
        let now = d("2021-03-26");
        // One row, observed only at delay 0.
        let tri = ReportingTriangle::from_cells(now, now, 2, vec![4, 0, 0], &cal).unwrap();
        let mut spec = ModelSpec::new(Variant::R);
        spec.max_delay = 2;
        spec.window_length = 1;
        spec.breakpoint_spacing = 1;
        spec.validate().unwrap_err(); // window of one day is not a model
        spec.window_length = 2;
        let tri2 = ReportingTriangle::from_cells(now - Days::new(1), now, 2, vec![0, 0, 0, 4, 0, 0], &cal).unwrap();
        let mut model = Model::new(&spec, &tri2, &cal).unwrap();
        let state = ParameterState {
            path: LatentPath { log_lambda: vec![1.0, 2.0], sigma: 0.5, beta: vec![] },
            delay: DelayParams { gamma: vec![0.3, -0.2], eta: vec![0.0; model.design().n_covariates()] },
            phi: 3.0,
        };
        // Cells in the likelihood: (0,0), (0,1), (1,0).
        assert_eq!(model.n_likelihood_cells(), 3);
        model.exclude_cell(0, 0).unwrap();
        model.exclude_cell(0, 1).unwrap();
        let h = crate::delay::hazards(&state.delay, model.design(), now).unwrap();
        let expected = nb_logpmf(4, 2f64.exp() * h[0], 3.0).unwrap();
        assert!((model.log_likelihood(&state).unwrap() - expected).abs() < 1e-12);
        model.exclude_cell(1, 0).unwrap();
        assert_eq!(model.log_likelihood(&state).unwrap(), 0.0);
        let _ = tri;
    }

    #[test]
    fn rl_with_zero_beta_equals_r_plus_beta_prior() {
        let (rl, mut rng) = small_model(Variant::RL, false);
        let (r, _) = small_model(Variant::R, false);
        for _ in 0..1000 {
            let theta_r = random_theta(&r, &mut rng);
            let mut state = r.state_from_vec(&theta_r);
            let lp_r = r.log_posterior(&state).unwrap();
            state.path.beta = vec![0.0];
            let lp_rl = rl.log_posterior(&state).unwrap();
            let beta_prior = normal_logpdf(0.0, 0.0, rl.spec().priors.beta_scale);
            assert!((lp_rl - (lp_r + beta_prior)).abs() < 1e-9);
        }
    }

    #[test]
    fn frozen_beta_matches_r_exactly() {
        let (rl, mut rng) = small_model(Variant::RL, true);
        let (r, _) = small_model(Variant::R, false);
        assert_eq!(rl.dim(), r.dim());
        for _ in 0..1000 {
            let theta = random_theta(&r, &mut rng);
            assert_eq!(r.log_density(&theta), rl.log_density(&theta));
        }
    }

    #[test]
    fn sigma_prior_decreases_in_the_tail() {
        let (model, _) = small_model(Variant::R, false);
        let s = model.spec().priors.sigma_scale;
        let mut prev = f64::INFINITY;
        for k in 1..20 {
            let v = half_normal_logpdf(s * k as f64, s);
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for variant in [Variant::R, Variant::L, Variant::RL] {
            let (model, mut rng) = small_model(variant, false);
            for _ in 0..5 {
                let theta = random_theta(&model, &mut rng);
                let mut grad = vec![0.0; model.dim()];
                let v = model.log_density_gradient(&theta, &mut grad);
                assert!((v - model.log_density(&theta)).abs() < 1e-8 * v.abs().max(1.0));
                for i in 0..model.dim() {
                    let hstep = 1e-5;
                    let mut a = theta.clone();
                    a[i] += hstep;
                    let mut b = theta.clone();
                    b[i] -= hstep;
                    let fd = (model.log_density(&a) - model.log_density(&b)) / (2.0 * hstep);
                    let tol = 1e-4 * fd.abs().max(1.0);
                    assert!((fd - grad[i]).abs() < tol, "{variant} param {i}: fd {fd} vs {}", grad[i]);
                }
            }
        }
    }

    #[test]
    fn posterior_is_finite_for_finite_coordinates() {
        let (model, mut rng) = small_model(Variant::RL, false);
        for _ in 0..200 {
            let theta: Vec<f64> = (0..model.dim()).map(|_| rng.random_range(-4.0..4.0)).collect();
            assert!(model.log_density(&theta).is_finite());
        }
    }
}
