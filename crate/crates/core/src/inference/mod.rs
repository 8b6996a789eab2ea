//! MCMC sampling of the posterior and convergence diagnostics.
//!
//! Chains run in parallel, each with its own ChaCha8 stream (`stream = chain`)
//! seeded from the master seed; results are merged by chain index, so draws
//! are bitwise reproducible for a given seed regardless of thread count.

mod diagnostics;
mod hmc;
mod metropolis;
mod model_target;
mod target;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ReportingCalendar, ReportingTriangle};
use crate::epi::ModelSpec;
use crate::error::{Error, Result};
use crate::posterior::Model;

pub use diagnostics::{ess, ess_of, rhat, rhat_of};
pub use model_target::ModelTarget;
pub use target::{Evaluator, FullEvaluator, Move, MoveKind, Target};

const INIT_RETRIES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    AdaptiveBlockwiseMetropolis,
    GradientHmc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup_iters: usize,
    pub sampling_iters: usize,
    pub seed: u64,
    pub algorithm: Algorithm,
    /// Defaults to 0.234 for Metropolis and 0.8 for HMC.
    pub target_acceptance: Option<f64>,
    /// Upper bound of the uniformly drawn number of leapfrog steps.
    pub max_leapfrog: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            warmup_iters: 1000,
            sampling_iters: 1000,
            seed: 1,
            algorithm: Algorithm::default(),
            target_acceptance: None,
            max_leapfrog: 64,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 {
            return Err(Error::Config("sampler needs at least one chain".into()));
        }
        if self.sampling_iters == 0 {
            return Err(Error::Config("sampling_iters must be at least 1".into()));
        }
        if let Some(a) = self.target_acceptance {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::Config(format!("target_acceptance must lie in (0, 1), got {a}")));
            }
        }
        if self.algorithm == Algorithm::GradientHmc && self.max_leapfrog == 0 {
            return Err(Error::Config("max_leapfrog must be at least 1".into()));
        }
        Ok(())
    }

    pub fn acceptance_target(&self) -> f64 {
        self.target_acceptance.unwrap_or(match self.algorithm {
            Algorithm::AdaptiveBlockwiseMetropolis => 0.234,
            Algorithm::GradientHmc => 0.8,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamDiagnostics {
    pub name: String,
    /// `None` with fewer than two chains or four draws, or zero variance.
    pub rhat: Option<f64>,
    pub ess: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainStats {
    /// Post-warmup acceptance rate of every move (HMC: one entry).
    pub acceptance: Vec<(String, f64)>,
    pub step_size: Option<f64>,
    pub divergences: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    /// `[chain][iteration][parameter]`
    pub draws: Vec<Vec<Vec<f64>>>,
    pub parameter_names: Vec<String>,
    pub diagnostics: Vec<ParamDiagnostics>,
    pub chain_stats: Vec<ChainStats>,
}

impl PosteriorSamples {
    pub fn n_chains(&self) -> usize {
        self.draws.len()
    }

    pub fn n_iterations(&self) -> usize {
        self.draws.first().map_or(0, Vec::len)
    }

    pub fn n_draws(&self) -> usize {
        self.n_chains() * self.n_iterations()
    }

    pub fn param_index(&self, name: &str) -> Result<usize> {
        self.parameter_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Domain(format!("no parameter named {name}")))
    }

    /// Draws of one parameter, `[chain][iteration]`.
    pub fn chains_of(&self, index: usize) -> Vec<Vec<f64>> {
        self.draws.iter().map(|c| c.iter().map(|d| d[index]).collect()).collect()
    }

    /// Draws of one parameter, chain-major.
    pub fn pooled(&self, index: usize) -> Vec<f64> {
        self.draws.iter().flatten().map(|d| d[index]).collect()
    }

    /// Every draw vector, chain-major.
    pub fn iter_draws(&self) -> impl Iterator<Item = &[f64]> {
        self.draws.iter().flatten().map(Vec::as_slice)
    }

    pub fn max_rhat(&self) -> Option<f64> {
        self.diagnostics.iter().filter_map(|d| d.rhat).reduce(f64::max)
    }

    pub fn min_ess(&self) -> Option<f64> {
        self.diagnostics.iter().filter_map(|d| d.ess).reduce(f64::min)
    }

    fn compute_diagnostics(&mut self) {
        self.diagnostics = (0..self.parameter_names.len())
            .map(|i| {
                let chains = self.chains_of(i);
                ParamDiagnostics {
                    name: self.parameter_names[i].clone(),
                    rhat: rhat_of(&chains).ok(),
                    ess: ess_of(&chains).ok(),
                }
            })
            .collect();
    }
}

/// Output of one chain.
pub(crate) struct ChainRun {
    pub draws: Vec<Vec<f64>>,
    pub stats: ChainStats,
}

pub(crate) fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

/// Finite starting point, retried up to 100 times.
pub(crate) fn initialize<T: Target + ?Sized>(target: &T, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    for _ in 0..INIT_RETRIES {
        let theta = target.initial_point(rng);
        if target.log_density(&theta).is_finite() {
            return Ok(theta);
        }
    }
    Err(Error::Inference(format!(
        "no finite starting point after {INIT_RETRIES} attempts"
    )))
}

/// Samples any target; `names` label the coordinates.
pub fn sample<T: Target>(target: &T, names: Vec<String>, config: &SamplerConfig) -> Result<PosteriorSamples> {
    config.validate()?;
    if names.len() != target.dim() {
        return Err(Error::Internal(format!(
            "{} parameter names for a {}-dimensional target",
            names.len(),
            target.dim()
        )));
    }
    let runs: Vec<Result<ChainRun>> = (0..config.chains)
        .into_par_iter()
        .map(|chain| {
            let mut rng = chain_rng(config.seed, chain);
            match config.algorithm {
                Algorithm::AdaptiveBlockwiseMetropolis => metropolis::run_chain(target, config, &mut rng),
                Algorithm::GradientHmc => hmc::run_chain(target, config, &mut rng),
            }
        })
        .collect();
    let mut draws = Vec::with_capacity(config.chains);
    let mut chain_stats = Vec::with_capacity(config.chains);
    for run in runs {
        let run = run?;
        if run.draws.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Inference("sampler produced a non-finite draw".into()));
        }
        draws.push(run.draws);
        chain_stats.push(run.stats);
    }
    let mut samples = PosteriorSamples {
        draws,
        parameter_names: names,
        diagnostics: Vec::new(),
        chain_stats,
    };
    samples.compute_diagnostics();
    Ok(samples)
}

/// Samples a prepared model.
pub fn sample_model(model: &Model, config: &SamplerConfig) -> Result<PosteriorSamples> {
    sample(&ModelTarget::new(model), model.parameter_names(), config)
}

/// Prepares the model for `triangle` and samples its posterior.
pub fn run_mcmc(
    spec: &ModelSpec,
    triangle: &ReportingTriangle,
    calendar: &ReportingCalendar,
    config: &SamplerConfig,
) -> Result<PosteriorSamples> {
    config.validate()?;
    let model = Model::new(spec, triangle, calendar)?;
    sample_model(&model, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Bivariate normal with correlation.
    struct Gauss2 {
        mean: [f64; 2],
        cov: [[f64; 2]; 2],
        joint: bool,
    }

    impl Gauss2 {
        fn precision(&self) -> [[f64; 2]; 2] {
            let [[a, b], [_, d]] = self.cov;
            let det = a * d - b * b;
            [[d / det, -b / det], [-b / det, a / det]]
        }
    }

    impl Target for Gauss2 {
        fn dim(&self) -> usize {
            2
        }

        fn initial_point(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
            (0..2).map(|_| rng.random_range(-2.0..2.0)).collect()
        }

        fn log_density(&self, x: &[f64]) -> f64 {
            let p = self.precision();
            let (u, v) = (x[0] - self.mean[0], x[1] - self.mean[1]);
            -0.5 * (p[0][0] * u * u + 2.0 * p[0][1] * u * v + p[1][1] * v * v)
        }

        fn log_density_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
            let p = self.precision();
            let (u, v) = (x[0] - self.mean[0], x[1] - self.mean[1]);
            grad[0] = -(p[0][0] * u + p[0][1] * v);
            grad[1] = -(p[0][1] * u + p[1][1] * v);
            self.log_density(x)
        }

        fn moves(&self) -> Vec<Move> {
            if self.joint {
                vec![Move::joint("x", vec![0, 1])]
            } else {
                vec![Move::joint("x0", vec![0]), Move::joint("x1", vec![1])]
            }
        }
    }

    fn gauss() -> Gauss2 {
        Gauss2 {
            mean: [1.5, -2.0],
            cov: [[2.0, 0.9], [0.9, 1.0]],
            joint: true,
        }
    }

    fn check_moments(samples: &PosteriorSamples, target: &Gauss2) {
        for i in 0..2 {
            let x = samples.pooled(i);
            let n = x.len() as f64;
            let mean = x.iter().sum::<f64>() / n;
            let ess = ess_of(&samples.chains_of(i)).unwrap();
            let mcse = (target.cov[i][i] / ess).sqrt();
            assert!((mean - target.mean[i]).abs() < 3.0 * mcse, "mean {i}: {mean} (mcse {mcse})");
        }
        let x0 = samples.pooled(0);
        let x1 = samples.pooled(1);
        let n = x0.len() as f64;
        let m0 = x0.iter().sum::<f64>() / n;
        let m1 = x1.iter().sum::<f64>() / n;
        let c = |a: &[f64], ma: f64, b: &[f64], mb: f64| {
            a.iter().zip(b).map(|(u, v)| (u - ma) * (v - mb)).sum::<f64>() / (n - 1.0)
        };
        let est = [[c(&x0, m0, &x0, m0), c(&x0, m0, &x1, m1)], [0.0, c(&x1, m1, &x1, m1)]];
        for (i, j) in [(0, 0), (0, 1), (1, 1)] {
            let rel = (est[i][j] - target.cov[i][j]).abs() / target.cov[i][j].abs();
            assert!(rel < 0.10, "cov[{i}][{j}] {} vs {}", est[i][j], target.cov[i][j]);
        }
    }

    fn names() -> Vec<String> {
        vec!["x0".into(), "x1".into()]
    }

    #[test]
    fn metropolis_recovers_bivariate_normal() {
        let target = gauss();
        let config = SamplerConfig {
            warmup_iters: 2000,
            sampling_iters: 20000,
            seed: 11,
            ..SamplerConfig::default()
        };
        let samples = sample(&target, names(), &config).unwrap();
        check_moments(&samples, &target);
        for stats in &samples.chain_stats {
            for (_, rate) in &stats.acceptance {
                assert!((0.15..=0.45).contains(rate), "acceptance {rate}");
            }
        }
        assert!(samples.max_rhat().unwrap() < 1.01);
    }

    #[test]
    fn elementwise_metropolis_recovers_bivariate_normal() {
        let target = Gauss2 { joint: false, ..gauss() };
        let config = SamplerConfig {
            warmup_iters: 2000,
            sampling_iters: 20000,
            seed: 5,
            ..SamplerConfig::default()
        };
        let samples = sample(&target, names(), &config).unwrap();
        check_moments(&samples, &target);
        for stats in &samples.chain_stats {
            for (_, rate) in &stats.acceptance {
                assert!((0.15..=0.45).contains(rate), "acceptance {rate}");
            }
        }
    }

    #[test]
    fn hmc_recovers_bivariate_normal() {
        let target = gauss();
        let config = SamplerConfig {
            warmup_iters: 1000,
            sampling_iters: 5000,
            seed: 3,
            algorithm: Algorithm::GradientHmc,
            max_leapfrog: 16,
            ..SamplerConfig::default()
        };
        let samples = sample(&target, names(), &config).unwrap();
        check_moments(&samples, &target);
        assert!(samples.max_rhat().unwrap() < 1.01);
    }

    #[test]
    fn deterministic_given_seed() {
        let target = gauss();
        for algorithm in [Algorithm::AdaptiveBlockwiseMetropolis, Algorithm::GradientHmc] {
            let config = SamplerConfig {
                warmup_iters: 200,
                sampling_iters: 300,
                seed: 99,
                algorithm,
                max_leapfrog: 8,
                ..SamplerConfig::default()
            };
            let a = sample(&target, names(), &config).unwrap();
            let b = sample(&target, names(), &config).unwrap();
            assert_eq!(a.draws, b.draws);
            let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
            let c = pool.install(|| sample(&target, names(), &config).unwrap());
            assert_eq!(a.draws, c.draws);
            let other = sample(&target, names(), &SamplerConfig { seed: 100, ..config.clone() }).unwrap();
            assert_ne!(a.draws, other.draws);
        }
    }

    #[test]
    fn chain_order_does_not_change_pooled_summaries() {
        let target = gauss();
        let config = SamplerConfig { warmup_iters: 100, sampling_iters: 200, ..SamplerConfig::default() };
        let mut a = sample(&target, names(), &config).unwrap();
        let mean = |s: &PosteriorSamples| {
            let mut x = s.pooled(0);
            x.sort_by(f64::total_cmp);
            x
        };
        let before = mean(&a);
        a.draws.reverse();
        assert_eq!(before, mean(&a));
    }

    #[test]
    fn config_errors() {
        let target = gauss();
        let bad = SamplerConfig { sampling_iters: 0, ..SamplerConfig::default() };
        assert!(matches!(sample(&target, names(), &bad), Err(Error::Config(_))));
        let bad = SamplerConfig { chains: 0, ..SamplerConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = SamplerConfig { target_acceptance: Some(1.5), ..SamplerConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let json = r#"{"chains": 2, "bogus": 1}"#;
        assert!(serde_json::from_str::<SamplerConfig>(json).is_err());
        let json = r#"{"chains": 2, "algorithm": "gradient_hmc"}"#;
        let parsed: SamplerConfig = serde_json::from_str(json).unwrap();
        assert_eq!(parsed.algorithm, Algorithm::GradientHmc);
        assert_eq!(parsed.acceptance_target(), 0.8);
    }

    struct Nowhere;

    impl Target for Nowhere {
        fn dim(&self) -> usize {
            1
        }
        fn initial_point(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
            vec![StandardNormal.sample(rng)]
        }
        fn log_density(&self, _: &[f64]) -> f64 {
            f64::NEG_INFINITY
        }
        fn log_density_gradient(&self, _: &[f64], _: &mut [f64]) -> f64 {
            f64::NEG_INFINITY
        }
    }

    #[test]
    fn infinite_start_is_an_initialization_error() {
        let err = sample(&Nowhere, vec!["x".into()], &SamplerConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Inference(_)));
        assert!(err.to_string().contains("100"));
    }
}
