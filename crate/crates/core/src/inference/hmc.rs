//! Static-trajectory HMC with a diagonal mass matrix.
//!
//! The number of leapfrog steps is drawn uniformly from `1..=max_leapfrog`
//! each iteration. Warmup adapts the step size by dual averaging and the
//! inverse mass from draw variances over doubling windows; both are fixed
//! afterwards.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::target::Target;
use super::{initialize, ChainRun, ChainStats, SamplerConfig};
use crate::error::Result;
use crate::posterior::finite_difference_check;

const DIVERGENCE: f64 = 1000.0;

struct DualAveraging {
    mu: f64,
    h_bar: f64,
    log_eps_bar: f64,
    count: f64,
    target: f64,
}

impl DualAveraging {
    fn new(eps: f64, target: f64) -> Self {
        Self {
            mu: (10.0 * eps).ln(),
            h_bar: 0.0,
            log_eps_bar: 0.0,
            count: 0.0,
            target,
        }
    }

    /// Returns the next step size.
    fn update(&mut self, alpha: f64) -> f64 {
        const GAMMA: f64 = 0.05;
        const T0: f64 = 10.0;
        const KAPPA: f64 = 0.75;
        self.count += 1.0;
        let m = self.count;
        self.h_bar = (1.0 - 1.0 / (m + T0)) * self.h_bar + (self.target - alpha) / (m + T0);
        let log_eps = self.mu - m.sqrt() / GAMMA * self.h_bar;
        let w = m.powf(-KAPPA);
        self.log_eps_bar = w * log_eps + (1.0 - w) * self.log_eps_bar;
        log_eps.exp()
    }

    fn final_step(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

struct Integrator<'a, T: Target + ?Sized> {
    target: &'a T,
    inv_mass: Vec<f64>,
    theta: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
}

struct Proposal {
    theta: Vec<f64>,
    grad: Vec<f64>,
    logp: f64,
    log_ratio: f64,
}

impl<T: Target + ?Sized> Integrator<'_, T> {
    fn kinetic(&self, p: &[f64]) -> f64 {
        0.5 * p.iter().zip(&self.inv_mass).map(|(v, m)| v * v * m).sum::<f64>()
    }

    fn momentum(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.inv_mass
            .iter()
            .map(|m| rng.sample::<f64, _>(StandardNormal) / m.sqrt())
            .collect()
    }

    fn trajectory(&self, mut p: Vec<f64>, eps: f64, steps: usize) -> Proposal {
        let h0 = self.logp - self.kinetic(&p);
        let mut theta = self.theta.clone();
        let mut grad = self.grad.clone();
        let mut logp = self.logp;
        for (pi, g) in p.iter_mut().zip(&grad) {
            *pi += 0.5 * eps * g;
        }
        for s in 0..steps {
            for i in 0..theta.len() {
                theta[i] += eps * self.inv_mass[i] * p[i];
            }
            logp = self.target.log_density_gradient(&theta, &mut grad);
            if !logp.is_finite() {
                break;
            }
            let w = if s + 1 == steps { 0.5 } else { 1.0 };
            for (pi, g) in p.iter_mut().zip(&grad) {
                *pi += w * eps * g;
            }
        }
        let log_ratio = if logp.is_finite() {
            logp - self.kinetic(&p) - h0
        } else {
            f64::NEG_INFINITY
        };
        Proposal { theta, grad, logp, log_ratio: if log_ratio.is_nan() { f64::NEG_INFINITY } else { log_ratio } }
    }

    fn reasonable_step(&self, rng: &mut ChaCha8Rng, start: f64) -> f64 {
        let mut eps = start;
        let ratio = |eps: f64, rng: &mut ChaCha8Rng| self.trajectory(self.momentum(rng), eps, 1).log_ratio;
        let up = ratio(eps, rng) > 0.5f64.ln();
        for _ in 0..100 {
            let r = ratio(eps, rng);
            if up && r > 0.5f64.ln() {
                eps *= 2.0;
            } else if !up && r <= 0.5f64.ln() {
                eps *= 0.5;
            } else {
                break;
            }
        }
        eps.clamp(1e-10, 1e3)
    }
}

/// Mass-matrix windows (end iterations) for a given warmup length.
fn mass_windows(warmup: usize) -> Vec<usize> {
    const INIT: usize = 75;
    const TERM: usize = 50;
    const BASE: usize = 25;
    if warmup < INIT + TERM + BASE {
        return Vec::new();
    }
    let stop = warmup - TERM;
    let mut ends = Vec::new();
    let mut at = INIT;
    let mut len = BASE;
    loop {
        let next = at + len;
        if next + 2 * len > stop {
            ends.push(stop);
            break;
        }
        ends.push(next);
        at = next;
        len *= 2;
    }
    ends
}

pub(crate) fn run_chain<T: Target + ?Sized>(target: &T, config: &SamplerConfig, rng: &mut ChaCha8Rng) -> Result<ChainRun> {
    let theta = initialize(target, rng)?;
    let dim = target.dim();
    let mut grad = vec![0.0; dim];
    let logp = target.log_density_gradient(&theta, &mut grad);
    finite_difference_check(&|x| target.log_density(x), &grad, &theta)?;

    let mut state = Integrator { target, inv_mass: vec![1.0; dim], theta, grad, logp };
    let goal = config.acceptance_target();
    let mut eps = state.reasonable_step(rng, 0.1);
    let mut averaging = DualAveraging::new(eps, goal);
    let windows = mass_windows(config.warmup_iters);
    let window_start = if windows.is_empty() { usize::MAX } else { 75 };
    let mut win_count = 0.0;
    let mut win_mean = vec![0.0; dim];
    let mut win_m2 = vec![0.0; dim];

    let mut draws = Vec::with_capacity(config.sampling_iters);
    let mut accepted = 0usize;
    let mut divergences = 0usize;
    for iter in 0..config.warmup_iters + config.sampling_iters {
        let warmup = iter < config.warmup_iters;
        if iter == config.warmup_iters && config.warmup_iters > 0 {
            eps = averaging.final_step();
        }
        let steps = rng.random_range(1..=config.max_leapfrog);
        let p = state.momentum(rng);
        let prop = state.trajectory(p, eps, steps);
        if -prop.log_ratio > DIVERGENCE {
            divergences += usize::from(!warmup);
        }
        let alpha = prop.log_ratio.min(0.0).exp();
        let log_u: f64 = rng.random::<f64>().ln();
        if log_u < prop.log_ratio {
            state.theta = prop.theta;
            state.grad = prop.grad;
            state.logp = prop.logp;
            accepted += usize::from(!warmup);
        }
        if warmup {
            eps = averaging.update(alpha);
            if iter >= window_start {
                win_count += 1.0;
                for i in 0..dim {
                    let delta = state.theta[i] - win_mean[i];
                    win_mean[i] += delta / win_count;
                    win_m2[i] += delta * (state.theta[i] - win_mean[i]);
                }
            }
            if windows.contains(&(iter + 1)) {
                let n = win_count;
                for i in 0..dim {
                    let var = win_m2[i] / (n - 1.0);
                    state.inv_mass[i] = n / (n + 5.0) * var + 1e-3 * 5.0 / (n + 5.0);
                }
                win_count = 0.0;
                win_mean.iter_mut().for_each(|v| *v = 0.0);
                win_m2.iter_mut().for_each(|v| *v = 0.0);
                eps = state.reasonable_step(rng, eps);
                averaging = DualAveraging::new(eps, goal);
            }
        } else {
            draws.push(state.theta.clone());
        }
    }
    Ok(ChainRun {
        draws,
        stats: ChainStats {
            acceptance: vec![("hmc".into(), accepted as f64 / config.sampling_iters as f64)],
            step_size: Some(eps),
            divergences,
        },
    })
}
