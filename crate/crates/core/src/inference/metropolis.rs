//! Blockwise adaptive random-walk Metropolis.
//!
//! Every move keeps a Robbins-Monro scale driven toward the target acceptance
//! rate. Joint moves additionally learn a proposal covariance over doubling
//! warmup windows (Haario-style, shrunk toward a small diagonal). Adaptation
//! stops at the end of warmup.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::target::{Move, MoveKind, Target};
use super::{initialize, ChainRun, ChainStats, SamplerConfig};
use crate::error::Result;

const INITIAL_SD: f64 = 0.1;
const FIRST_WINDOW: usize = 50;

struct Adapter {
    dim: usize,
    log_scale: f64,
    /// Lower Cholesky factor of the proposal covariance, row-major.
    chol: Option<Vec<f64>>,
    /// Whether a window covariance has replaced the initial proposal.
    seeded: bool,
    steps: usize,
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Adapter {
    fn new(mv: &Move) -> Self {
        let dim = mv.indices.len();
        Self {
            dim,
            log_scale: INITIAL_SD.ln(),
            chol: None,
            seeded: false,
            steps: 0,
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim * dim],
        }
    }

    fn adapt_scale(&mut self, alpha: f64, target: f64) {
        self.steps += 1;
        let rate = (self.steps as f64).powf(-0.6);
        self.log_scale = (self.log_scale + rate * (alpha - target)).clamp(-25.0, 5.0);
    }

    fn observe(&mut self, x: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        let mut delta = vec![0.0; self.dim];
        for i in 0..self.dim {
            delta[i] = x[i] - self.mean[i];
            self.mean[i] += delta[i] / n;
        }
        for i in 0..self.dim {
            for j in 0..=i {
                self.m2[i * self.dim + j] += delta[i] * (x[j] - self.mean[j]);
            }
        }
    }

    /// Ends a covariance window.
    fn close_window(&mut self) {
        let n = self.count as f64;
        if self.count >= 10 {
            let d = self.dim;
            let mut cov = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..=i {
                    let c = self.m2[i * d + j] / (n - 1.0) * n / (n + 5.0);
                    cov[i * d + j] = c;
                    cov[j * d + i] = c;
                }
                cov[i * d + i] += 1e-3 * 5.0 / (n + 5.0) + 1e-10;
            }
            if let Some(l) = cholesky(&cov, d) {
                if !self.seeded {
                    self.log_scale = (2.38 / (d as f64).sqrt()).ln();
                    self.seeded = true;
                }
                self.chol = Some(l);
                self.steps = 0;
            }
        }
        self.count = 0;
        self.mean.iter_mut().for_each(|v| *v = 0.0);
        self.m2.iter_mut().for_each(|v| *v = 0.0);
    }

    fn step(&self, rng: &mut ChaCha8Rng, z: &mut [f64], out: &mut [f64]) {
        let scale = self.log_scale.exp();
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        match &self.chol {
            None => {
                for (o, v) in out.iter_mut().zip(z.iter()) {
                    *o = scale * v;
                }
            }
            Some(l) => {
                let d = self.dim;
                for i in 0..d {
                    let mut acc = 0.0;
                    for j in 0..=i {
                        acc += l[i * d + j] * z[j];
                    }
                    out[i] = scale * acc;
                }
            }
        }
    }
}

/// Cholesky factor of the inverse of the negative Hessian of the log density
/// over `indices`, by central differences of the gradient. `None` unless the
/// negative Hessian is positive definite.
fn curvature_chol<T: Target + ?Sized>(target: &T, theta: &[f64], indices: &[usize]) -> Option<Vec<f64>> {
    let d = indices.len();
    let mut x = theta.to_vec();
    let mut up = vec![0.0; theta.len()];
    let mut down = vec![0.0; theta.len()];
    let mut neg_h = vec![0.0; d * d];
    for (col, &j) in indices.iter().enumerate() {
        let h = 1e-4 * theta[j].abs().max(1.0);
        x[j] = theta[j] + h;
        target.log_density_gradient(&x, &mut up);
        x[j] = theta[j] - h;
        target.log_density_gradient(&x, &mut down);
        x[j] = theta[j];
        for (row, &i) in indices.iter().enumerate() {
            neg_h[row * d + col] = -(up[i] - down[i]) / (2.0 * h);
        }
    }
    for i in 0..d {
        for j in 0..i {
            let v = 0.5 * (neg_h[i * d + j] + neg_h[j * d + i]);
            neg_h[i * d + j] = v;
            neg_h[j * d + i] = v;
        }
    }
    if neg_h.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let l = cholesky(&neg_h, d)?;
    // inverse of L, lower triangular
    let mut inv = vec![0.0; d * d];
    for c in 0..d {
        inv[c * d + c] = 1.0 / l[c * d + c];
        for r in c + 1..d {
            let s: f64 = (c..r).map(|k| l[r * d + k] * inv[k * d + c]).sum();
            inv[r * d + c] = -s / l[r * d + r];
        }
    }
    // covariance = L^-T L^-1
    let mut cov = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let v: f64 = (i..d).map(|k| inv[k * d + i] * inv[k * d + j]).sum();
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    cholesky(&cov, d)
}

fn cholesky(a: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if !(s > 0.0) {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Some(l)
}

/// Ends of the covariance windows within `warmup` iterations.
fn window_ends(warmup: usize) -> Vec<usize> {
    let stop = warmup * 4 / 5;
    let mut ends = Vec::new();
    let mut len = FIRST_WINDOW;
    let mut at = 0;
    while at + len <= stop {
        at += len;
        len *= 2;
        ends.push(at);
    }
    if let Some(last) = ends.last_mut() {
        *last = stop;
    }
    ends
}

pub(crate) fn run_chain<T: Target + ?Sized>(target: &T, config: &SamplerConfig, rng: &mut ChaCha8Rng) -> Result<ChainRun> {
    let start = initialize(target, rng)?;
    let moves = target.moves();
    let mut eval = target.evaluator(&start);
    let mut adapters: Vec<Adapter> = moves.iter().map(Adapter::new).collect();
    for (adapter, mv) in adapters.iter_mut().zip(&moves) {
        if mv.kind == MoveKind::Joint {
            if let Some(l) = curvature_chol(target, &start, &mv.indices) {
                adapter.log_scale = (2.38 / (adapter.dim as f64).sqrt()).ln();
                adapter.chol = Some(l);
            }
        }
    }
    let goal = config.acceptance_target();
    let ends = window_ends(config.warmup_iters);
    let mut accepted = vec![0usize; moves.len()];
    let mut draws = Vec::with_capacity(config.sampling_iters);
    let widest = moves.iter().map(|m| m.indices.len()).max().unwrap_or(0);
    let mut z = vec![0.0; widest];
    let mut step = vec![0.0; widest];
    let mut values = vec![0.0; widest];
    let mut current = vec![0.0; widest];

    for iter in 0..config.warmup_iters + config.sampling_iters {
        let warmup = iter < config.warmup_iters;
        for (m, mv) in moves.iter().enumerate() {
            for _ in 0..mv.repeat {
                let d = mv.indices.len();
                let adapter = &mut adapters[m];
                {
                    let theta = eval.theta();
                    for (k, &i) in mv.indices.iter().enumerate() {
                        current[k] = theta[i];
                    }
                }
                // log q(current) - log q(proposal) for asymmetric proposals
                let mut correction = 0.0;
                match mv.kind {
                    MoveKind::Joint => {
                        adapter.step(rng, &mut z[..d], &mut step[..d]);
                        for k in 0..d {
                            values[k] = current[k] + step[k];
                        }
                    }
                    MoveKind::Shift => {
                        let delta = adapter.log_scale.exp() * rng.sample::<f64, _>(StandardNormal);
                        for k in 0..d {
                            values[k] = current[k] + delta;
                        }
                    }
                    MoveKind::Independent(sd) => {
                        for k in 0..d {
                            values[k] = sd * rng.sample::<f64, _>(StandardNormal);
                            correction += (values[k] * values[k] - current[k] * current[k]) / (2.0 * sd * sd);
                        }
                    }
                }
                let diff = eval.propose(m, &values[..d]) + correction;
                let log_u: f64 = rng.random::<f64>().ln();
                let alpha = if diff.is_nan() { 0.0 } else { diff.min(0.0).exp() };
                if !diff.is_nan() && log_u < diff {
                    eval.commit();
                    if !warmup {
                        accepted[m] += 1;
                    }
                }
                if warmup && !matches!(mv.kind, MoveKind::Independent(_)) {
                    adapter.adapt_scale(alpha, goal);
                    if mv.kind == MoveKind::Joint {
                        let theta = eval.theta();
                        for (k, &i) in mv.indices.iter().enumerate() {
                            current[k] = theta[i];
                        }
                        adapter.observe(&current[..d]);
                    }
                }
            }
        }
        if warmup && ends.contains(&(iter + 1)) {
            for (adapter, mv) in adapters.iter_mut().zip(&moves) {
                if mv.kind == MoveKind::Joint {
                    adapter.close_window();
                }
            }
        }
        if !warmup {
            draws.push(eval.theta().to_vec());
        }
    }
    let n = config.sampling_iters as f64;
    Ok(ChainRun {
        draws,
        stats: ChainStats {
            acceptance: moves
                .iter()
                .zip(&accepted)
                .map(|(mv, &a)| (mv.name.clone(), a as f64 / (n * mv.repeat as f64)))
                .collect(),
            step_size: None,
            divergences: 0,
        },
    })
}
