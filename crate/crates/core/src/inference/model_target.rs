//! The nowcasting posterior as a sampling target, with cached per-row
//! likelihood kernels for cheap Metropolis updates.

use rand_chacha::ChaCha8Rng;

use super::target::{Evaluator, Move, Target};
use crate::delay::log_delay_probabilities_into;
use crate::posterior::{nb_kernel, Model};

const SHIFT_BLOCK: usize = 7;
const DELAY_REPEAT: usize = 16;
/// Most recent days sampled as one correlated block.
const RECENT_DAYS: usize = 21;
const RECENT_REPEAT: usize = 4;
/// Length of the correlated blocks tiling the whole window.
const TILE_DAYS: usize = 14;
/// Periods (days) below which the smoothed-path sigma moves rescale `log_lambda`.
const SMOOTH_PERIODS: [usize; 3] = [56, 28, 14];

/// What a move touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Part {
    /// `log_lambda[lo..hi]`
    Lambda(usize, usize),
    Delay,
    /// Delay parameters with every `log_lambda[t]` shifted to keep the
    /// expected observed total of row `t` fixed.
    DelayCompensated,
    Beta,
    Sigma,
    /// `log_sigma` with the path residuals rescaled in proportion.
    SigmaScaled,
    /// `log_sigma` with `log_lambda` minus its projection on the first `k`
    /// cosine basis vectors rescaled in proportion.
    SigmaSmooth(usize),
    Phi,
}

pub struct ModelTarget<'m> {
    model: &'m Model,
    moves: Vec<Move>,
    parts: Vec<Part>,
    /// Orthonormal DCT-II vectors over the days, `[j * days + t]`.
    basis: Vec<f64>,
}

/// First `k` orthonormal DCT-II vectors of length `n`, row-major.
fn cosine_basis(n: usize, k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * k);
    for j in 0..k {
        let scale = if j == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        out.extend((0..n).map(|t| scale * (std::f64::consts::PI * j as f64 * (t as f64 + 0.5) / n as f64).cos()));
    }
    out
}

impl<'m> ModelTarget<'m> {
    pub fn new(model: &'m Model) -> Self {
        let l = model.layout();
        let days = l.n_days;
        let mut moves = Vec::new();
        let mut parts = Vec::new();
        for t in 0..days {
            moves.push(Move::joint(format!("log_lambda[{t}]"), vec![t]));
            parts.push(Part::Lambda(t, t + 1));
        }
        for lo in (0..days).step_by(SHIFT_BLOCK) {
            let hi = (lo + SHIFT_BLOCK).min(days);
            moves.push(Move::shift(format!("log_lambda[{lo}..{hi}]"), (lo..hi).collect()));
            parts.push(Part::Lambda(lo, hi));
        }
        moves.push(Move::shift("log_lambda[all]", (0..days).collect()));
        parts.push(Part::Lambda(0, days));
        // two tilings, offset by half a tile, so no day sits only on block edges
        let tiles = (0..days).step_by(TILE_DAYS).chain((TILE_DAYS / 2..days).step_by(TILE_DAYS));
        for lo in tiles {
            let hi = (lo + TILE_DAYS).min(days);
            moves.push(Move::joint(format!("log_lambda[{lo}..{hi}] joint"), (lo..hi).collect()));
            parts.push(Part::Lambda(lo, hi));
        }
        let recent = days.saturating_sub(RECENT_DAYS);
        moves.push(Move::joint(format!("log_lambda[{recent}..{days}]"), (recent..days).collect()).repeated(RECENT_REPEAT));
        parts.push(Part::Lambda(recent, days));
        // Coefficients that touch no reporting-day hazard only see their prior.
        let design = model.design();
        let dmax = model.spec().max_delay;
        let touches = |j: usize| {
            (0..days).any(|r| (0..dmax).any(|d| design.is_reporting(r, d) && design.covariates(r, d)[j] != 0.0))
        };
        let (free, prior_only): (Vec<usize>, Vec<usize>) = (0..design.n_covariates()).partition(|&j| touches(j));
        let mut delay: Vec<usize> = l.gamma().collect();
        delay.extend(free.iter().map(|&j| l.eta().start + j));
        moves.push(Move::joint("delay", delay.clone()).repeated(DELAY_REPEAT));
        parts.push(Part::DelayCompensated);
        moves.push(Move::joint("delay[fixed lambda]", delay));
        parts.push(Part::Delay);
        if !prior_only.is_empty() {
            let eta_scale = model.spec().priors.eta_scale;
            moves.push(Move::independent("eta[unused]", prior_only.iter().map(|&j| l.eta().start + j).collect(), eta_scale));
            parts.push(Part::Delay);
        }
        if l.n_beta > 0 {
            moves.push(Move::joint("beta", l.beta().collect()));
            parts.push(Part::Beta);
        }
        moves.push(Move::joint("log_sigma", vec![l.log_sigma()]));
        parts.push(Part::Sigma);
        moves.push(Move::joint("log_sigma[scaled path]", vec![l.log_sigma()]));
        parts.push(Part::SigmaScaled);
        let mut kmax = 0;
        if model.spec().variant.has_random_walk() {
            let mut ks: Vec<usize> = SMOOTH_PERIODS.iter().map(|p| (2 * days / p).max(2)).filter(|&k| k < days).collect();
            ks.dedup();
            for k in ks {
                moves.push(Move::joint(format!("log_sigma[smooth {k}]"), vec![l.log_sigma()]));
                parts.push(Part::SigmaSmooth(k));
                kmax = kmax.max(k);
            }
        }
        moves.push(Move::joint("log_phi", vec![l.log_phi()]));
        parts.push(Part::Phi);
        Self { model, moves, parts, basis: cosine_basis(days, kmax) }
    }
}

impl Target for ModelTarget<'_> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn initial_point(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.model.initial_point(rng)
    }

    fn log_density(&self, theta: &[f64]) -> f64 {
        self.model.log_density(theta)
    }

    fn log_density_gradient(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        self.model.log_density_gradient(theta, grad)
    }

    fn moves(&self) -> Vec<Move> {
        self.moves.clone()
    }

    fn evaluator<'a>(&'a self, theta: &[f64]) -> Box<dyn Evaluator + 'a> {
        Box::new(ModelEvaluator::new(self, theta))
    }
}

#[derive(Clone)]
struct Cache {
    theta: Vec<f64>,
    /// Log delay probabilities, `W x (D + 1)`.
    lp: Vec<f64>,
    kernel: Vec<f64>,
    consts: f64,
    path: f64,
    prior: f64,
}

struct ModelEvaluator<'a, 'm> {
    target: &'a ModelTarget<'m>,
    width: usize,
    cur: Cache,
    prop: Cache,
    pending: Option<usize>,
    dirty: Option<usize>,
}

impl<'a, 'm> ModelEvaluator<'a, 'm> {
    fn new(target: &'a ModelTarget<'m>, theta: &[f64]) -> Self {
        let model = target.model;
        let width = model.triangle().width();
        let days = model.layout().n_days;
        let mut cache = Cache {
            theta: theta.to_vec(),
            lp: vec![0.0; days * width],
            kernel: vec![0.0; days],
            consts: 0.0,
            path: 0.0,
            prior: 0.0,
        };
        let ev = Self {
            target,
            width,
            cur: cache.clone(),
            prop: cache.clone(),
            pending: None,
            dirty: None,
        };
        ev.fill_lp(&mut cache);
        for r in 0..days {
            cache.kernel[r] = ev.row_kernel(&cache, r);
        }
        cache.consts = model.const_total(ev.phi(&cache.theta));
        cache.path = ev.path(&cache.theta);
        cache.prior = model.log_prior_flat(&cache.theta);
        Self {
            cur: cache.clone(),
            prop: cache,
            ..ev
        }
    }

    fn phi(&self, theta: &[f64]) -> f64 {
        theta[self.target.model.layout().log_phi()].exp()
    }

    fn sigma(&self, theta: &[f64]) -> f64 {
        theta[self.target.model.layout().log_sigma()].exp()
    }

    fn fill_lp(&self, c: &mut Cache) {
        let model = self.target.model;
        let delay = model.delay_params(&c.theta);
        for r in 0..model.layout().n_days {
            log_delay_probabilities_into(&delay, model.design(), r, &mut c.lp[r * self.width..(r + 1) * self.width]);
        }
    }

    fn row_kernel(&self, c: &Cache, row: usize) -> f64 {
        let log_phi = c.theta[self.target.model.layout().log_phi()];
        let phi = log_phi.exp();
        let log_lambda = c.theta[row];
        let lp = &c.lp[row * self.width..(row + 1) * self.width];
        self.target
            .model
            .row_cells(row)
            .iter()
            .map(|cell| nb_kernel(cell.n, log_lambda + lp[cell.d], phi, log_phi))
            .sum()
    }

    /// Log of the delay probability mass observed in `row`; zero for rows
    /// without cells.
    fn observed_log_fraction(&self, c: &Cache, row: usize) -> f64 {
        let lp = &c.lp[row * self.width..(row + 1) * self.width];
        let cells = self.target.model.row_cells(row);
        if cells.is_empty() {
            return 0.0;
        }
        let top = cells.iter().map(|cell| lp[cell.d]).fold(f64::NEG_INFINITY, f64::max);
        top + cells.iter().map(|cell| (lp[cell.d] - top).exp()).sum::<f64>().ln()
    }

    fn path(&self, theta: &[f64]) -> f64 {
        let model = self.target.model;
        let l = model.layout();
        model.epi().total(&theta[l.log_lambda()], self.sigma(theta), &theta[l.beta()])
    }

    /// Path terms of days `lo..hi`.
    fn path_terms(&self, theta: &[f64], lo: usize, hi: usize) -> f64 {
        let model = self.target.model;
        let l = model.layout();
        let sigma = self.sigma(theta);
        let log_lambda = &theta[l.log_lambda()];
        let beta = &theta[l.beta()];
        (lo..hi).map(|t| model.epi().term(log_lambda, sigma, beta, t)).sum()
    }

    fn total(c: &Cache) -> f64 {
        c.kernel.iter().sum::<f64>() + c.consts + c.path + c.prior
    }

    fn restore(&mut self) {
        if let Some(m) = self.dirty.take() {
            for &i in &self.target.moves[m].indices {
                self.prop.theta[i] = self.cur.theta[i];
            }
            match self.target.parts[m] {
                Part::Lambda(lo, hi) => self.prop.kernel[lo..hi].copy_from_slice(&self.cur.kernel[lo..hi]),
                Part::SigmaScaled | Part::SigmaSmooth(_) => {
                    let days = self.target.model.layout().n_days;
                    self.prop.theta[..days].copy_from_slice(&self.cur.theta[..days]);
                    self.prop.kernel.copy_from_slice(&self.cur.kernel);
                }
                Part::Delay | Part::DelayCompensated => {
                    let days = self.target.model.layout().n_days;
                    self.prop.theta[..days].copy_from_slice(&self.cur.theta[..days]);
                    self.prop.lp.copy_from_slice(&self.cur.lp);
                    self.prop.kernel.copy_from_slice(&self.cur.kernel);
                }
                Part::Phi => {
                    self.prop.kernel.copy_from_slice(&self.cur.kernel);
                    self.prop.consts = self.cur.consts;
                }
                Part::Beta | Part::Sigma => {}
            }
            self.prop.path = self.cur.path;
            self.prop.prior = self.cur.prior;
        }
    }
}

impl Evaluator for ModelEvaluator<'_, '_> {
    fn theta(&self) -> &[f64] {
        &self.cur.theta
    }

    fn log_density(&self) -> f64 {
        Self::total(&self.cur)
    }

    fn propose(&mut self, index: usize, values: &[f64]) -> f64 {
        self.restore();
        self.dirty = Some(index);
        self.pending = Some(index);
        for (&i, &v) in self.target.moves[index].indices.iter().zip(values) {
            self.prop.theta[i] = v;
        }
        let model = self.target.model;
        let days = model.layout().n_days;
        let random_walk = model.spec().variant.has_random_walk();
        let diff = match self.target.parts[index] {
            Part::Lambda(lo, hi) => {
                let mut d = 0.0;
                for r in lo..hi {
                    let k = self.row_kernel(&self.prop, r);
                    d += k - self.cur.kernel[r];
                    self.prop.kernel[r] = k;
                }
                let end = if random_walk { (hi + 1).min(days) } else { hi };
                let old = self.path_terms(&self.cur.theta, lo, end);
                let new = self.path_terms(&self.prop.theta, lo, end);
                self.prop.path = self.cur.path + (new - old);
                d + (new - old)
            }
            part @ (Part::Delay | Part::DelayCompensated) => {
                let mut prop = std::mem::replace(
                    &mut self.prop,
                    Cache { theta: Vec::new(), lp: Vec::new(), kernel: Vec::new(), consts: 0.0, path: 0.0, prior: 0.0 },
                );
                self.fill_lp(&mut prop);
                let mut d = 0.0;
                if part == Part::DelayCompensated {
                    for r in 0..days {
                        let shift = self.observed_log_fraction(&self.cur, r) - self.observed_log_fraction(&prop, r);
                        prop.theta[r] = self.cur.theta[r] + shift;
                    }
                    prop.path = self.path(&prop.theta);
                    d += prop.path - self.cur.path;
                }
                for r in 0..days {
                    let k = self.row_kernel(&prop, r);
                    d += k - self.cur.kernel[r];
                    prop.kernel[r] = k;
                }
                prop.prior = model.log_prior_flat(&prop.theta);
                d += prop.prior - self.cur.prior;
                self.prop = prop;
                d
            }
            Part::Beta | Part::Sigma => {
                self.prop.path = self.path(&self.prop.theta);
                self.prop.prior = model.log_prior_flat(&self.prop.theta);
                (self.prop.path - self.cur.path) + (self.prop.prior - self.cur.prior)
            }
            Part::SigmaScaled => {
                let epi = model.epi();
                let l = model.layout();
                let ratio = self.sigma(&self.prop.theta) / self.sigma(&self.cur.theta);
                let beta = &self.cur.theta[l.beta()];
                let first = usize::from(random_walk);
                for t in first..days {
                    let residual = self.cur.theta[t] - epi.mean(&self.cur.theta[..days], beta, t);
                    let mean = epi.mean(&self.prop.theta[..days], beta, t);
                    self.prop.theta[t] = mean + ratio * residual;
                }
                let mut d = 0.0;
                for r in 0..days {
                    let k = self.row_kernel(&self.prop, r);
                    d += k - self.cur.kernel[r];
                    self.prop.kernel[r] = k;
                }
                self.prop.path = self.path(&self.prop.theta);
                self.prop.prior = model.log_prior_flat(&self.prop.theta);
                let jacobian = (days - first) as f64 * ratio.ln();
                d + (self.prop.path - self.cur.path) + (self.prop.prior - self.cur.prior) + jacobian
            }
            Part::SigmaSmooth(k) => {
                let ratio = self.sigma(&self.prop.theta) / self.sigma(&self.cur.theta);
                let basis = &self.target.basis;
                let mut smooth = vec![0.0; days];
                for j in 0..k {
                    let q = &basis[j * days..(j + 1) * days];
                    let coef: f64 = q.iter().zip(&self.cur.theta[..days]).map(|(a, b)| a * b).sum();
                    for (s, a) in smooth.iter_mut().zip(q) {
                        *s += coef * a;
                    }
                }
                for t in 0..days {
                    self.prop.theta[t] = smooth[t] + ratio * (self.cur.theta[t] - smooth[t]);
                }
                let mut d = 0.0;
                for r in 0..days {
                    let k = self.row_kernel(&self.prop, r);
                    d += k - self.cur.kernel[r];
                    self.prop.kernel[r] = k;
                }
                self.prop.path = self.path(&self.prop.theta);
                self.prop.prior = model.log_prior_flat(&self.prop.theta);
                let jacobian = (days - k) as f64 * ratio.ln();
                d + (self.prop.path - self.cur.path) + (self.prop.prior - self.cur.prior) + jacobian
            }
            Part::Phi => {
                let mut d = 0.0;
                for r in 0..days {
                    let k = self.row_kernel(&self.prop, r);
                    d += k - self.cur.kernel[r];
                    self.prop.kernel[r] = k;
                }
                self.prop.consts = model.const_total(self.phi(&self.prop.theta));
                self.prop.prior = model.log_prior_flat(&self.prop.theta);
                d + (self.prop.consts - self.cur.consts) + (self.prop.prior - self.cur.prior)
            }
        };
        if diff.is_nan() {
            f64::NEG_INFINITY
        } else {
            diff
        }
    }

    fn commit(&mut self) {
        let Some(m) = self.pending.take() else {
            return;
        };
        for &i in &self.target.moves[m].indices {
            self.cur.theta[i] = self.prop.theta[i];
        }
        match self.target.parts[m] {
            Part::Lambda(lo, hi) => self.cur.kernel[lo..hi].copy_from_slice(&self.prop.kernel[lo..hi]),
            Part::SigmaScaled | Part::SigmaSmooth(_) => {
                let days = self.target.model.layout().n_days;
                self.cur.theta[..days].copy_from_slice(&self.prop.theta[..days]);
                self.cur.kernel.copy_from_slice(&self.prop.kernel);
            }
            Part::Delay | Part::DelayCompensated => {
                let days = self.target.model.layout().n_days;
                self.cur.theta[..days].copy_from_slice(&self.prop.theta[..days]);
                self.cur.lp.copy_from_slice(&self.prop.lp);
                self.cur.kernel.copy_from_slice(&self.prop.kernel);
            }
            Part::Phi => {
                self.cur.kernel.copy_from_slice(&self.prop.kernel);
                self.cur.consts = self.prop.consts;
            }
            Part::Beta | Part::Sigma => {}
        }
        self.cur.path = self.prop.path;
        self.cur.prior = self.prop.prior;
        self.dirty = None;
    }
}
