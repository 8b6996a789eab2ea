//! Split-chain R-hat and multi-chain effective sample size.

use super::PosteriorSamples;
use crate::error::{Error, Result};

fn check(chains: &[Vec<f64>]) -> Result<()> {
    if chains.len() < 2 {
        return Err(Error::Domain(format!("need at least 2 chains, got {}", chains.len())));
    }
    let n = chains[0].len();
    if n < 4 {
        return Err(Error::Domain(format!("need at least 4 iterations per chain, got {n}")));
    }
    if chains.iter().any(|c| c.len() != n) {
        return Err(Error::Domain("chains have different lengths".into()));
    }
    Ok(())
}

/// Each chain cut into two halves; an odd middle draw is dropped.
fn split(chains: &[Vec<f64>]) -> Vec<&[f64]> {
    let half = chains[0].len() / 2;
    let n = chains[0].len();
    chains.iter().flat_map(|c| [&c[..half], &c[n - half..]]).collect()
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn variance(x: &[f64], m: f64) -> f64 {
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

struct Moments {
    n: f64,
    means: Vec<f64>,
    within: f64,
    var_plus: f64,
}

fn moments(parts: &[&[f64]]) -> Result<Moments> {
    let n = parts[0].len() as f64;
    let m = parts.len() as f64;
    let means: Vec<f64> = parts.iter().map(|c| mean(c)).collect();
    let grand = means.iter().sum::<f64>() / m;
    let between = n / (m - 1.0) * means.iter().map(|v| (v - grand).powi(2)).sum::<f64>();
    let within = parts.iter().zip(&means).map(|(c, &mu)| variance(c, mu)).sum::<f64>() / m;
    // Relative to the magnitude of the draws, anything this small is rounding.
    let magnitude = grand.abs().max(1e-300);
    if within <= (1e-14 * magnitude).powi(2) {
        return Err(Error::Degenerate("draws have zero within-chain variance".into()));
    }
    Ok(Moments {
        n,
        means,
        within,
        var_plus: (n - 1.0) / n * within + between / n,
    })
}

/// Split-chain potential scale reduction from `[chain][iteration]` draws.
pub fn rhat_of(chains: &[Vec<f64>]) -> Result<f64> {
    check(chains)?;
    let mo = moments(&split(chains))?;
    Ok((mo.var_plus / mo.within).sqrt())
}

/// Effective sample size from `[chain][iteration]` draws (Geyer's initial
/// monotone sequence on split chains), capped at the number of draws.
pub fn ess_of(chains: &[Vec<f64>]) -> Result<f64> {
    check(chains)?;
    let parts = split(chains);
    let mo = moments(&parts)?;
    let n = parts[0].len();
    let m = parts.len() as f64;
    let total = m * mo.n;

    // Autocovariance at lag t averaged over split chains.
    let acov = |t: usize| -> f64 {
        parts
            .iter()
            .zip(&mo.means)
            .map(|(c, &mu)| {
                let s: f64 = (0..n - t).map(|i| (c[i] - mu) * (c[i + t] - mu)).sum();
                s / n as f64
            })
            .sum::<f64>()
            / m
    };
    let rho = |t: usize| 1.0 - (mo.within - acov(t)) / mo.var_plus;

    let mut sum_pairs = 0.0;
    let mut prev_pair = f64::INFINITY;
    let mut t = 0;
    while t + 1 < n {
        let pair = rho(t) + rho(t + 1);
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev_pair);
        sum_pairs += pair;
        prev_pair = pair;
        t += 2;
    }
    let tau = (-1.0 + 2.0 * sum_pairs).max(1.0 / total.log10().max(1.0));
    Ok((total / tau).min(total))
}

pub fn rhat(samples: &PosteriorSamples, parameter: &str) -> Result<f64> {
    rhat_of(&samples.chains_of(samples.param_index(parameter)?))
}

pub fn ess(samples: &PosteriorSamples, parameter: &str) -> Result<f64> {
    ess_of(&samples.chains_of(samples.param_index(parameter)?))
}
