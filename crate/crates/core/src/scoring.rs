//! Proper scoring of sampled predictive distributions.

use crate::error::{Error, Result};

/// Additive smoothing of the empirical predictive mass in [`log_score`].
pub const LOG_SCORE_EPSILON: f64 = 0.5;

fn non_empty(draws: &[u64]) -> Result<()> {
    if draws.is_empty() {
        Err(Error::Domain("scoring an empty sample".into()))
    } else {
        Ok(())
    }
}

/// Sample CRPS `mean|X - y| - mean|X - X'| / 2`, with the pair term over all
/// ordered pairs including self-pairs, via the sorted-draw identity.
pub fn crps(draws: &[u64], truth: u64) -> Result<f64> {
    non_empty(draws)?;
    let mut x: Vec<f64> = draws.iter().map(|&v| v as f64).collect();
    x.sort_by(f64::total_cmp);
    let s = x.len() as f64;
    let y = truth as f64;
    let abs_err = x.iter().map(|v| (v - y).abs()).sum::<f64>() / s;
    // sum_{i,j} |x_i - x_j| = 2 sum_i (2i - S - 1) x_(i), i from 1
    let spread: f64 = x.iter().enumerate().map(|(i, v)| (2.0 * (i as f64 + 1.0) - s - 1.0) * v).sum::<f64>() / (s * s);
    Ok((abs_err - spread).max(0.0))
}

/// `-log((#{x = y} + e) / (S + e K))`, `K` the number of integers in
/// `[min, max]` of the draws plus the truth when it falls outside.
pub fn log_score(draws: &[u64], truth: u64) -> Result<f64> {
    non_empty(draws)?;
    let lo = *draws.iter().min().expect("non-empty");
    let hi = *draws.iter().max().expect("non-empty");
    let mut k = (hi - lo + 1) as f64;
    if truth < lo || truth > hi {
        k += 1.0;
    }
    let hits = draws.iter().filter(|&&v| v == truth).count() as f64;
    let s = draws.len() as f64;
    Ok(-((hits + LOG_SCORE_EPSILON) / (s + LOG_SCORE_EPSILON * k)).ln())
}

pub fn rmse(medians: &[f64], truths: &[f64]) -> Result<f64> {
    if medians.len() != truths.len() {
        return Err(Error::Domain(format!(
            "{} medians for {} truths",
            medians.len(),
            truths.len()
        )));
    }
    if medians.is_empty() {
        return Err(Error::Domain("rmse of empty sequences".into()));
    }
    let mse = medians.iter().zip(truths).map(|(m, t)| (m - t).powi(2)).sum::<f64>() / medians.len() as f64;
    Ok(mse.sqrt())
}

/// Fraction of truths inside their closed interval.
pub fn coverage(intervals: &[(f64, f64)], truths: &[f64]) -> Result<f64> {
    if intervals.len() != truths.len() {
        return Err(Error::Domain(format!(
            "{} intervals for {} truths",
            intervals.len(),
            truths.len()
        )));
    }
    if intervals.is_empty() {
        return Err(Error::Domain("coverage of empty sequences".into()));
    }
    if let Some((lo, hi)) = intervals.iter().find(|(lo, hi)| !(lo <= hi)) {
        return Err(Error::Domain(format!("interval ({lo}, {hi}) has lo > hi")));
    }
    let inside = intervals.iter().zip(truths).filter(|((lo, hi), t)| lo <= *t && *t <= hi).count();
    Ok(inside as f64 / truths.len() as f64)
}
