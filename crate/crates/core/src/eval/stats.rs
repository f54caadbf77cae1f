//! Pearson correlation and the Wilcoxon signed-rank test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

/// Largest sample for which the signed-rank p-value is computed exactly.
pub const WILCOXON_EXACT_MAX_N: usize = 25;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("need at least {need} samples, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("zero variance")]
    ZeroVariance,
    #[error("all differences zero")]
    AllZero,
    #[error("non-finite input")]
    NonFinite,
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<(), StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::Length(x.len(), y.len()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    Ok(())
}

/// Product-moment correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    check_pair(x, y)?;
    let n = x.len();
    if n < 2 {
        return Err(StatsError::TooFew { need: 2, got: n });
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WilcoxonMethod {
    Exact,
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Pairs left after dropping zero differences.
    pub n: usize,
    /// Rank sum of positive differences `a - b`.
    pub w_plus: f64,
    pub w_minus: f64,
    /// `min(w_plus, w_minus)`.
    pub statistic: f64,
    /// Two-sided.
    pub p_value: f64,
    pub method: WilcoxonMethod,
}

/// Average ranks (1-based) of `values`, ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

struct SignedRanks {
    ranks: Vec<f64>,
    positive: Vec<bool>,
}

fn signed_ranks(a: &[f64], b: &[f64]) -> Result<SignedRanks, StatsError> {
    check_pair(a, b)?;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if d.is_empty() {
        return Err(StatsError::AllZero);
    }
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    Ok(SignedRanks {
        ranks: average_ranks(&abs),
        positive: d.iter().map(|v| *v > 0.0).collect(),
    })
}

/// Paired two-sided signed-rank test on `a - b`.
///
/// Zero differences are dropped and tied magnitudes get average ranks. Up to
/// [`WILCOXON_EXACT_MAX_N`] pairs the p-value comes from the exact distribution of
/// the positive rank sum over all sign assignments of the observed ranks; above it,
/// from the normal approximation with tie-corrected variance and continuity
/// correction.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult, StatsError> {
    let sr = signed_ranks(a, b)?;
    if sr.ranks.len() <= WILCOXON_EXACT_MAX_N {
        Ok(exact(&sr))
    } else {
        Ok(normal(&sr))
    }
}

/// Signed-rank test forced onto the normal approximation regardless of `n`.
pub fn wilcoxon_signed_rank_normal(a: &[f64], b: &[f64]) -> Result<WilcoxonResult, StatsError> {
    Ok(normal(&signed_ranks(a, b)?))
}

fn sums(sr: &SignedRanks) -> (f64, f64) {
    let w_plus: f64 = sr.ranks.iter().zip(&sr.positive).filter(|(_, p)| **p).map(|(r, _)| r).sum();
    let total = sr.ranks.len() as f64 * (sr.ranks.len() as f64 + 1.0) / 2.0;
    (w_plus, total - w_plus)
}

fn exact(sr: &SignedRanks) -> WilcoxonResult {
    let (w_plus, w_minus) = sums(sr);
    // Average ranks are multiples of 1/2, so doubled ranks are integers.
    let doubled: Vec<usize> = sr.ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0f64; max + 1];
    counts[0] = 1.0;
    for &r in &doubled {
        for s in (r..=max).rev() {
            counts[s] += counts[s - r];
        }
    }
    let total = 2f64.powi(doubled.len() as i32);
    let t = (w_plus * 2.0).round() as usize;
    let lower: f64 = counts[..=t].iter().sum::<f64>() / total;
    let upper: f64 = counts[t..].iter().sum::<f64>() / total;
    WilcoxonResult {
        n: sr.ranks.len(),
        w_plus,
        w_minus,
        statistic: w_plus.min(w_minus),
        p_value: (2.0 * lower.min(upper)).min(1.0),
        method: WilcoxonMethod::Exact,
    }
}

fn normal(sr: &SignedRanks) -> WilcoxonResult {
    let (w_plus, w_minus) = sums(sr);
    let n = sr.ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut ties = sr.ranks.clone();
    ties.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    for group in ties.chunk_by(|a, b| a == b) {
        let t = group.len() as f64;
        tie_term += t * t * t - t;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    let p_value = if var <= 0.0 {
        1.0
    } else {
        let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
        (2.0 * Normal::standard().sf(z)).min(1.0)
    };
    WilcoxonResult {
        n: sr.ranks.len(),
        w_plus,
        w_minus,
        statistic: w_plus.min(w_minus),
        p_value,
        method: WilcoxonMethod::Normal,
    }
}
