//! Profile comparison (Spearman, normalized 1-Wasserstein), normalized Shannon
//! similarity and constant-plus-diagonal content fitting.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::MaskSpec;
use crate::stochastic_order::PositionDistribution;

pub const DEFAULT_BINS: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonResult {
    pub spearman: f64,
    pub wasserstein: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContentFit {
    pub u_hat: f64,
    pub delta_hat: f64,
    pub within_diag_similarity: f64,
    pub within_offdiag_similarity: f64,
    pub bins: usize,
}

fn check_pair(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            context: "profile lengths",
            expected: a,
            found: b,
        });
    }
    if a < 2 {
        return Err(Error::Undefined(format!("comparison needs n >= 2, got {a}")));
    }
    Ok(())
}

/// 1-based ranks with ties sharing their mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1..=end
        let mean = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = mean;
        }
        start = end;
    }
    ranks
}

/// Spearman correlation of two equal-length samples.
pub fn rank_correlation(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x.len(), y.len())?;
    if let Some(v) = x.iter().chain(y).find(|v| !v.is_finite()) {
        return Err(Error::Undefined(format!("non-finite value {v} in ranked sample")));
    }
    let rx = average_ranks(x);
    let ry = average_ranks(y);
    let mean = (x.len() + 1) as f64 / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        let (da, db) = (a - mean, b - mean);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined(
            "rank correlation of a constant profile".into(),
        ));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn spearman(pred: &PositionDistribution, meas: &PositionDistribution) -> Result<f64> {
    rank_correlation(pred.probs(), meas.probs())
}

/// `(1/(n-1)) sum_{k<n} |F(k) - G(k)|`.
pub fn wasserstein(pred: &PositionDistribution, meas: &PositionDistribution) -> Result<f64> {
    check_pair(pred.n(), meas.n())?;
    let n = pred.n();
    let (mut f, mut g, mut acc) = (0.0, 0.0, 0.0);
    for (p, q) in pred.probs()[..n - 1].iter().zip(&meas.probs()[..n - 1]) {
        f += p;
        g += q;
        acc += (f - g).abs();
    }
    Ok((acc / (n - 1) as f64).min(1.0))
}

pub fn compare(pred: &PositionDistribution, meas: &PositionDistribution) -> Result<ComparisonResult> {
    Ok(ComparisonResult {
        spearman: spearman(pred, meas)?,
        wasserstein: wasserstein(pred, meas)?,
        n: pred.n(),
    })
}

/// `1 - H(p) / ln B` for a histogram given by bin counts (or masses).
pub fn similarity_from_counts(counts: &[f64]) -> Result<f64> {
    if counts.len() < 2 {
        return Err(Error::OutOfRange {
            name: "bins",
            value: counts.len() as f64,
            range: "[2, inf)",
        });
    }
    let total: f64 = counts.iter().sum();
    if total.is_nan() || total <= 0.0 || counts.iter().any(|c| *c < 0.0) {
        return Err(Error::invariant("histogram needs nonnegative counts with positive total"));
    }
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let p = c / total;
            -p * p.ln()
        })
        .sum();
    Ok((1.0 - h / (counts.len() as f64).ln()).clamp(0.0, 1.0))
}

/// Equal-width histogram over `[min, max]` of `values`, then [`similarity_from_counts`].
/// A zero-width range is one occupied bin and gives 1.
pub fn shannon_similarity(values: &[f64], bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(Error::OutOfRange {
            name: "bins",
            value: bins as f64,
            range: "[2, inf)",
        });
    }
    if values.is_empty() {
        return Err(Error::invariant("shannon similarity of an empty sample"));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Undefined(format!("non-finite value {v} in histogram sample")));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return Ok(1.0);
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0.0; bins];
    for v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1.0;
    }
    similarity_from_counts(&counts)
}

/// Fit `logit_ij ~ u + delta 1{i=j}` on the admissible entries of one logit matrix.
pub fn fit_content(logits: &Array2<f64>, mask: MaskSpec, bins: usize) -> Result<ContentFit> {
    let n = mask.n();
    if logits.dim() != (n, n) {
        return Err(Error::DimensionMismatch {
            context: "logit matrix vs mask",
            expected: n,
            found: logits.nrows(),
        });
    }
    let mut diag = Vec::with_capacity(n);
    let mut off = Vec::new();
    for i in 1..=n {
        for j in mask.admissible(i) {
            let v = logits[[i - 1, j - 1]];
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: "admissible logits",
                    row: i,
                    col: j,
                });
            }
            if i == j {
                diag.push(v);
            } else {
                off.push(v);
            }
        }
    }
    if off.is_empty() {
        return Err(Error::Undefined(
            "no admissible off-diagonal entries to fit u".into(),
        ));
    }
    let u_hat = mean(&off);
    Ok(ContentFit {
        u_hat,
        delta_hat: mean(&diag) - u_hat,
        within_diag_similarity: shannon_similarity(&diag, bins)?,
        within_offdiag_similarity: shannon_similarity(&off, bins)?,
        bins,
    })
}

/// Fit every (layer, head) logit matrix and average all fields uniformly.
pub fn fit_content_many(matrices: &[Array2<f64>], mask: MaskSpec, bins: usize) -> Result<ContentFit> {
    if matrices.is_empty() {
        return Err(Error::invariant("no logit matrices to fit"));
    }
    let fits = matrices
        .iter()
        .map(|m| fit_content(m, mask, bins))
        .collect::<Result<Vec<_>>>()?;
    let avg = |f: fn(&ContentFit) -> f64| fits.iter().map(f).sum::<f64>() / fits.len() as f64;
    Ok(ContentFit {
        u_hat: avg(|c| c.u_hat),
        delta_hat: avg(|c| c.delta_hat),
        within_diag_similarity: avg(|c| c.within_diag_similarity),
        within_offdiag_similarity: avg(|c| c.within_offdiag_similarity),
        bins,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}
