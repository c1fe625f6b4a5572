//! Prefix-mass algebra and first-order stochastic dominance on positions.
//!
//! Convention: `mu` dominates `nu` when every prefix mass of `mu` is at most
//! the matching prefix mass of `nu`, i.e. `mu` sits on more recent positions.

use ndarray::{Array1, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Kernel;

/// Default gap above which a prefix-mass inversion counts as a violation.
pub const MONOTONE_TOL: f64 = 1e-9;

const NEG_CLAMP: f64 = -1e-15;
const SUM_TOL: f64 = 1e-9;

#[derive(Deserialize)]
struct RawDistribution {
    n: usize,
    probs: Vec<f64>,
}

/// Probability vector over positions `1..=n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDistribution")]
pub struct PositionDistribution {
    n: usize,
    probs: Vec<f64>,
}

impl TryFrom<RawDistribution> for PositionDistribution {
    type Error = Error;

    fn try_from(raw: RawDistribution) -> Result<Self> {
        if raw.n != raw.probs.len() {
            return Err(Error::DimensionMismatch {
                context: "distribution length",
                expected: raw.n,
                found: raw.probs.len(),
            });
        }
        Self::new(raw.probs)
    }
}

impl PositionDistribution {
    /// Validates and clamps tiny negative round-off to zero.
    pub fn new(mut probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invariant("distribution must have at least one position"));
        }
        for (j, p) in probs.iter_mut().enumerate() {
            if !p.is_finite() {
                return Err(Error::NonFinite {
                    context: "distribution",
                    row: 1,
                    col: j + 1,
                });
            }
            if *p < NEG_CLAMP {
                return Err(Error::invariant(format!(
                    "probability at position {} is negative ({p})",
                    j + 1
                )));
            }
            if *p < 0.0 {
                *p = 0.0;
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOL {
            return Err(Error::invariant(format!(
                "probabilities sum to {sum}, expected 1 within {SUM_TOL:e}"
            )));
        }
        Ok(Self {
            n: probs.len(),
            probs,
        })
    }

    /// Divide by the total first; used for raw influence scores.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let sum: f64 = values.iter().sum();
        if !(sum.is_finite() && sum > 0.0) {
            return Err(Error::Undefined(format!(
                "cannot normalize values with total {sum}"
            )));
        }
        Self::new(values.into_iter().map(|v| v / sum).collect())
    }

    /// Point mass at 1-indexed position `j`.
    pub fn point_mass(n: usize, j: usize) -> Result<Self> {
        if j == 0 || j > n {
            return Err(Error::IndexOutOfRange {
                name: "position",
                value: j,
                max: n,
            });
        }
        let mut probs = vec![0.0; n];
        probs[j - 1] = 1.0;
        Ok(Self { n, probs })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        Self::new(vec![1.0 / n as f64; n])
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Probability of 1-indexed position `j`.
    pub fn get(&self, j: usize) -> f64 {
        self.probs[j - 1]
    }

    /// All prefix masses `F(1), ..., F(n)`.
    pub fn prefix_masses(&self) -> Vec<f64> {
        self.probs
            .iter()
            .scan(0.0, |acc, p| {
                *acc += p;
                Some(*acc)
            })
            .collect()
    }

    pub fn into_probs(self) -> Vec<f64> {
        self.probs
    }
}

/// `sum_{j <= k} d(j)` for 1-indexed cutoff `k`.
pub fn prefix_mass(d: &PositionDistribution, k: usize) -> Result<f64> {
    if k == 0 || k > d.n {
        return Err(Error::IndexOutOfRange {
            name: "cutoff",
            value: k,
            max: d.n,
        });
    }
    Ok(d.probs[..k].iter().sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dominance {
    MuDominates,
    NuDominates,
    Equal,
    Incomparable,
}

pub fn fosd_compare(
    mu: &PositionDistribution,
    nu: &PositionDistribution,
    tol: f64,
) -> Result<Dominance> {
    if mu.n != nu.n {
        return Err(Error::DimensionMismatch {
            context: "fosd_compare",
            expected: mu.n,
            found: nu.n,
        });
    }
    let (fm, fn_) = (mu.prefix_masses(), nu.prefix_masses());
    let mut mu_below = false;
    let mut nu_below = false;
    for (a, b) in fm.iter().zip(&fn_) {
        if a < &(b - tol) {
            mu_below = true;
        } else if b < &(a - tol) {
            nu_below = true;
        }
    }
    Ok(match (mu_below, nu_below) {
        (false, false) => Dominance::Equal,
        (true, false) => Dominance::MuDominates,
        (false, true) => Dominance::NuDominates,
        (true, true) => Dominance::Incomparable,
    })
}

/// Violation statistics for the row-wise prefix-mass ordering of a kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityReport {
    pub total_triples: u64,
    pub violations: u64,
    pub violation_fraction: f64,
    /// Mean gap over violating triples; zero when there are none.
    pub mean_conditional_gap: f64,
    pub max_gap: f64,
}

impl MonotonicityReport {
    pub fn is_monotone(&self) -> bool {
        self.violations == 0
    }
}

#[derive(Default)]
struct GapStats {
    violations: u64,
    gap_sum: f64,
    max_gap: f64,
}

impl GapStats {
    fn merge(mut self, other: Self) -> Self {
        self.violations += other.violations;
        self.gap_sum += other.gap_sum;
        self.max_gap = self.max_gap.max(other.max_gap);
        self
    }
}

/// Enumerates every `(i < i', k)` and measures `max(0, F_{i'}(k) - F_i(k))`.
///
/// O(n^2) memory for the prefix table and O(n^3) time; cutoffs are split
/// across the rayon pool.
pub fn check_stoch_monotone<K: Kernel + ?Sized>(kernel: &K, tol: f64) -> Result<MonotonicityReport> {
    let m = kernel.matrix();
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: "square kernel",
            expected: n,
            found: m.ncols(),
        });
    }
    // prefix[k][i]: mass of row i on the first k+1 keys, stored by cutoff so
    // each worker reads one contiguous column of prefix masses.
    let mut prefix = vec![vec![0.0; n]; n];
    for (i, row) in m.outer_iter().enumerate() {
        let mut acc = 0.0;
        for (k, v) in row.iter().enumerate() {
            acc += v;
            prefix[k][i] = acc;
        }
    }
    let stats = prefix
        .par_iter()
        .map(|col| {
            let mut s = GapStats::default();
            for i in 0..n {
                let fi = col[i];
                for &fj in &col[i + 1..] {
                    let gap = fj - fi;
                    if gap > 0.0 {
                        s.max_gap = s.max_gap.max(gap);
                        if gap > tol {
                            s.violations += 1;
                            s.gap_sum += gap;
                        }
                    }
                }
            }
            s
        })
        .reduce(GapStats::default, GapStats::merge);

    let total = (n as u64) * (n as u64) * (n as u64 - 1) / 2;
    Ok(MonotonicityReport {
        total_triples: total,
        violations: stats.violations,
        violation_fraction: if total == 0 {
            0.0
        } else {
            stats.violations as f64 / total as f64
        },
        mean_conditional_gap: if stats.violations == 0 {
            0.0
        } else {
            stats.gap_sum / stats.violations as f64
        },
        max_gap: stats.max_gap,
    })
}

/// Pushforward `d K` of a row distribution through a kernel.
pub fn apply_kernel<K: Kernel + ?Sized>(
    d: &PositionDistribution,
    kernel: &K,
) -> Result<PositionDistribution> {
    let m = kernel.matrix();
    if m.nrows() != d.n || m.ncols() != d.n {
        return Err(Error::DimensionMismatch {
            context: "apply_kernel",
            expected: d.n,
            found: m.nrows(),
        });
    }
    let out = ArrayView1::from(&d.probs).dot(m);
    PositionDistribution::new(out.to_vec())
}

/// `K v` for a column vector `v`.
pub fn kernel_times_vector<K: Kernel + ?Sized>(kernel: &K, v: &[f64]) -> Result<Vec<f64>> {
    let m = kernel.matrix();
    if m.ncols() != v.len() {
        return Err(Error::DimensionMismatch {
            context: "kernel_times_vector",
            expected: m.ncols(),
            found: v.len(),
        });
    }
    Ok(m.dot(&Array1::from(v.to_vec())).to_vec())
}

/// True when `v` never increases by more than `tol` from one index to the next.
pub fn is_nonincreasing(v: &[f64], tol: f64) -> bool {
    v.windows(2).all(|w| w[1] <= w[0] + tol)
}
