//! Infinite-depth behaviour of residual-aware rollouts: epsilon estimation,
//! the diagonal lower bound, the exponential off-diagonal envelope and a
//! collapse detector.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::AttentionKernel;
use crate::rollout::{accumulate, MixingSchedule, RolloutResult};

/// `P_n1 >= 1 - COLLAPSE_TOL` counts as collapse.
pub const COLLAPSE_TOL: f64 = 1e-3;
/// Slack on every bound comparison.
pub const BOUND_SLACK: f64 = 1e-12;
/// Default number of log-spaced checkpoints.
pub const DEFAULT_CHECKPOINTS: usize = 24;

/// Smallest admissible entry over all kernels.
pub fn estimate_epsilon(kernels: &[AttentionKernel]) -> Result<f64> {
    if kernels.is_empty() {
        return Err(Error::invariant("epsilon needs at least one kernel"));
    }
    let mut eps = f64::INFINITY;
    for (layer, k) in kernels.iter().enumerate() {
        let mask = k.mask();
        for i in 1..=mask.n() {
            for j in mask.admissible(i) {
                let a = k.get(i, j);
                if a == 0.0 {
                    return Err(Error::ZeroAdmissibleEntry {
                        layer: layer + 1,
                        row: i,
                        col: j,
                    });
                }
                eps = eps.min(a);
            }
        }
    }
    Ok(eps)
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon <= 1.0 {
        Ok(())
    } else {
        Err(Error::OutOfRange {
            name: "epsilon",
            value: epsilon,
            range: "(0, 1]",
        })
    }
}

/// `prod_t (1 - (1 - epsilon) lambda_t)`.
pub fn diag_lower_bound(schedule: &MixingSchedule, epsilon: f64) -> Result<f64> {
    Ok(*diag_lower_bound_series(schedule, epsilon)?
        .last()
        .expect("schedule depth is positive"))
}

/// The diagonal bound after each layer.
pub fn diag_lower_bound_series(schedule: &MixingSchedule, epsilon: f64) -> Result<Vec<f64>> {
    check_epsilon(epsilon)?;
    Ok(schedule
        .lambdas()
        .iter()
        .scan(1.0, |acc, l| {
            *acc *= 1.0 - (1.0 - epsilon) * l;
            Some(*acc)
        })
        .collect())
}

fn final_for<'a>(result: &'a RolloutResult, schedule: &MixingSchedule) -> Result<&'a Array2<f64>> {
    let p = result.final_matrix()?;
    if schedule.depth() != result.depth() {
        return Err(Error::DimensionMismatch {
            context: "schedule vs rollout depth",
            expected: result.depth(),
            found: schedule.depth(),
        });
    }
    Ok(p)
}

/// Per-position check of `P_ii >= prod_t (1 - (1 - epsilon) lambda_t) - 1e-12`.
pub fn check_noncollapse_bound(
    result: &RolloutResult,
    schedule: &MixingSchedule,
    epsilon: f64,
) -> Result<Vec<bool>> {
    let p = final_for(result, schedule)?;
    let bound = diag_lower_bound(schedule, epsilon)?;
    Ok(p.diag().iter().map(|&d| d >= bound - BOUND_SLACK).collect())
}

/// Outcome of the exponential envelope check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseCheck {
    /// `within[i-1][j-1]` for `1 < j <= i`; other entries are unchecked and `true`.
    pub within: Vec<Vec<bool>>,
    pub violations: usize,
    pub p_n1: f64,
    pub collapsed: bool,
}

impl CollapseCheck {
    pub fn all_within(&self) -> bool {
        self.violations == 0
    }
}

/// Checks `P_ij <= c_prime exp(-(j-1) epsilon sum_t lambda_t)` for `1 < j <= i`
/// and flags collapse when `P_n1 >= 1 - COLLAPSE_TOL`.
pub fn check_collapse_bound(
    result: &RolloutResult,
    schedule: &MixingSchedule,
    epsilon: f64,
    c_prime: f64,
) -> Result<CollapseCheck> {
    check_collapse_bound_with_tol(result, schedule, epsilon, c_prime, COLLAPSE_TOL)
}

pub fn check_collapse_bound_with_tol(
    result: &RolloutResult,
    schedule: &MixingSchedule,
    epsilon: f64,
    c_prime: f64,
    collapse_tol: f64,
) -> Result<CollapseCheck> {
    let p = final_for(result, schedule)?;
    check_epsilon(epsilon)?;
    if c_prime.is_nan() || c_prime < 1.0 {
        return Err(Error::OutOfRange {
            name: "c_prime",
            value: c_prime,
            range: "[1, inf)",
        });
    }
    let rate = epsilon * schedule.total();
    let n = p.nrows();
    let mut within = vec![vec![true; n]; n];
    let mut violations = 0;
    for i in 2..=n {
        for j in 2..=i {
            let bound = c_prime * (-((j - 1) as f64) * rate).exp();
            if p[[i - 1, j - 1]] > bound + BOUND_SLACK {
                within[i - 1][j - 1] = false;
                violations += 1;
            }
        }
    }
    let p_n1 = p[[n - 1, 0]];
    Ok(CollapseCheck {
        within,
        violations,
        p_n1,
        collapsed: p_n1 >= 1.0 - collapse_tol,
    })
}

/// Which entries enter a `C'` fit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnvelopeEntries {
    Diagonal,
    OffDiagonal,
    All,
}

/// Smallest `C' >= 1` making the envelope hold on the selected entries.
///
/// Computed in log space; may be `+inf` when the envelope decays faster than
/// an entry that stays bounded away from zero.
pub fn fit_c_prime(p: &Array2<f64>, epsilon: f64, cumulative_mixing: f64, entries: EnvelopeEntries) -> f64 {
    let rate = epsilon * cumulative_mixing;
    let n = p.nrows();
    let mut log_c: f64 = 0.0;
    for i in 2..=n {
        for j in 2..=i {
            let take = match entries {
                EnvelopeEntries::Diagonal => i == j,
                EnvelopeEntries::OffDiagonal => i != j,
                EnvelopeEntries::All => true,
            };
            let v = p[[i - 1, j - 1]];
            if take && v > 0.0 {
                log_c = log_c.max(v.ln() + (j - 1) as f64 * rate);
            }
        }
    }
    log_c.exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    NonCollapse,
    Collapse,
    Undetermined,
}

/// Parameters of `P_ij <= c_prime * exp(-(j - 1) * rate)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffDiagEnvelope {
    /// Fitted over strictly off-diagonal entries; `None` when no finite
    /// constant exists at this depth.
    pub c_prime: Option<f64>,
    /// Fitted over diagonal entries; the theory gives 1.
    pub c_prime_diag: Option<f64>,
    /// `epsilon * sum_t lambda_t`.
    pub rate: f64,
}

/// One checkpoint of the bound trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    #[serde(rename = "T")]
    pub depth: usize,
    pub sum_lambda: f64,
    pub bound: f64,
    pub observed_diag_min: f64,
    #[serde(rename = "P_n1")]
    pub p_n1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DichotomyReport {
    pub n: usize,
    pub depth: usize,
    pub epsilon: f64,
    pub cumulative_mixing: f64,
    pub diag_lower_bound: Vec<f64>,
    pub observed_diag: Vec<f64>,
    pub offdiag_upper_bound: OffDiagEnvelope,
    pub p_n1: f64,
    pub collapse_tol: f64,
    pub verdict: Verdict,
    pub checkpoints: Vec<BoundRow>,
}

impl DichotomyReport {
    pub fn collapsed(&self) -> bool {
        self.verdict == Verdict::Collapse
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DichotomyOptions {
    /// Number of log-spaced checkpoints; at least the depth means every layer.
    pub checkpoints: usize,
    pub collapse_tol: f64,
}

impl Default for DichotomyOptions {
    fn default() -> Self {
        Self {
            checkpoints: DEFAULT_CHECKPOINTS,
            collapse_tol: COLLAPSE_TOL,
        }
    }
}

/// Distinct depths `round(T^(k / (count - 1)))`, always containing 1 and `T`.
pub fn log_checkpoints(depth: usize, count: usize) -> Vec<usize> {
    if count >= depth {
        return (1..=depth).collect();
    }
    if count <= 1 {
        return vec![depth];
    }
    let ln_t = (depth as f64).ln();
    let mut out: Vec<usize> = (0..count)
        .map(|k| ((ln_t * k as f64 / (count - 1) as f64).exp().round() as usize).clamp(1, depth))
        .collect();
    out.push(depth);
    out.sort_unstable();
    out.dedup();
    out
}

/// Classify a final matrix.
///
/// Collapse when `P_n1 >= 1 - tol`. NonCollapse when every diagonal entry
/// clears the lower bound and the bound itself is at least `tol`, which
/// certifies `P_n1 <= 1 - tol`. Anything else is Undetermined.
pub fn verdict(p: &Array2<f64>, bound: f64, tol: f64) -> Verdict {
    let n = p.nrows();
    if p[[n - 1, 0]] >= 1.0 - tol {
        Verdict::Collapse
    } else if bound >= tol && p.diag().iter().all(|&d| d >= bound - BOUND_SLACK) {
        Verdict::NonCollapse
    } else {
        Verdict::Undetermined
    }
}

/// Full dichotomy analysis of a kernel stack under a schedule.
///
/// `kernels` holds one kernel per layer, or a single kernel reused at every layer.
pub fn run_dichotomy(
    kernels: &[AttentionKernel],
    schedule: &MixingSchedule,
    options: DichotomyOptions,
) -> Result<DichotomyReport> {
    let depth = schedule.depth();
    let stack: Vec<&AttentionKernel> = match kernels.len() {
        1 => vec![&kernels[0]; depth],
        l if l == depth => kernels.iter().collect(),
        l => {
            return Err(Error::DimensionMismatch {
                context: "kernels vs schedule",
                expected: depth,
                found: l,
            })
        }
    };
    let epsilon = estimate_epsilon(kernels)?;
    let bounds = diag_lower_bound_series(schedule, epsilon)?;
    let sums = schedule.cumulative();
    let marks = log_checkpoints(depth, options.checkpoints);

    let mut rows = Vec::with_capacity(marks.len());
    let mut next = 0;
    let p = accumulate(&stack, schedule.lambdas(), |t, p| {
        if marks.get(next) == Some(&t) {
            next += 1;
            rows.push(BoundRow {
                depth: t,
                sum_lambda: sums[t - 1],
                bound: bounds[t - 1],
                observed_diag_min: p.diag().iter().copied().fold(f64::INFINITY, f64::min),
                p_n1: p[[p.nrows() - 1, 0]],
            });
        }
        Ok(())
    })?;

    let n = p.nrows();
    let cumulative_mixing = schedule.total();
    let bound = bounds[depth - 1];
    Ok(DichotomyReport {
        n,
        depth,
        epsilon,
        cumulative_mixing,
        diag_lower_bound: vec![bound; n],
        observed_diag: p.diag().to_vec(),
        offdiag_upper_bound: OffDiagEnvelope {
            c_prime: finite(fit_c_prime(&p, epsilon, cumulative_mixing, EnvelopeEntries::OffDiagonal)),
            c_prime_diag: finite(fit_c_prime(&p, epsilon, cumulative_mixing, EnvelopeEntries::Diagonal)),
            rate: epsilon * cumulative_mixing,
        },
        p_n1: p[[n - 1, 0]],
        collapse_tol: options.collapse_tol,
        verdict: verdict(&p, bound, options.collapse_tol),
        checkpoints: rows,
    })
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// [`run_dichotomy`] for several schedules at once.
pub fn run_dichotomy_many(
    kernels: &[AttentionKernel],
    schedules: &[MixingSchedule],
    options: DichotomyOptions,
) -> Result<Vec<DichotomyReport>> {
    schedules
        .par_iter()
        .map(|s| run_dichotomy(kernels, s, options))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{layer_kernel, uniform_kernel, ContentModel, LayerLogitModel, MaskSpec};
    use crate::rollout::{rollout_kernels, RolloutOptions};
    use approx::assert_abs_diff_eq;

    fn causal(n: usize) -> MaskSpec {
        MaskSpec::causal(n).unwrap()
    }

    fn full_run(n: usize, schedule: &MixingSchedule) -> RolloutResult {
        let kernels = vec![uniform_kernel(causal(n)); schedule.depth()];
        rollout_kernels(&kernels, schedule, RolloutOptions::full()).unwrap()
    }

    #[test]
    fn epsilon_examples() {
        assert_eq!(estimate_epsilon(&[uniform_kernel(causal(4))]).unwrap(), 0.25);
        let k = layer_kernel(
            &LayerLogitModel::alibi(vec![1.0], ContentModel::zero()).unwrap(),
            causal(3),
        )
        .unwrap();
        let e = (-2.0f64).exp();
        let want = e / (e + (-1.0f64).exp() + 1.0);
        assert_abs_diff_eq!(estimate_epsilon(std::slice::from_ref(&k)).unwrap(), want, epsilon = 1e-15);
        assert_abs_diff_eq!(want, 0.0900, epsilon = 1e-4);
        assert_eq!(
            estimate_epsilon(&[k.clone(), k.clone(), k]).unwrap(),
            want
        );
        assert!(estimate_epsilon(&[]).is_err());
    }

    #[test]
    fn epsilon_rejects_zero_admissible_entry() {
        let mask = causal(2);
        let k = AttentionKernel::new(ndarray::array![[1.0, 0.0], [1.0, 0.0]], mask).unwrap();
        match estimate_epsilon(&[uniform_kernel(mask), k]) {
            Err(Error::ZeroAdmissibleEntry { layer, row, col }) => {
                assert_eq!((layer, row, col), (2, 2, 2))
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn zero_schedule_bounds() {
        let s = MixingSchedule::constant(5, 0.0).unwrap();
        let res = full_run(4, &s);
        assert_eq!(diag_lower_bound(&s, 0.25).unwrap(), 1.0);
        assert!(check_noncollapse_bound(&res, &s, 0.25).unwrap().iter().all(|&b| b));
        let c = check_collapse_bound(&res, &s, 0.25, 1.0).unwrap();
        assert!(c.all_within());
        assert!(!c.collapsed);
    }

    #[test]
    fn unit_schedule_bound_is_eps_power() {
        let s = MixingSchedule::constant(6, 1.0).unwrap();
        assert_abs_diff_eq!(diag_lower_bound(&s, 0.25).unwrap(), 0.25f64.powi(6), epsilon = 1e-18);
        let res = full_run(4, &s);
        assert!(check_noncollapse_bound(&res, &s, 0.25).unwrap().iter().all(|&b| b));
    }

    #[test]
    fn geometric_schedule_keeps_diagonal() {
        let s = MixingSchedule::geometric(40, 0.5).unwrap();
        let res = full_run(8, &s);
        let ok = check_noncollapse_bound(&res, &s, 0.125).unwrap();
        assert!(ok.iter().all(|&b| b));
        assert!(diag_lower_bound(&s, 0.125).unwrap() > 0.1);
    }

    #[test]
    fn constant_one_collapses() {
        let s = MixingSchedule::constant(200, 1.0).unwrap();
        let res = full_run(8, &s);
        let c = check_collapse_bound(&res, &s, 0.125, 1.0).unwrap();
        assert!(c.collapsed);
        assert!(c.p_n1 >= 0.999);
        for j in 2..=8 {
            assert!(c.within[j - 1][j - 1]);
        }
    }

    #[test]
    fn harmonic_schedule_long_horizon() {
        // Divergent but slowly: the flag has not fired by T = 10^4 at n = 8.
        let s = MixingSchedule::harmonic(10_000).unwrap();
        let rep = run_dichotomy(&[uniform_kernel(causal(8))], &s, DichotomyOptions::default()).unwrap();
        assert_abs_diff_eq!(rep.p_n1, 0.9711577237014825, epsilon = 1e-9);
        assert_eq!(rep.verdict, Verdict::Undetermined);
        assert!(rep.checkpoints.windows(2).all(|w| w[1].p_n1 >= w[0].p_n1));
    }

    #[test]
    fn bad_parameters() {
        let s = MixingSchedule::constant(3, 0.5).unwrap();
        let res = full_run(3, &s);
        assert!(check_collapse_bound(&res, &s, 0.3, 0.5).is_err());
        assert!(check_noncollapse_bound(&res, &s, 0.0).is_err());
        let lean = rollout_kernels(&vec![uniform_kernel(causal(3)); 3], &s, RolloutOptions::default()).unwrap();
        assert!(matches!(
            check_noncollapse_bound(&lean, &s, 0.3),
            Err(Error::MissingFullMatrix)
        ));
        let short = MixingSchedule::constant(2, 0.5).unwrap();
        assert!(check_noncollapse_bound(&res, &short, 0.3).is_err());
    }

    #[test]
    fn checkpoints_are_log_spaced() {
        assert_eq!(log_checkpoints(5, 10), vec![1, 2, 3, 4, 5]);
        let c = log_checkpoints(10_000, 5);
        assert_eq!(c, vec![1, 10, 100, 1000, 10_000]);
        assert_eq!(log_checkpoints(7, 1), vec![7]);
    }

    #[test]
    fn dichotomy_report_verdicts() {
        let k = [uniform_kernel(causal(8))];
        let many = run_dichotomy_many(
            &k,
            &[
                MixingSchedule::constant(200, 1.0).unwrap(),
                MixingSchedule::geometric(60, 0.5).unwrap(),
            ],
            DichotomyOptions::default(),
        )
        .unwrap();
        assert_eq!(many[0].verdict, Verdict::Collapse);
        assert_eq!(many[1].verdict, Verdict::NonCollapse);
        assert!(many[0].offdiag_upper_bound.c_prime_diag.unwrap() <= 1.0 + 1e-12);
        assert_eq!(many[1].checkpoints.last().unwrap().depth, 60);
    }
}
