//! Residual-aware rollout `P^(T) = R^(T) ... R^(1)` with `R = (1 - lambda) I + lambda A`.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kernels::{layer_kernel, AttentionKernel, ContentModel, Kernel, LayerLogitModel, MaskSpec};
use crate::stochastic_order::{prefix_mass, PositionDistribution};

/// Row drift that triggers renormalization of accumulated products.
pub const RENORM_TOL: f64 = 1e-12;
/// Row-sum tolerance checked on every accumulated product.
pub const PRODUCT_TOL: f64 = 1e-9;
/// Slack allowed when testing prefix-mass series for monotonicity.
pub const DRIFT_TOL: f64 = 1e-12;

/// Per-layer residual mixing coefficients, each in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct MixingSchedule {
    lambdas: Vec<f64>,
}

impl TryFrom<Vec<f64>> for MixingSchedule {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<MixingSchedule> for Vec<f64> {
    fn from(s: MixingSchedule) -> Self {
        s.lambdas
    }
}

impl MixingSchedule {
    pub fn new(lambdas: Vec<f64>) -> Result<Self> {
        if lambdas.is_empty() {
            return Err(Error::invariant("schedule depth must be positive"));
        }
        if let Some(&l) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return Err(Error::OutOfRange {
                name: "lambda",
                value: l,
                range: "[0, 1]",
            });
        }
        Ok(Self { lambdas })
    }

    pub fn constant(depth: usize, lambda: f64) -> Result<Self> {
        Self::new(vec![lambda; depth])
    }

    /// `lambda_t = 1 / t`.
    pub fn harmonic(depth: usize) -> Result<Self> {
        Self::new((1..=depth).map(|t| 1.0 / t as f64).collect())
    }

    /// `lambda_t = ratio^t`.
    pub fn geometric(depth: usize, ratio: f64) -> Result<Self> {
        Self::new((1..=depth).map(|t| ratio.powi(t as i32)).collect())
    }

    /// Linear interpolation from `start` at layer 1 to `end` at layer `depth`.
    pub fn linear(depth: usize, start: f64, end: f64) -> Result<Self> {
        if depth == 1 {
            return Self::new(vec![start]);
        }
        let step = (end - start) / (depth - 1) as f64;
        Self::new((0..depth).map(|t| start + step * t as f64).collect())
    }

    pub fn depth(&self) -> usize {
        self.lambdas.len()
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    /// `sum_{t <= T} lambda_t` over the whole schedule.
    pub fn total(&self) -> f64 {
        self.lambdas.iter().sum()
    }

    /// Running sums `sum_{s <= t} lambda_s` for `t = 1..=T`.
    pub fn cumulative(&self) -> Vec<f64> {
        self.lambdas
            .iter()
            .scan(0.0, |acc, l| {
                *acc += l;
                Some(*acc)
            })
            .collect()
    }

    /// Pointwise `self <= other`.
    pub fn dominated_by(&self, other: &Self) -> bool {
        self.depth() == other.depth()
            && self.lambdas.iter().zip(&other.lambdas).all(|(a, b)| a <= b)
    }

    /// First `depth` layers.
    pub fn truncated(&self, depth: usize) -> Result<Self> {
        Self::new(self.lambdas[..depth.min(self.depth())].to_vec())
    }
}

/// The three controlled experiment variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// `lambda_t = 1`, no content.
    #[serde(rename = "a")]
    AttentionOnly,
    /// Supplied schedule, no content.
    #[serde(rename = "b")]
    ResidualAware,
    /// Supplied schedule and constant-plus-diagonal content.
    #[serde(rename = "c")]
    ResidualAwareWithContent,
}

impl Variant {
    pub const ALL: [Variant; 3] = [
        Variant::AttentionOnly,
        Variant::ResidualAware,
        Variant::ResidualAwareWithContent,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Variant::AttentionOnly => "a",
            Variant::ResidualAware => "b",
            Variant::ResidualAwareWithContent => "c",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(Variant::AttentionOnly),
            "b" => Ok(Variant::ResidualAware),
            "c" => Ok(Variant::ResidualAwareWithContent),
            other => Err(Error::Malformed(format!("unknown variant {other:?}"))),
        }
    }
}

/// Layers, schedule, mask and the variant that decides which of them apply.
///
/// The supplied layers and schedule are kept as given; `layer` and
/// `schedule` return the variant-adjusted view used by the rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutConfig {
    mask: MaskSpec,
    layers: Vec<LayerLogitModel>,
    schedule: MixingSchedule,
    variant: Variant,
}

#[derive(Serialize)]
struct DigestView<'a> {
    n: usize,
    mask: crate::kernels::MaskKind,
    layers: Vec<LayerLogitModel>,
    schedule: &'a [f64],
    variant: Variant,
}

impl RolloutConfig {
    pub fn new(
        mask: MaskSpec,
        layers: Vec<LayerLogitModel>,
        schedule: MixingSchedule,
        variant: Variant,
    ) -> Result<Self> {
        if layers.len() != schedule.depth() {
            return Err(Error::DimensionMismatch {
                context: "layers vs schedule",
                expected: schedule.depth(),
                found: layers.len(),
            });
        }
        Ok(Self {
            mask,
            layers,
            schedule,
            variant,
        })
    }

    /// One layer model repeated over the schedule's depth.
    pub fn homogeneous(
        mask: MaskSpec,
        layer: LayerLogitModel,
        schedule: MixingSchedule,
        variant: Variant,
    ) -> Result<Self> {
        let layers = vec![layer; schedule.depth()];
        Self::new(mask, layers, schedule, variant)
    }

    pub fn with_variant(&self, variant: Variant) -> Self {
        Self {
            variant,
            ..self.clone()
        }
    }

    pub fn with_schedule(&self, schedule: MixingSchedule) -> Result<Self> {
        Self::new(self.mask, self.layers.clone(), schedule, self.variant)
    }

    pub fn mask(&self) -> MaskSpec {
        self.mask
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    /// Layers as supplied, before the variant is applied.
    pub fn raw_layers(&self) -> &[LayerLogitModel] {
        &self.layers
    }

    pub fn raw_schedule(&self) -> &MixingSchedule {
        &self.schedule
    }

    /// Variant-adjusted model of 0-indexed layer `t`.
    pub fn layer(&self, t: usize) -> LayerLogitModel {
        match self.variant {
            Variant::ResidualAwareWithContent => self.layers[t].clone(),
            _ => self.layers[t].with_content(ContentModel::zero()),
        }
    }

    /// Variant-adjusted schedule.
    pub fn schedule(&self) -> MixingSchedule {
        match self.variant {
            Variant::AttentionOnly => MixingSchedule {
                lambdas: vec![1.0; self.depth()],
            },
            _ => self.schedule.clone(),
        }
    }

    /// Short content hash of the variant-adjusted configuration.
    pub fn digest(&self) -> String {
        let view = DigestView {
            n: self.mask.n(),
            mask: self.mask.kind(),
            layers: (0..self.depth()).map(|t| self.layer(t)).collect(),
            schedule: &self.schedule().lambdas,
            variant: self.variant,
        };
        let bytes = serde_json::to_vec(&view).expect("config view serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }

    /// Build the per-layer kernels, reusing the previous one for repeated layers.
    pub fn kernels(&self) -> Result<Vec<AttentionKernel>> {
        let mut out: Vec<AttentionKernel> = Vec::with_capacity(self.depth());
        let mut prev: Option<LayerLogitModel> = None;
        for t in 0..self.depth() {
            let model = self.layer(t);
            match (&prev, out.last()) {
                (Some(p), Some(k)) if *p == model => {
                    let k = k.clone();
                    out.push(k);
                }
                _ => out.push(layer_kernel(&model, self.mask)?),
            }
            prev = Some(model);
        }
        Ok(out)
    }
}

/// Residual-aware transition matrix `(1 - lambda) I + lambda A`.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    matrix: Array2<f64>,
}

impl Kernel for Transition {
    fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }
}

impl Transition {
    pub fn into_matrix(self) -> Array2<f64> {
        self.matrix
    }
}

pub fn residual_step<K: Kernel + ?Sized>(kernel: &K, lambda: f64) -> Result<Transition> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::OutOfRange {
            name: "lambda",
            value: lambda,
            range: "[0, 1]",
        });
    }
    let a = kernel.matrix();
    let mut matrix = a * lambda;
    for i in 0..a.nrows() {
        matrix[[i, i]] += 1.0 - lambda;
    }
    Ok(Transition { matrix })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RolloutOptions {
    /// Keep the full `P^(T)`; otherwise only last rows are returned.
    pub full_matrix: bool,
}

impl RolloutOptions {
    pub fn full() -> Self {
        Self { full_matrix: true }
    }
}

#[derive(Clone, Debug)]
pub struct RolloutResult {
    final_matrix: Option<Array2<f64>>,
    trajectory: Vec<PositionDistribution>,
    config_digest: String,
}

impl RolloutResult {
    /// Reassemble a result, checking that the final matrix (if any) ends in the
    /// trajectory's last row.
    pub fn from_parts(
        final_matrix: Option<Array2<f64>>,
        trajectory: Vec<PositionDistribution>,
        config_digest: String,
    ) -> Result<Self> {
        let last = trajectory
            .last()
            .ok_or_else(|| Error::invariant("trajectory must have at least one layer"))?;
        let n = last.n();
        if let Some(d) = trajectory.iter().find(|d| d.n() != n) {
            return Err(Error::DimensionMismatch {
                context: "trajectory rows",
                expected: n,
                found: d.n(),
            });
        }
        if let Some(p) = &final_matrix {
            if p.dim() != (n, n) {
                return Err(Error::DimensionMismatch {
                    context: "final matrix",
                    expected: n,
                    found: p.nrows(),
                });
            }
            let drift = p
                .row(n - 1)
                .iter()
                .zip(last.probs())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if drift > PRODUCT_TOL {
                return Err(Error::invariant(
                    "final matrix last row disagrees with trajectory",
                ));
            }
        }
        Ok(Self {
            final_matrix,
            trajectory,
            config_digest,
        })
    }

    pub fn final_matrix(&self) -> Result<&Array2<f64>> {
        self.final_matrix.as_ref().ok_or(Error::MissingFullMatrix)
    }

    pub fn has_final_matrix(&self) -> bool {
        self.final_matrix.is_some()
    }

    /// `p^(t)` for `t = 1..=T`, stored at index `t - 1`.
    pub fn trajectory(&self) -> &[PositionDistribution] {
        &self.trajectory
    }

    /// `p^(T)`.
    pub fn last_row(&self) -> &PositionDistribution {
        self.trajectory.last().expect("depth is positive")
    }

    pub fn depth(&self) -> usize {
        self.trajectory.len()
    }

    pub fn n(&self) -> usize {
        self.last_row().n()
    }

    pub fn config_digest(&self) -> &str {
        &self.config_digest
    }
}

pub fn run_rollout(config: &RolloutConfig, options: RolloutOptions) -> Result<RolloutResult> {
    let kernels = config.kernels()?;
    let mut result = rollout_kernels(&kernels, &config.schedule(), options)?;
    result.config_digest = config.digest();
    Ok(result)
}

/// Rollout over explicit per-layer kernels.
///
/// Identical kernels make every `R^(t)` a polynomial in the same matrix, so
/// the factors commute and a single forward pass over the last row yields the
/// whole trajectory in O(T n^2). Otherwise the cheaper of full accumulation
/// (O(T n^3)) and per-depth backward propagation (O(T^2 n^2)) is used.
pub fn rollout_kernels<K: Kernel>(
    kernels: &[K],
    schedule: &MixingSchedule,
    options: RolloutOptions,
) -> Result<RolloutResult> {
    let n = check_stack(kernels, schedule)?;
    let lambdas = schedule.lambdas();
    let depth = lambdas.len();
    let config_digest = kernel_digest(kernels, lambdas);

    let homogeneous = kernels.windows(2).all(|w| w[0].matrix() == w[1].matrix());
    if options.full_matrix || (!homogeneous && n < depth) {
        let (p, trajectory) = accumulate_full(kernels, lambdas)?;
        return Ok(RolloutResult {
            final_matrix: options.full_matrix.then_some(p),
            trajectory,
            config_digest,
        });
    }

    let trajectory = if homogeneous {
        let a = kernels[0].matrix();
        let mut row = unit_row(n);
        let mut out = Vec::with_capacity(depth);
        for &lambda in lambdas {
            row = mix_row(&row, a, lambda);
            out.push(to_distribution(&row)?);
        }
        out
    } else {
        (1..=depth)
            .map(|t| last_row_at(&kernels[..t], &lambdas[..t]))
            .collect::<Result<Vec<_>>>()?
    };
    Ok(RolloutResult {
        final_matrix: None,
        trajectory,
        config_digest,
    })
}

/// `e_n^T R^(T) ... R^(1)` by right-multiplying the row from the last layer down.
pub fn final_last_row<K: Kernel>(kernels: &[K], schedule: &MixingSchedule) -> Result<PositionDistribution> {
    check_stack(kernels, schedule)?;
    last_row_at(kernels, schedule.lambdas())
}

fn check_stack<K: Kernel>(kernels: &[K], schedule: &MixingSchedule) -> Result<usize> {
    if kernels.len() != schedule.depth() {
        return Err(Error::DimensionMismatch {
            context: "kernels vs schedule",
            expected: schedule.depth(),
            found: kernels.len(),
        });
    }
    let n = kernels[0].n();
    for k in kernels {
        let m = k.matrix();
        if m.nrows() != n || m.ncols() != n {
            return Err(Error::DimensionMismatch {
                context: "kernel stack",
                expected: n,
                found: m.nrows(),
            });
        }
    }
    Ok(n)
}

fn unit_row(n: usize) -> Array1<f64> {
    let mut row = Array1::zeros(n);
    row[n - 1] = 1.0;
    row
}

/// `row ((1 - lambda) I + lambda A)`, renormalized.
fn mix_row(row: &Array1<f64>, a: &Array2<f64>, lambda: f64) -> Array1<f64> {
    let mut out = row.dot(a) * lambda;
    out.scaled_add(1.0 - lambda, row);
    let sum = out.sum();
    out / sum
}

fn last_row_at<K: Kernel>(kernels: &[K], lambdas: &[f64]) -> Result<PositionDistribution> {
    let n = kernels[0].n();
    let mut row = unit_row(n);
    for (k, &lambda) in kernels.iter().zip(lambdas).rev() {
        row = mix_row(&row, k.matrix(), lambda);
    }
    to_distribution(&row)
}

fn to_distribution(row: &Array1<f64>) -> Result<PositionDistribution> {
    PositionDistribution::new(row.to_vec())
}

fn accumulate_full<K: Kernel>(
    kernels: &[K],
    lambdas: &[f64],
) -> Result<(Array2<f64>, Vec<PositionDistribution>)> {
    let n = kernels[0].n();
    let mut trajectory = Vec::with_capacity(lambdas.len());
    let p = accumulate(kernels, lambdas, |_, p| {
        trajectory.push(PositionDistribution::new(p.row(n - 1).to_vec())?);
        Ok(())
    })?;
    Ok((p, trajectory))
}

/// Accumulate `P^(t) = R^(t) P^(t-1)`, calling `visit(t, P^(t))` after every layer.
pub(crate) fn accumulate<K, F>(kernels: &[K], lambdas: &[f64], mut visit: F) -> Result<Array2<f64>>
where
    K: Kernel,
    F: FnMut(usize, &Array2<f64>) -> Result<()>,
{
    let n = kernels[0].n();
    let mut p: Array2<f64> = Array2::eye(n);
    for (t, (k, &lambda)) in kernels.iter().zip(lambdas).enumerate() {
        let mut next = k.matrix().dot(&p) * lambda;
        next.scaled_add(1.0 - lambda, &p);
        for mut row in next.rows_mut() {
            let sum = row.sum();
            if (sum - 1.0).abs() > PRODUCT_TOL {
                return Err(Error::invariant(format!(
                    "rollout product row sums to {sum} at depth {}",
                    t + 1
                )));
            }
            if (sum - 1.0).abs() > RENORM_TOL {
                row /= sum;
            }
        }
        p = next;
        visit(t + 1, &p)?;
    }
    Ok(p)
}

fn kernel_digest<K: Kernel>(kernels: &[K], lambdas: &[f64]) -> String {
    let mut h = Sha256::new();
    for k in kernels {
        for v in k.matrix().iter() {
            h.update(v.to_le_bytes());
        }
    }
    for l in lambdas {
        h.update(l.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

/// Prefix-mass series `sum_{j <= k} p^(t)(j)` over depth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub cutoff: usize,
    pub series: Vec<f64>,
    /// Series never decreases by more than [`DRIFT_TOL`].
    pub nondecreasing: bool,
}

pub fn drift_report(trajectory: &[PositionDistribution], k: usize) -> Result<DriftReport> {
    let first = trajectory
        .first()
        .ok_or_else(|| Error::invariant("empty trajectory"))?;
    let n = first.n();
    if k == 0 || k >= n {
        return Err(Error::IndexOutOfRange {
            name: "cutoff",
            value: k,
            max: n.saturating_sub(1),
        });
    }
    let series = trajectory
        .iter()
        .map(|d| prefix_mass(d, k))
        .collect::<Result<Vec<_>>>()?;
    let nondecreasing = series.windows(2).all(|w| w[1] >= w[0] - DRIFT_TOL);
    Ok(DriftReport {
        cutoff: k,
        series,
        nondecreasing,
    })
}

/// Prefix mass at depth `T` under the pointwise-smaller and the larger schedule.
///
/// The config's layers (after its variant's content handling) are used with
/// both schedules; the config's own schedule is the first candidate.
pub fn compare_schedules(
    config: &RolloutConfig,
    schedule2: &MixingSchedule,
    k: usize,
) -> Result<(f64, f64)> {
    let s1 = config.raw_schedule();
    let (small, large) = if s1.dominated_by(schedule2) {
        (s1, schedule2)
    } else if schedule2.dominated_by(s1) {
        (schedule2, s1)
    } else {
        return Err(Error::invariant(
            "schedules are not pointwise comparable",
        ));
    };
    let n = config.mask().n();
    if k == 0 || k >= n {
        return Err(Error::IndexOutOfRange {
            name: "cutoff",
            value: k,
            max: n - 1,
        });
    }
    let kernels = config.kernels()?;
    let a = prefix_mass(&final_last_row(&kernels, small)?, k)?;
    let b = prefix_mass(&final_last_row(&kernels, large)?, k)?;
    Ok((a, b))
}

/// Row `i` (1-indexed) of a rollout matrix as a distribution.
pub fn matrix_row(p: &Array2<f64>, i: usize) -> Result<PositionDistribution> {
    let row: ArrayView1<f64> = p.row(i - 1);
    PositionDistribution::new(row.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::uniform_kernel;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn causal(n: usize) -> MaskSpec {
        MaskSpec::causal(n).unwrap()
    }

    fn flat_config(n: usize, schedule: MixingSchedule, variant: Variant) -> RolloutConfig {
        RolloutConfig::homogeneous(
            causal(n),
            LayerLogitModel::content_only(ContentModel::zero()),
            schedule,
            variant,
        )
        .unwrap()
    }

    #[test]
    fn schedule_validation_and_builders() {
        assert!(MixingSchedule::new(vec![0.5, 1.2]).is_err());
        assert!(MixingSchedule::new(vec![-0.1]).is_err());
        assert!(MixingSchedule::new(vec![]).is_err());
        let lin = MixingSchedule::linear(5, 0.5, 0.1).unwrap();
        assert_abs_diff_eq!(lin.lambdas()[0], 0.5);
        assert_abs_diff_eq!(lin.lambdas()[4], 0.1, epsilon = 1e-15);
        let geo = MixingSchedule::geometric(3, 0.5).unwrap();
        assert_eq!(geo.lambdas(), &[0.5, 0.25, 0.125]);
        assert_eq!(MixingSchedule::harmonic(2).unwrap().lambdas(), &[1.0, 0.5]);
        assert_eq!(geo.cumulative(), vec![0.5, 0.75, 0.875]);
    }

    #[test]
    fn residual_step_examples() {
        let a = uniform_kernel(causal(2));
        let r0 = residual_step(&a, 0.0).unwrap();
        assert_eq!(r0.matrix(), &Array2::<f64>::eye(2));
        let r1 = residual_step(&a, 1.0).unwrap();
        assert_eq!(r1.matrix(), a.matrix());
        let r = residual_step(&a, 0.5).unwrap();
        assert_abs_diff_eq!(r.matrix()[[1, 0]], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(r.matrix()[[1, 1]], 0.75, epsilon = 1e-15);
        assert!(residual_step(&a, 1.5).is_err());
        assert!(residual_step(&a, -0.1).is_err());
    }

    #[test]
    fn zero_schedule_is_identity() {
        let cfg = flat_config(5, MixingSchedule::constant(4, 0.0).unwrap(), Variant::ResidualAware);
        let res = run_rollout(&cfg, RolloutOptions::full()).unwrap();
        assert_eq!(res.final_matrix().unwrap(), &Array2::<f64>::eye(5));
        for d in res.trajectory() {
            assert_eq!(d, &PositionDistribution::point_mass(5, 5).unwrap());
        }
    }

    #[test]
    fn two_layer_uniform_product() {
        let cfg = flat_config(2, MixingSchedule::constant(2, 1.0).unwrap(), Variant::ResidualAware);
        let res = run_rollout(&cfg, RolloutOptions::default()).unwrap();
        assert_abs_diff_eq!(res.last_row().get(1), 0.75, epsilon = 1e-15);
        assert_abs_diff_eq!(res.last_row().get(2), 0.25, epsilon = 1e-15);
        assert!(res.final_matrix().is_err());
    }

    #[test]
    fn attention_only_collapses() {
        // residual schedule given, variant (a) overrides it with 1s
        let cfg = flat_config(8, MixingSchedule::constant(200, 0.1).unwrap(), Variant::AttentionOnly);
        let res = run_rollout(&cfg, RolloutOptions::default()).unwrap();
        assert!(res.last_row().get(1) >= 0.999);
    }

    #[test]
    fn trajectory_matches_final_row_on_heterogeneous_stack() {
        let mask = causal(6);
        let layers = vec![
            LayerLogitModel::alibi(vec![0.3], ContentModel::new(0.0, 1.0).unwrap()).unwrap(),
            LayerLogitModel::content_only(ContentModel::new(2.0, -1.0).unwrap()),
            LayerLogitModel::alibi(vec![1.5, 0.1], ContentModel::zero()).unwrap(),
        ];
        let cfg = RolloutConfig::new(
            mask,
            layers,
            MixingSchedule::new(vec![0.9, 0.2, 0.6]).unwrap(),
            Variant::ResidualAwareWithContent,
        )
        .unwrap();
        let full = run_rollout(&cfg, RolloutOptions::full()).unwrap();
        let lean = run_rollout(&cfg, RolloutOptions::default()).unwrap();
        let p = full.final_matrix().unwrap();
        for j in 0..6 {
            assert_abs_diff_eq!(full.last_row().probs()[j], p[[5, j]], epsilon = 1e-12);
        }
        for (a, b) in full.trajectory().iter().zip(lean.trajectory()) {
            for (x, y) in a.probs().iter().zip(b.probs()) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-13);
            }
        }
        assert_eq!(full.config_digest(), cfg.digest());
    }

    #[test]
    fn product_order_is_last_layer_first() {
        // Hand-computed: P^(2) = R2 R1 differs from R1 R2 for these kernels.
        let mask = causal(2);
        let a1 = AttentionKernel::new(array![[1.0, 0.0], [0.9, 0.1]], mask).unwrap();
        let a2 = AttentionKernel::new(array![[1.0, 0.0], [0.2, 0.8]], mask).unwrap();
        let sched = MixingSchedule::new(vec![1.0, 1.0]).unwrap();
        let res = rollout_kernels(&[a1.clone(), a2.clone()], &sched, RolloutOptions::default()).unwrap();
        // row 2 of A2 A1 = 0.2*[1,0] + 0.8*[0.9,0.1] = [0.92, 0.08]
        assert_abs_diff_eq!(res.last_row().get(1), 0.92, epsilon = 1e-15);
        // p^(1) is row 2 of A1
        assert_abs_diff_eq!(res.trajectory()[0].get(1), 0.9, epsilon = 1e-15);
    }

    #[test]
    fn drift_report_examples() {
        let cfg = flat_config(4, MixingSchedule::constant(5, 0.0).unwrap(), Variant::ResidualAware);
        let res = run_rollout(&cfg, RolloutOptions::default()).unwrap();
        let rep = drift_report(res.trajectory(), 2).unwrap();
        assert!(rep.series.iter().all(|&x| x == 0.0));
        assert!(rep.nondecreasing);

        let cfg = flat_config(3, MixingSchedule::constant(12, 1.0).unwrap(), Variant::ResidualAware);
        let res = run_rollout(&cfg, RolloutOptions::default()).unwrap();
        let rep = drift_report(res.trajectory(), 1).unwrap();
        assert!(rep.series.windows(2).all(|w| w[1] > w[0]));
        assert!(*rep.series.last().unwrap() > 0.99);
        assert!(drift_report(res.trajectory(), 3).is_err());
        assert!(drift_report(res.trajectory(), 0).is_err());
        assert!(drift_report(&[], 1).is_err());
    }

    #[test]
    fn compare_schedules_examples() {
        let cfg = flat_config(6, MixingSchedule::constant(4, 0.3).unwrap(), Variant::ResidualAware);
        let (a, b) = compare_schedules(&cfg, &MixingSchedule::constant(4, 0.3).unwrap(), 2).unwrap();
        assert_eq!(a, b);

        let cfg0 = flat_config(6, MixingSchedule::constant(4, 0.0).unwrap(), Variant::ResidualAware);
        let (a, b) = compare_schedules(&cfg0, &MixingSchedule::constant(4, 1.0).unwrap(), 3).unwrap();
        assert_eq!(a, 0.0);
        assert!(b > 0.0);

        // roles are sorted: larger schedule first still returns (small, large)
        let cfg1 = flat_config(6, MixingSchedule::constant(4, 1.0).unwrap(), Variant::ResidualAware);
        let (a2, b2) = compare_schedules(&cfg1, &MixingSchedule::constant(4, 0.0).unwrap(), 3).unwrap();
        assert_eq!((a2, b2), (a, b));

        let crossing = MixingSchedule::new(vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let cfg2 = flat_config(6, MixingSchedule::new(vec![1.0, 0.0, 1.0, 0.0]).unwrap(), Variant::ResidualAware);
        assert!(compare_schedules(&cfg2, &crossing, 2).is_err());
    }

    #[test]
    fn variant_views() {
        let layer = LayerLogitModel::alibi(vec![1.0], ContentModel::new(1.0, 2.0).unwrap()).unwrap();
        let cfg = RolloutConfig::homogeneous(
            causal(4),
            layer,
            MixingSchedule::constant(3, 0.4).unwrap(),
            Variant::ResidualAwareWithContent,
        )
        .unwrap();
        assert_eq!(cfg.layer(0).content(), ContentModel::new(1.0, 2.0).unwrap());
        let b = cfg.with_variant(Variant::ResidualAware);
        assert_eq!(b.layer(0).content(), ContentModel::zero());
        assert_eq!(b.schedule().lambdas(), &[0.4; 3]);
        let a = cfg.with_variant(Variant::AttentionOnly);
        assert_eq!(a.schedule().lambdas(), &[1.0; 3]);
        assert_ne!(a.digest(), b.digest());
        assert_ne!(b.digest(), cfg.digest());
        assert!(RolloutConfig::new(
            causal(4),
            vec![LayerLogitModel::content_only(ContentModel::zero())],
            MixingSchedule::constant(2, 0.5).unwrap(),
            Variant::ResidualAware
        )
        .is_err());
    }
}
