//! Seeded generators for kernels, schedules and logits.
//!
//! All randomness flows from one 64-bit seed; independent streams come from
//! ChaCha stream ids so adding a consumer never perturbs the others.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::kernels::{generate_monotone_kernel, AttentionKernel, BiasModel, ContentModel, LayerLogitModel, MaskSpec};
use crate::rollout::MixingSchedule;

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` under `seed`.
pub fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `log w_j` uniform on `[-spread, spread]`.
pub fn log_weights<R: Rng>(rng: &mut R, n: usize, spread: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-spread..=spread)).collect()
}

pub fn random_monotone_kernel<R: Rng>(rng: &mut R, mask: MaskSpec) -> Result<AttentionKernel> {
    let w: Vec<f64> = log_weights(rng, mask.n(), 2.0).into_iter().map(f64::exp).collect();
    generate_monotone_kernel(mask.n(), mask, &w)
}

/// i.i.d. uniform `lambda_t` on `[0, 1]`.
pub fn random_schedule<R: Rng>(rng: &mut R, depth: usize) -> MixingSchedule {
    MixingSchedule::new((0..depth).map(|_| rng.random_range(0.0..=1.0)).collect())
        .expect("uniform draws lie in [0, 1]")
}

/// A pair `(small, large)` with `small <= large` pointwise.
pub fn comparable_schedules<R: Rng>(rng: &mut R, depth: usize) -> (MixingSchedule, MixingSchedule) {
    let small = random_schedule(rng, depth);
    let large = small
        .lambdas()
        .iter()
        .map(|&l| (l + rng.random_range(0.0..=1.0) * (1.0 - l)).min(1.0))
        .collect();
    (small, MixingSchedule::new(large).expect("values stay in [0, 1]"))
}

/// Single-head tabular layer with `logit_ij = f(i, j)` (1-indexed).
pub fn tabular_layer(n: usize, content: ContentModel, f: impl Fn(usize, usize) -> f64) -> Result<LayerLogitModel> {
    let table = (1..=n).map(|i| (1..=n).map(|j| f(i, j)).collect()).collect();
    LayerLogitModel::new(BiasModel::Tabular { tables: vec![table] }, content, 1)
}

/// Content-free monotone base `log w_j`, optionally with ALiBi `-slope (i - j)` on top.
pub fn monotone_base_layer(log_w: &[f64], slope: f64, content: ContentModel) -> Result<LayerLogitModel> {
    tabular_layer(log_w.len(), content, |i, j| log_w[j - 1] - slope * (i as f64 - j as f64))
}

/// Logits of the constant-plus-diagonal model on admissible entries, NaN elsewhere.
pub fn content_logits(mask: MaskSpec, u: f64, delta: f64) -> Array2<f64> {
    let n = mask.n();
    Array2::from_shape_fn((n, n), |(r, c)| {
        let (i, j) = (r + 1, c + 1);
        if !mask.admits(i, j) {
            f64::NAN
        } else if i == j {
            u + delta
        } else {
            u
        }
    })
}

/// Single-head layer with logits drawn uniformly from `[-scale, scale]`.
pub fn random_logit_layer<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Result<LayerLogitModel> {
    let table: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..n).map(|_| rng.random_range(-scale..=scale)).collect())
        .collect();
    LayerLogitModel::new(BiasModel::Tabular { tables: vec![table] }, ContentModel::zero(), 1)
}
