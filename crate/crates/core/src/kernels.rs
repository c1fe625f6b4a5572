//! Masked attention kernels built from additive logits.
//!
//! Positions are 1-indexed at every public boundary (`admits`, `get`, file
//! formats); the dense matrices themselves are ordinary 0-indexed ndarrays.

use std::ops::{Range, RangeInclusive};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-sum tolerance for kernels constructed in-process.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Row-sum tolerance for kernels read from external files.
pub const IMPORT_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MaskKind {
    Causal,
    #[serde(rename = "sliding")]
    SlidingWindow { window: usize },
}

/// Which (query, key) pairs may interact in a sequence of length `n`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    kind: MaskKind,
    n: usize,
}

impl MaskSpec {
    pub fn new(kind: MaskKind, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invariant("sequence length must be positive"));
        }
        if let MaskKind::SlidingWindow { window: 0 } = kind {
            return Err(Error::invariant("sliding window must be positive"));
        }
        Ok(Self { kind, n })
    }

    pub fn causal(n: usize) -> Result<Self> {
        Self::new(MaskKind::Causal, n)
    }

    pub fn sliding(n: usize, window: usize) -> Result<Self> {
        Self::new(MaskKind::SlidingWindow { window }, n)
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Whether query `i` may attend to key `j` (both 1-indexed).
    pub fn admits(&self, i: usize, j: usize) -> bool {
        if i == 0 || j == 0 || i > self.n || j > self.n {
            return false;
        }
        self.admissible(i).contains(&j)
    }

    /// Admissible keys of query `i`, 1-indexed.
    pub fn admissible(&self, i: usize) -> RangeInclusive<usize> {
        let r = self.row_keys(i - 1);
        r.start + 1..=r.end
    }

    /// Admissible keys of 0-indexed row `row` as a 0-indexed range.
    pub(crate) fn row_keys(&self, row: usize) -> Range<usize> {
        match self.kind {
            MaskKind::Causal => 0..row + 1,
            MaskKind::SlidingWindow { window } => (row + 1).saturating_sub(window)..row + 1,
        }
    }
}

/// Additive positional bias `b_ij`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BiasModel {
    None,
    /// `b_ij = -m_h (i - j)` per head.
    Alibi { slopes: Vec<f64> },
    /// One dense n×n table per head; entries outside the mask are ignored.
    Tabular { tables: Vec<Vec<Vec<f64>>> },
}

impl BiasModel {
    fn head_count(&self) -> Option<usize> {
        match self {
            BiasModel::None => None,
            BiasModel::Alibi { slopes } => Some(slopes.len()),
            BiasModel::Tabular { tables } => Some(tables.len()),
        }
    }

    /// Bias for head `h`, 0-indexed row and column.
    fn value(&self, h: usize, row: usize, col: usize) -> f64 {
        match self {
            BiasModel::None => 0.0,
            BiasModel::Alibi { slopes } => -slopes[h] * (row as f64 - col as f64),
            BiasModel::Tabular { tables } => tables[h][row][col],
        }
    }
}

/// Constant-plus-diagonal content logits `u + delta * 1{j = i}`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ContentModel {
    pub u: f64,
    pub delta: f64,
}

impl ContentModel {
    pub fn new(u: f64, delta: f64) -> Result<Self> {
        if !u.is_finite() || !delta.is_finite() {
            return Err(Error::invariant("content constants must be finite"));
        }
        Ok(Self { u, delta })
    }

    pub fn zero() -> Self {
        Self::default()
    }
}

#[derive(Deserialize)]
struct RawLayer {
    bias: BiasModel,
    #[serde(default)]
    content: ContentModel,
    heads: Option<usize>,
}

/// Per-layer logit decomposition `l_ij = s_ij + b_ij`, shared content across heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLayer")]
pub struct LayerLogitModel {
    bias: BiasModel,
    content: ContentModel,
    heads: usize,
}

impl TryFrom<RawLayer> for LayerLogitModel {
    type Error = Error;

    fn try_from(raw: RawLayer) -> Result<Self> {
        let heads = raw.heads.or(raw.bias.head_count()).unwrap_or(1);
        Self::new(raw.bias, raw.content, heads)
    }
}

impl LayerLogitModel {
    pub fn new(bias: BiasModel, content: ContentModel, heads: usize) -> Result<Self> {
        if heads == 0 {
            return Err(Error::invariant("a layer needs at least one head"));
        }
        ContentModel::new(content.u, content.delta)?;
        if let Some(found) = bias.head_count() {
            if found != heads {
                return Err(Error::DimensionMismatch {
                    context: "bias heads",
                    expected: heads,
                    found,
                });
            }
        }
        if let BiasModel::Alibi { slopes } = &bias {
            if let Some(&m) = slopes.iter().find(|m| !m.is_finite() || **m < 0.0) {
                return Err(Error::OutOfRange {
                    name: "alibi slope",
                    value: m,
                    range: "[0, inf)",
                });
            }
        }
        Ok(Self {
            bias,
            content,
            heads,
        })
    }

    /// Single head, no positional bias.
    pub fn content_only(content: ContentModel) -> Self {
        Self {
            bias: BiasModel::None,
            content,
            heads: 1,
        }
    }

    pub fn alibi(slopes: Vec<f64>, content: ContentModel) -> Result<Self> {
        let heads = slopes.len();
        Self::new(BiasModel::Alibi { slopes }, content, heads)
    }

    pub fn bias(&self) -> &BiasModel {
        &self.bias
    }

    pub fn content(&self) -> ContentModel {
        self.content
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Same bias and heads with different content.
    pub fn with_content(&self, content: ContentModel) -> Self {
        Self {
            content,
            ..self.clone()
        }
    }
}

/// Anything that acts as a dense row-stochastic transition on positions.
pub trait Kernel {
    fn matrix(&self) -> &Array2<f64>;

    fn n(&self) -> usize {
        self.matrix().nrows()
    }
}

impl<K: Kernel + ?Sized> Kernel for &K {
    fn matrix(&self) -> &Array2<f64> {
        (**self).matrix()
    }
}

impl Kernel for Array2<f64> {
    fn matrix(&self) -> &Array2<f64> {
        self
    }
}

/// Row-stochastic, mask-respecting attention matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionKernel {
    matrix: Array2<f64>,
    mask: MaskSpec,
}

impl Kernel for AttentionKernel {
    fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }
}

impl AttentionKernel {
    pub fn new(matrix: Array2<f64>, mask: MaskSpec) -> Result<Self> {
        Self::with_tolerance(matrix, mask, ROW_SUM_TOL)
    }

    /// Validate against an explicit row-sum tolerance.
    pub fn with_tolerance(matrix: Array2<f64>, mask: MaskSpec, tol: f64) -> Result<Self> {
        let n = mask.n();
        if matrix.dim() != (n, n) {
            return Err(Error::DimensionMismatch {
                context: "kernel matrix",
                expected: n,
                found: if matrix.nrows() != n {
                    matrix.nrows()
                } else {
                    matrix.ncols()
                },
            });
        }
        for (r, row) in matrix.outer_iter().enumerate() {
            let keys = mask.row_keys(r);
            for (c, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite {
                        context: "kernel",
                        row: r + 1,
                        col: c + 1,
                    });
                }
                if v < 0.0 {
                    return Err(Error::invariant(format!(
                        "kernel entry ({}, {}) = {v} is negative",
                        r + 1,
                        c + 1
                    )));
                }
                if v != 0.0 && !keys.contains(&c) {
                    return Err(Error::invariant(format!(
                        "kernel entry ({}, {}) = {v} lies outside the mask",
                        r + 1,
                        c + 1
                    )));
                }
            }
            let sum = row.sum();
            if (sum - 1.0).abs() > tol {
                return Err(Error::invariant(format!(
                    "kernel row {} sums to {sum}, tolerance {tol:e}",
                    r + 1
                )));
            }
        }
        Ok(Self { matrix, mask })
    }

    pub fn mask(&self) -> MaskSpec {
        self.mask
    }

    /// Entry `A_ij`, 1-indexed.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[[i - 1, j - 1]]
    }

    pub fn into_matrix(self) -> Array2<f64> {
        self.matrix
    }
}

/// Masked row-wise softmax of the layer logits for one head.
pub fn build_kernel(
    model: &LayerLogitModel,
    mask: MaskSpec,
    head: usize,
) -> Result<AttentionKernel> {
    if head >= model.heads {
        return Err(Error::IndexOutOfRange {
            name: "head",
            value: head,
            max: model.heads.saturating_sub(1),
        });
    }
    let n = mask.n();
    if let BiasModel::Tabular { tables } = &model.bias {
        let table = &tables[head];
        if table.len() != n {
            return Err(Error::DimensionMismatch {
                context: "bias table rows",
                expected: n,
                found: table.len(),
            });
        }
        if let Some(bad) = table.iter().find(|row| row.len() != n) {
            return Err(Error::DimensionMismatch {
                context: "bias table columns",
                expected: n,
                found: bad.len(),
            });
        }
    }

    let ContentModel { u, delta } = model.content;
    let mut matrix = Array2::zeros((n, n));
    let mut logits = Vec::with_capacity(n);
    for r in 0..n {
        logits.clear();
        for c in mask.row_keys(r) {
            let diag = if c == r { delta } else { 0.0 };
            let l = u + diag + model.bias.value(head, r, c);
            if !l.is_finite() {
                return Err(Error::NonFinite {
                    context: "logits",
                    row: r + 1,
                    col: c + 1,
                });
            }
            logits.push(l);
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            z += *l;
        }
        let start = mask.row_keys(r).start;
        for (k, w) in logits.iter().enumerate() {
            matrix[[r, start + k]] = w / z;
        }
    }
    Ok(AttentionKernel { matrix, mask })
}

/// Uniform average of per-head kernels.
pub fn average_heads(kernels: &[AttentionKernel]) -> Result<AttentionKernel> {
    let first = kernels
        .first()
        .ok_or_else(|| Error::invariant("cannot average an empty list of heads"))?;
    let mut sum = first.matrix.clone();
    for k in &kernels[1..] {
        if k.mask != first.mask {
            return Err(Error::invariant("heads disagree on mask or length"));
        }
        sum += &k.matrix;
    }
    sum /= kernels.len() as f64;
    Ok(AttentionKernel {
        matrix: sum,
        mask: first.mask,
    })
}

/// Effective layer kernel: every head built, then averaged.
pub fn layer_kernel(model: &LayerLogitModel, mask: MaskSpec) -> Result<AttentionKernel> {
    let heads = (0..model.heads)
        .map(|h| build_kernel(model, mask, h))
        .collect::<Result<Vec<_>>>()?;
    average_heads(&heads)
}

/// Row `i` is `weights` restricted to the keys admissible for `i`, renormalized.
///
/// Under a causal mask every such kernel is stochastically monotone: rows share
/// the prefix numerator while the normalizer only grows with `i`.
pub fn generate_monotone_kernel(
    n: usize,
    mask: MaskSpec,
    weights: &[f64],
) -> Result<AttentionKernel> {
    if mask.n() != n {
        return Err(Error::DimensionMismatch {
            context: "mask length",
            expected: n,
            found: mask.n(),
        });
    }
    if weights.len() != n {
        return Err(Error::DimensionMismatch {
            context: "weights",
            expected: n,
            found: weights.len(),
        });
    }
    if let Some(&w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
        return Err(Error::OutOfRange {
            name: "weight",
            value: w,
            range: "(0, inf)",
        });
    }
    let mut matrix = Array2::zeros((n, n));
    for r in 0..n {
        let keys = mask.row_keys(r);
        let z: f64 = weights[keys.clone()].iter().sum();
        for c in keys {
            matrix[[r, c]] = weights[c] / z;
        }
    }
    Ok(AttentionKernel { matrix, mask })
}

/// Uniform attention over admissible keys.
pub fn uniform_kernel(mask: MaskSpec) -> AttentionKernel {
    generate_monotone_kernel(mask.n(), mask, &vec![1.0; mask.n()])
        .expect("unit weights are valid")
}
