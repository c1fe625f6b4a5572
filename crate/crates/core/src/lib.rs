//! Residual-aware attention rollout for causal transformers.
//!
//! Layer kernels are masked softmaxes of positional and content logits. Each
//! layer mixes its kernel with the identity, `R = (1 - lambda) I + lambda A`,
//! and the rollout multiplies these transitions from the last layer down. The
//! crate checks stochastic-order drift of the last-row distribution, the
//! finite/infinite total mixing dichotomy, and compares predicted profiles
//! against measured ones.

pub mod asymptotics;
pub mod error;
pub mod io;
pub mod kernels;
pub mod metrics;
pub mod rollout;
pub mod stochastic_order;
pub mod synth;

pub use error::{Error, Result};
pub use kernels::{AttentionKernel, BiasModel, ContentModel, Kernel, LayerLogitModel, MaskKind, MaskSpec};
pub use rollout::{run_rollout, MixingSchedule, RolloutConfig, RolloutOptions, RolloutResult, Variant};
pub use stochastic_order::{fosd_compare, prefix_mass, Dominance, PositionDistribution};
