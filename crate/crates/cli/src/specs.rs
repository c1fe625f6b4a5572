//! Short textual specs for schedules and kernels used on the command line.

use std::path::Path;

use rollout_core::io::{load, ScheduleFile};
use rollout_core::kernels::{layer_kernel, uniform_kernel};
use rollout_core::synth::{random_logit_layer, random_monotone_kernel, substream};
use rollout_core::{AttentionKernel, ContentModel, Error, LayerLogitModel, MaskSpec, MixingSchedule, Result};

/// Stream ids under the global seed.
pub const KERNEL_STREAM: u64 = 1;

fn number(raw: &str, what: &str) -> Result<f64> {
    raw.parse()
        .map_err(|_| Error::Malformed(format!("{what}: cannot parse {raw:?} as a number")))
}

/// `constant:L`, `harmonic`, `geometric:R`, `linear:A:B`, or a schedule file path.
pub fn parse_schedule(spec: &str, depth: Option<usize>) -> Result<MixingSchedule> {
    let parts: Vec<&str> = spec.split(':').collect();
    let need_depth = || depth.ok_or_else(|| Error::Malformed(format!("schedule {spec:?} needs --depth")));
    match parts.as_slice() {
        ["constant", l] => MixingSchedule::constant(need_depth()?, number(l, "constant")?),
        ["harmonic"] => MixingSchedule::harmonic(need_depth()?),
        ["geometric", r] => MixingSchedule::geometric(need_depth()?, number(r, "geometric")?),
        ["linear", a, b] => MixingSchedule::linear(need_depth()?, number(a, "linear")?, number(b, "linear")?),
        _ if Path::new(spec).is_file() => {
            let file: ScheduleFile = load(spec)?;
            if let Some(d) = depth.filter(|&d| d != file.depth) {
                return Err(Error::DimensionMismatch {
                    context: "--depth vs schedule file",
                    expected: file.depth,
                    found: d,
                });
            }
            Ok(file.lambdas)
        }
        _ => Err(Error::Malformed(format!(
            "unknown schedule {spec:?}; expected constant:L, harmonic, geometric:R, linear:A:B or a file"
        ))),
    }
}

/// `uniform`, `alibi:M`, `random` (seeded monotone kernel), `noise:S`
/// (seeded uniform logits on `[-S, S]`), or a kernel file path.
pub fn parse_kernel(spec: &str, mask: MaskSpec, seed: u64) -> Result<AttentionKernel> {
    let parts: Vec<&str> = spec.split(':').collect();
    match parts.as_slice() {
        ["uniform"] => Ok(uniform_kernel(mask)),
        ["alibi", m] => layer_kernel(
            &LayerLogitModel::alibi(vec![number(m, "alibi")?], ContentModel::zero())?,
            mask,
        ),
        ["random"] => random_monotone_kernel(&mut substream(seed, KERNEL_STREAM), mask),
        ["noise", s] => layer_kernel(
            &random_logit_layer(&mut substream(seed, KERNEL_STREAM), mask.n(), number(s, "noise")?)?,
            mask,
        ),
        _ if Path::new(spec).is_file() => load(spec),
        _ => Err(Error::Malformed(format!(
            "unknown kernel {spec:?}; expected uniform, alibi:M, random, noise:S or a file"
        ))),
    }
}

pub fn mask(n: usize, window: Option<usize>) -> Result<MaskSpec> {
    match window {
        Some(w) => MaskSpec::sliding(n, w),
        None => MaskSpec::causal(n),
    }
}
