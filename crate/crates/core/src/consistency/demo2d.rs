use ndarray::Array3;

use crate::denoise::Denoiser;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::field::LatentField;
use crate::scene::Track;
use crate::schedule::Schedule;
use crate::warpfield::IdentityCodec;

use super::{
    initial_latents, initial_states, run_sampling, BlendPlan, Sampler, SamplingPolicy, WarpBank,
};

/// Default policy minus the parts that need a rig.
pub fn demo_policy() -> SamplingPolicy {
    SamplingPolicy {
        optimize: false,
        upper_body_replacement: false,
        ..SamplingPolicy::default()
    }
}

/// Three smooth, well separated images with equal RMS 0.5, used as mixture
/// modes.
pub fn demo_modes(shape: (usize, usize, usize)) -> Vec<LatentField> {
    let (c, h, w) = shape;
    let fx = |x: usize| (x as f64 + 0.5) / w as f64 * 2.0 - 1.0;
    let fy = |y: usize| (y as f64 + 0.5) / h as f64 * 2.0 - 1.0;
    let sign = |ch: usize| if ch.is_multiple_of(2) { 1.0 } else { -1.0 };
    let raw = [
        Array3::from_shape_fn(shape, |(ch, _, x)| sign(ch) * fx(x)),
        Array3::from_shape_fn(shape, |(ch, y, _)| {
            fy(y) * (1.0 - ch as f64 / c.max(1) as f64)
        }),
        Array3::from_shape_fn(shape, |(_, y, x)| {
            0.5 - (fx(x).powi(2) + fy(y).powi(2)).sqrt()
        }),
    ];
    raw.into_iter()
        .map(|a| {
            let rms = (a.iter().map(|v| v * v).sum::<f64>() / a.len().max(1) as f64).sqrt();
            let scale = if rms > 0.0 { 0.5 / rms } else { 0.0 };
            LatentField::latent(a * scale)
        })
        .collect()
}

/// Index of the closest mode and the max-abs distance to it.
pub fn nearest_mode(x: &LatentField, modes: &[LatentField]) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (k, m) in modes.iter().enumerate() {
        let d = x.max_abs_diff(m)?;
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((k, d));
        }
    }
    best.ok_or_else(|| Error::contract("no modes"))
}

/// `n` sampling processes over one shared image plane: identity warps and
/// codec, unit weights. Returns the final images.
pub fn run_2d_degenerate(
    n: usize,
    denoiser: &dyn Denoiser,
    schedule: &Schedule,
    policy: &SamplingPolicy,
    seed: u64,
    shape: (usize, usize, usize),
    exec: Execution,
) -> Result<Vec<LatentField>> {
    if n == 0 {
        return Err(Error::config("n", "need at least one process"));
    }
    let plan = BlendPlan::all_to_all(n, (shape.1, shape.2));
    let bank = WarpBank::identity();
    let codec = IdentityCodec;
    let references = if policy.reference_attention {
        vec![0; n]
    } else {
        Vec::new()
    };
    let sampler = Sampler {
        schedule,
        denoiser,
        codec: &codec,
        plan: &plan,
        bank: &bank,
        policy,
        conditions: &[],
        references: &references,
        prompt: None,
        exec,
    };
    let init = initial_states(
        initial_latents(n, shape, seed),
        &vec![Track::FullBody; n],
        schedule.num_steps(),
    );
    let out = run_sampling(&sampler, init, None, None)?;
    Ok(out.states.into_iter().map(|v| v.latent).collect())
}
