//! Consistency-guided multi-view sampling.

mod blend;
pub mod demo2d;
mod plan;
mod policy;
mod sampler;

pub use blend::{
    apply_upper_body_replacement, blend_factor, blend_predictions, cg_noise, BlendInput,
};
pub use demo2d::{demo_modes, demo_policy, nearest_mode, run_2d_degenerate};
pub use plan::{rig_warp_pairs, BlendPlan, PlanEntry, TargetPlan, WarpBank};
pub use policy::{CgPattern, SamplingPolicy};
pub use sampler::{
    initial_latents, initial_states, multiview_step, run_sampling, Optimization, Sampler,
    SamplingOutput, StepObserver, StepRecord, ViewState,
};
