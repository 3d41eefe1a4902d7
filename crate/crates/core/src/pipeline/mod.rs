//! Run configuration, orchestration of the generate / refine / render /
//! eval / demo2d runs, image I/O and cross-view metrics.

mod config;
mod io;
mod metrics;
mod run;
mod scenario;

pub use config::{
    Demo2dConfig, DenoiserConfig, EvalConfig, PoseSpec, RenderConfig, RunConfig, SceneConfig,
    ScheduleConfig, CONFIG_VERSION,
};
pub use io::{
    decode_pfm, encode_pfm, read_image, read_pfm, read_png, write_json, write_pfm, write_png,
};
pub use metrics::{
    cross_view_consistency, psnr, ssim, MetricsReport, PairMetric, DEFAULT_PSNR_CAP,
};
pub use run::{
    ablation_policies, build_denoiser, config_hash, demo2d, expand_inputs, ground_truth_frames,
    load_mesh, normal_conditions, normal_target_from_condition, portable_config, prepare_scene,
    render_cameras, render_frames, run_demo2d, run_eval, run_generate, run_refine, run_render,
    sample_views, Demo2dSummary, GenerateOptions, GenerateSummary, Manifest, ManifestEntry,
    RefineSummary, RenderSummary, SampledViews, Scene, Timings, DEMO_MODE_TOL, DEMO_PAIRWISE_TOL,
};
pub use scenario::{
    painted_mesh, render_textured, shade_texture, texture_color, BACKGROUND, TEXTURE_VARIANTS,
};
