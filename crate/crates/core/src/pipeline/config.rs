use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::consistency::SamplingPolicy;
use crate::error::{Error, Result};
use crate::latentopt::OptimizerConfig;
use crate::postprocess::{BakeConfig, HeuristicBlend, RefineConfig};
use crate::scene::RigSpec;
use crate::schedule::{BetaSpec, Schedule};
use crate::warpfield::{CodecSpec, DepthTolerance, OcclusionParams};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub num_steps: usize,
    pub beta: BetaSpec,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            num_steps: 150,
            beta: BetaSpec::default(),
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<Schedule> {
        if matches!(self.beta, BetaSpec::Explicit) {
            return Err(Error::config(
                "schedule.beta",
                "explicit tables cannot be configured",
            ));
        }
        Schedule::new(self.num_steps, self.beta.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SceneConfig {
    /// Icosphere carrying procedural textures.
    Sphere {
        subdivisions: usize,
        radius: f64,
    },
    Obj {
        path: PathBuf,
    },
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig::Sphere {
            subdivisions: 3,
            radius: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DenoiserConfig {
    /// Mixture over encoded renders of procedural texture variants.
    MeshOracle {
        #[serde(default = "default_variants")]
        variants: usize,
        #[serde(default = "default_spread")]
        spread: f64,
        #[serde(default)]
        weights: Option<Vec<f64>>,
    },
    /// Fixed target latent (PFM) for every view.
    Oracle { target: PathBuf },
    /// Out-of-process backend speaking the wire protocol.
    Remote {
        #[serde(default)]
        command: Option<String>,
        #[serde(default)]
        address: Option<String>,
        #[serde(default = "default_timeout")]
        timeout_secs: f64,
        #[serde(default = "default_connections")]
        connections: usize,
    },
}

fn default_variants() -> usize {
    3
}
fn default_spread() -> f64 {
    0.05
}
fn default_timeout() -> f64 {
    120.0
}
fn default_connections() -> usize {
    1
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig::MeshOracle {
            variants: default_variants(),
            spread: default_spread(),
            weights: None,
        }
    }
}

/// A free camera pose for rendering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseSpec {
    pub eye: [f64; 3],
    pub target: [f64; 3],
    #[serde(default = "default_up")]
    pub up: [f64; 3],
}

fn default_up() -> [f64; 3] {
    [0.0, 1.0, 0.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    /// Explicit poses; when empty an orbit of `orbit_frames` is used.
    pub poses: Vec<PoseSpec>,
    pub orbit_frames: usize,
    pub orbit_elevation_deg: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            poses: Vec::new(),
            orbit_frames: 16,
            orbit_elevation_deg: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub psnr_cap: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { psnr_cap: 99.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Demo2dConfig {
    pub processes: usize,
    pub channels: usize,
    pub size: usize,
}

impl Default for Demo2dConfig {
    fn default() -> Self {
        Self {
            processes: 4,
            channels: 3,
            size: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    /// Worker threads; all cores when absent.
    pub workers: Option<usize>,
    pub output_dir: Option<PathBuf>,
    pub dump_intermediates: bool,
    pub schedule: ScheduleConfig,
    pub scene: SceneConfig,
    pub rig: RigSpec,
    pub denoiser: DenoiserConfig,
    pub codec: CodecSpec,
    pub policy: SamplingPolicy,
    pub optimizer: OptimizerConfig,
    pub occlusion: OcclusionParams,
    pub tolerance: DepthTolerance,
    pub refine: RefineConfig,
    pub bake: BakeConfig,
    pub blend: HeuristicBlend,
    pub render: RenderConfig,
    pub eval: EvalConfig,
    pub demo2d: Demo2dConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            workers: None,
            output_dir: None,
            dump_intermediates: false,
            schedule: ScheduleConfig::default(),
            scene: SceneConfig::default(),
            rig: RigSpec::default(),
            denoiser: DenoiserConfig::default(),
            codec: CodecSpec::Identity,
            policy: SamplingPolicy::default(),
            optimizer: OptimizerConfig::default(),
            occlusion: OcclusionParams::default(),
            tolerance: DepthTolerance::default(),
            refine: RefineConfig::default(),
            bake: BakeConfig::default(),
            blend: HeuristicBlend::default(),
            render: RenderConfig::default(),
            eval: EvalConfig::default(),
            demo2d: Demo2dConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Checks every section against its module's preconditions.
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::config(
                "version",
                format!(
                    "unsupported config version {} (expected {CONFIG_VERSION})",
                    self.version
                ),
            ));
        }
        if self.workers == Some(0) {
            return Err(Error::config("workers", "must be >= 1"));
        }
        self.schedule.build()?;
        match &self.scene {
            SceneConfig::Sphere {
                subdivisions,
                radius,
            } => {
                if *subdivisions > 6 {
                    return Err(Error::config("scene.subdivisions", "at most 6"));
                }
                if !(*radius > 0.0 && radius.is_finite()) {
                    return Err(Error::config("scene.radius", "must be positive"));
                }
            }
            SceneConfig::Obj { .. } => {}
        }
        self.rig.validate()?;
        match &self.denoiser {
            DenoiserConfig::MeshOracle {
                variants,
                spread,
                weights,
            } => {
                if *variants < 1 || *variants > super::scenario::TEXTURE_VARIANTS {
                    return Err(Error::config(
                        "denoiser.variants",
                        format!("must lie in 1..={}", super::scenario::TEXTURE_VARIANTS),
                    ));
                }
                if !(*spread >= 0.0 && spread.is_finite()) {
                    return Err(Error::config("denoiser.spread", "must be finite and >= 0"));
                }
                if let Some(w) = weights {
                    if w.len() != *variants {
                        return Err(Error::config("denoiser.weights", "one weight per variant"));
                    }
                }
            }
            DenoiserConfig::Oracle { .. } => {}
            DenoiserConfig::Remote {
                command,
                address,
                timeout_secs,
                connections,
            } => {
                if command.is_some() == address.is_some() {
                    return Err(Error::config(
                        "denoiser",
                        "remote needs exactly one of command or address",
                    ));
                }
                if !(*timeout_secs > 0.0) {
                    return Err(Error::config("denoiser.timeout_secs", "must be positive"));
                }
                if *connections < 1 {
                    return Err(Error::config("denoiser.connections", "must be >= 1"));
                }
            }
        }
        let codec = self.codec.build()?;
        for (name, size) in [
            ("rig.width", self.rig.width),
            ("rig.height", self.rig.height),
        ] {
            if size % codec.ratio() != 0 {
                return Err(Error::config(
                    name,
                    format!("must be a multiple of the codec ratio {}", codec.ratio()),
                ));
            }
        }
        self.policy.validate()?;
        self.optimizer.validate()?;
        self.occlusion.validate()?;
        self.tolerance.validate()?;
        self.refine.validate()?;
        if !(self.bake.depth_tolerance >= 0.0) {
            return Err(Error::config("bake.depth_tolerance", "must be >= 0"));
        }
        if !(self.blend.tau_fraction > 0.0) {
            return Err(Error::config("blend.tau_fraction", "must be positive"));
        }
        if self.render.poses.is_empty() && self.render.orbit_frames == 0 {
            return Err(Error::config(
                "render.orbit_frames",
                "need poses or at least one orbit frame",
            ));
        }
        if !(self.eval.psnr_cap > 0.0) {
            return Err(Error::config("eval.psnr_cap", "must be positive"));
        }
        let d = &self.demo2d;
        if d.processes < 1 || d.channels < 1 || d.size < 1 {
            return Err(Error::config(
                "demo2d",
                "processes, channels and size must be >= 1",
            ));
        }
        Ok(())
    }
}
