use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use ndarray::{Array2, Array3};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::bridge::{Endpoint, RemoteDenoiser, RemoteOptions};
use crate::consistency::{
    demo_modes, initial_latents, initial_states, nearest_mode, rig_warp_pairs, run_2d_degenerate,
    run_sampling, BlendPlan, CgPattern, Optimization, Sampler, SamplingPolicy, StepObserver,
    StepRecord, WarpBank,
};
use crate::denoise::{
    Conditions, Denoiser, GaussianMixture, GmmDenoiser, MeshOracleDenoiser, OracleDenoiser,
};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::field::LatentField;
use crate::latentopt::{rig_pair_schedule, PairRecord};
use crate::postprocess::{
    bake_vertex_colors, blend_novel_view, refine_mesh, render_vertex_colors, BlendWeightProvider,
    NormalTarget, RefineOutcome,
};
use crate::scene::{
    build_rig, conditions_from_gbuffer, rasterize, Camera, ConditionMaps, Intrinsics, NormalMode,
    RasterOptions, TriMesh, Vec3, ViewRig,
};
use crate::schedule::Schedule;
use crate::warpfield::{Codec, SceneGeometry};

use super::config::{DenoiserConfig, PoseSpec, RunConfig, SceneConfig};
use super::io::{read_image, read_pfm, write_json, write_pfm, write_png};
use super::metrics::{cross_view_consistency, csv_error, MetricsReport};
use super::scenario::{render_textured, shade_texture, BACKGROUND};

/// Mesh, rig and rasterized geometry shared by every stage of a run.
pub struct Scene {
    pub mesh: TriMesh,
    pub rig: ViewRig,
    pub geometry: SceneGeometry,
    pub codec: Box<dyn Codec>,
    pub condition_maps: Vec<ConditionMaps>,
    pub conditions: Vec<Conditions>,
    /// Attention reference of each view.
    pub references: Vec<usize>,
    pub bank: WarpBank,
}

impl Scene {
    pub fn latent_shape(&self) -> (usize, usize, usize) {
        let gb = &self.geometry.gbuffers[0];
        self.codec.latent_shape((3, gb.height, gb.width))
    }

    /// Renders of texture `variant` at every rig view.
    pub fn texture_renders(&self, variant: usize) -> Vec<Array3<f64>> {
        self.geometry.exec.map(self.rig.len(), |v| {
            shade_texture(&self.geometry.gbuffers[v], variant)
        })
    }
}

pub fn load_mesh(cfg: &RunConfig) -> Result<TriMesh> {
    match &cfg.scene {
        SceneConfig::Sphere {
            subdivisions,
            radius,
        } => Ok(TriMesh::icosphere(*subdivisions, *radius)),
        SceneConfig::Obj { path } => {
            TriMesh::read_obj(path).map_err(|e| e.at("scene", path.display().to_string()))
        }
    }
}

/// Rig, g-buffers, conditions and warps for `mesh`.
pub fn prepare_scene(cfg: &RunConfig, mesh: TriMesh, exec: Execution) -> Result<Scene> {
    let rig = build_rig(&cfg.rig, mesh.bbox()).map_err(|e| e.at("scene", "rig"))?;
    let geometry = SceneGeometry::build(&mesh, rig.cameras(), cfg.tolerance, exec)
        .map_err(|e| e.at("scene", "rasterize"))?;
    let codec = cfg.codec.build()?;
    let condition_maps: Vec<ConditionMaps> = exec.map(rig.len(), |v| {
        conditions_from_gbuffer(&mesh, &geometry.cameras[v], &geometry.gbuffers[v])
    });
    let conditions = condition_maps
        .iter()
        .map(ConditionMaps::to_conditions)
        .collect();
    let references = (0..rig.len()).map(|v| rig.reference_view(v)).collect();
    let bank = WarpBank::from_geometry(&geometry, &rig_warp_pairs(&rig))
        .map_err(|e| e.at("warpfield", "warps"))?;
    Ok(Scene {
        mesh,
        rig,
        geometry,
        codec,
        condition_maps,
        conditions,
        references,
        bank,
    })
}

/// Denoiser selected by the config. Remote endpoints given on the command
/// line take precedence.
pub fn build_denoiser(
    cfg: &RunConfig,
    scene: &Scene,
    schedule: &Schedule,
    endpoint: Option<Endpoint>,
) -> Result<Box<dyn Denoiser>> {
    let remote =
        |endpoint: &Endpoint, timeout_secs: f64, connections: usize| -> Result<Box<dyn Denoiser>> {
            let opts = RemoteOptions {
                timeout: Duration::from_secs_f64(timeout_secs),
                connections,
                ..Default::default()
            };
            Ok(Box::new(
                RemoteDenoiser::connect(endpoint, schedule, opts)
                    .map_err(|e| e.at("bridge", "connect"))?,
            ))
        };
    if let Some(ep) = endpoint {
        let (timeout, conns) = match &cfg.denoiser {
            DenoiserConfig::Remote {
                timeout_secs,
                connections,
                ..
            } => (*timeout_secs, *connections),
            _ => (120.0, 1),
        };
        return remote(&ep, timeout, conns);
    }
    match &cfg.denoiser {
        DenoiserConfig::MeshOracle {
            variants,
            spread,
            weights,
        } => {
            let renders: Vec<Vec<Array3<f64>>> =
                (0..*variants).map(|k| scene.texture_renders(k)).collect();
            Ok(Box::new(MeshOracleDenoiser::from_renders(
                &renders,
                scene.codec.as_ref(),
                weights.clone(),
                *spread,
            )?))
        }
        DenoiserConfig::Oracle { target } => {
            let img =
                read_pfm(target).map_err(|e| e.at("denoise", target.display().to_string()))?;
            let shape = scene.latent_shape();
            let latent = if img.dim() == shape {
                img
            } else {
                scene.codec.encode(&img)?
            };
            if latent.dim() != shape {
                return Err(Error::config(
                    "denoiser.target",
                    format!(
                        "target {:?} does not match latent shape {shape:?}",
                        latent.dim()
                    ),
                ));
            }
            Ok(Box::new(OracleDenoiser::new(LatentField::latent(latent))))
        }
        DenoiserConfig::Remote {
            command,
            address,
            timeout_secs,
            connections,
        } => {
            let ep = match (command, address) {
                (Some(c), _) => Endpoint::Command(c.clone()),
                (None, Some(a)) => Endpoint::Tcp(a.clone()),
                (None, None) => {
                    return Err(Error::config(
                        "denoiser",
                        "remote needs a command or an address",
                    ))
                }
            };
            remote(&ep, *timeout_secs, *connections)
        }
    }
}

/// Final latents and decoded images of one sampling run.
pub struct SampledViews {
    pub latents: Vec<LatentField>,
    pub images: Vec<Array3<f64>>,
    pub loss_trace: Vec<PairRecord>,
}

/// Runs the coupled sampler over the scene's rig.
pub fn sample_views(
    scene: &Scene,
    schedule: &Schedule,
    denoiser: &dyn Denoiser,
    policy: &SamplingPolicy,
    cfg: &RunConfig,
    observer: Option<StepObserver<'_>>,
) -> Result<SampledViews> {
    policy.validate()?;
    let exec = scene.geometry.exec;
    let plan = BlendPlan::from_rig(
        &scene.geometry,
        &scene.rig,
        scene.codec.ratio(),
        cfg.occlusion,
        policy.validity_threshold,
        &scene.bank,
    )
    .map_err(|e| e.at("consistency", "plan"))?;
    let references = if policy.reference_attention {
        scene.references.clone()
    } else {
        Vec::new()
    };
    let sampler = Sampler {
        schedule,
        denoiser,
        codec: scene.codec.as_ref(),
        plan: &plan,
        bank: &scene.bank,
        policy,
        conditions: &scene.conditions,
        references: &references,
        prompt: None,
        exec,
    };
    let tracks: Vec<_> = scene.rig.views().iter().map(|v| v.track).collect();
    let init = initial_states(
        initial_latents(scene.rig.len(), scene.latent_shape(), cfg.seed),
        &tracks,
        schedule.num_steps(),
    );
    let (phase1, phase2) = rig_pair_schedule(&scene.rig);
    let opt = Optimization {
        config: &cfg.optimizer,
        phase1,
        phase2,
        rig: Some(&scene.rig),
    };
    let out = run_sampling(&sampler, init, policy.optimize.then_some(&opt), observer)?;
    let latents: Vec<LatentField> = out.states.into_iter().map(|s| s.latent).collect();
    let images = exec.try_map(latents.len(), |v| {
        scene
            .codec
            .decode(latents[v].data())
            .map(|img| img.mapv(|x| x.clamp(0.0, 1.0)))
    })?;
    Ok(SampledViews {
        latents,
        images,
        loss_trace: out.loss_trace,
    })
}

/// The four cumulative configurations of the ablation: independent
/// sampling, guided noise, guided noise with latent optimization, and the
/// full method with reference attention.
pub fn ablation_policies(base: &SamplingPolicy) -> Vec<(&'static str, SamplingPolicy)> {
    let cg = SamplingPolicy {
        cg_pattern: CgPattern::Alternate,
        upper_body_replacement: true,
        optimize: false,
        reference_attention: false,
        ..base.clone()
    };
    let optim = SamplingPolicy {
        optimize: true,
        ..cg.clone()
    };
    let full = SamplingPolicy {
        reference_attention: true,
        ..optim.clone()
    };
    vec![
        ("conditions_only", SamplingPolicy::vanilla()),
        ("cg_noise", cg),
        ("optimization", optim),
        ("full", full),
    ]
}

/// Output files written so far, keyed by path relative to the run
/// directory.
struct Bundle {
    root: PathBuf,
    staging: PathBuf,
    files: Vec<String>,
}

impl Bundle {
    fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        let staging = root.join(format!(".partial-{}", std::process::id()));
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir_all(&staging)?;
        Ok(Self {
            root: root.to_path_buf(),
            staging,
            files: Vec::new(),
        })
    }

    fn path(&mut self, rel: &str) -> Result<PathBuf> {
        let p = self.staging.join(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        self.files.push(rel.to_string());
        Ok(p)
    }

    fn png(&mut self, rel: &str, img: &Array3<f64>) -> Result<()> {
        let p = self.path(rel)?;
        write_png(&p, img)
    }

    fn pfm(&mut self, rel: &str, img: &Array3<f64>) -> Result<()> {
        let p = self.path(rel)?;
        write_pfm(&p, img)
    }

    fn json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let p = self.path(rel)?;
        write_json(&p, value)
    }

    fn text(&mut self, rel: &str, text: &str) -> Result<()> {
        let p = self.path(rel)?;
        fs::write(p, text)?;
        Ok(())
    }

    fn manifest(&self, config_hash: &str, seed: u64) -> Result<Manifest> {
        let mut files = Vec::with_capacity(self.files.len());
        let mut names = self.files.clone();
        names.sort();
        names.dedup();
        for rel in names {
            let bytes = fs::read(self.staging.join(&rel))?;
            files.push(ManifestEntry {
                sha256: hex::encode(Sha256::digest(&bytes)),
                bytes: bytes.len(),
                path: rel,
            });
        }
        Ok(Manifest {
            format: 1,
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: config_hash.to_string(),
            seed,
            timings: "timings.json".to_string(),
            files,
        })
    }

    /// Writes the manifest and timings, then moves every staged file into
    /// the run directory.
    fn finish(mut self, config_hash: &str, seed: u64, timings: &Timings) -> Result<Manifest> {
        let manifest = self.manifest(config_hash, seed)?;
        let mp = self.path("manifest.json")?;
        write_json(&mp, &manifest)?;
        let tp = self.path("timings.json")?;
        write_json(&tp, timings)?;
        let mut names = self.files.clone();
        names.sort();
        names.dedup();
        for rel in &names {
            let dst = self.root.join(rel);
            if let Some(dir) = dst.parent() {
                fs::create_dir_all(dir)?;
            }
            fs::rename(self.staging.join(rel), dst)?;
        }
        let _ = fs::remove_dir_all(&self.staging);
        self.files.clear();
        Ok(manifest)
    }
}

impl Drop for Bundle {
    fn drop(&mut self) {
        if self.staging.exists() {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

/// Content listing of a run directory. Wall-clock timings live in the
/// separate file named by `timings` so that the manifest itself is
/// reproducible.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub tool: String,
    pub version: String,
    pub config_sha256: String,
    pub seed: u64,
    pub timings: String,
    pub files: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Timings {
    pub stages: Vec<(String, f64)>,
    pub total_secs: f64,
}

struct Clock {
    start: Instant,
    last: Instant,
    timings: Timings,
}

impl Clock {
    fn new() -> Self {
        let now = Instant::now();
        Self {
            start: now,
            last: now,
            timings: Timings::default(),
        }
    }

    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.timings
            .stages
            .push((stage.to_string(), (now - self.last).as_secs_f64()));
        self.last = now;
    }

    fn done(mut self) -> Timings {
        self.timings.total_secs = self.start.elapsed().as_secs_f64();
        self.timings
    }
}

/// Hash of the config without the output location and worker count, so
/// runs that differ only in where they write or how many threads they use
/// share a hash.
pub fn config_hash(cfg: &RunConfig) -> Result<String> {
    Ok(hex::encode(Sha256::digest(
        portable_config(cfg)?.as_bytes(),
    )))
}

/// Config JSON with the output location and worker count cleared; this is
/// what the bundle records as config.json.
pub fn portable_config(cfg: &RunConfig) -> Result<String> {
    let mut c = cfg.clone();
    c.output_dir = None;
    c.workers = None;
    c.to_json()
}

fn output_dir(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.output_dir
        .clone()
        .ok_or_else(|| Error::config("output_dir", "no output directory (use --out)"))
}

fn execution(cfg: &RunConfig) -> Execution {
    if cfg.workers == Some(1) {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn write_loss_trace(path: &Path, trace: &[PairRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record([
        "timestep",
        "phase",
        "i",
        "j",
        "loss_before",
        "loss_after",
        "note",
    ])
    .map_err(csv_error)?;
    for r in trace {
        w.write_record([
            r.timestep.to_string(),
            r.phase.to_string(),
            r.i.to_string(),
            r.j.to_string(),
            format!("{:.9e}", r.loss_before),
            format!("{:.9e}", r.loss_after),
            r.note.unwrap_or("").to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn depth_image(d: &Array2<f64>) -> Array3<f64> {
    let (h, w) = d.dim();
    d.clone()
        .into_shape_with_order((1, h, w))
        .expect("depth shape")
}

#[derive(Debug, Clone)]
pub struct GenerateSummary {
    pub report: MetricsReport,
    pub manifest: Manifest,
    pub out: PathBuf,
}

/// Command-line overrides of a generate run.
#[derive(Debug, Clone, Default)]
pub struct GenerateOptions {
    pub endpoint: Option<Endpoint>,
}

/// Multi-view sampling over the configured scene. Writes per-view images and
/// latents, condition maps, cross-view metrics, the optimization loss trace
/// and a manifest; with `dump_intermediates` also per-step predictions,
/// blends and guided noise, plus the final cross-view warps and occlusion
/// weights. Nothing is left in the output directory when a stage fails.
pub fn run_generate(cfg: &RunConfig, opts: GenerateOptions) -> Result<GenerateSummary> {
    cfg.validate()?;
    let out = output_dir(cfg)?;
    let hash = config_hash(cfg)?;
    crate::exec::with_workers(cfg.workers, || {
        let mut clock = Clock::new();
        let exec = execution(cfg);
        let schedule = cfg.schedule.build()?;
        let scene = prepare_scene(cfg, load_mesh(cfg)?, exec)?;
        clock.lap("prepare");
        let denoiser = build_denoiser(cfg, &scene, &schedule, opts.endpoint.clone())?;
        clock.lap("denoiser");
        let mut bundle = Bundle::create(&out)?;
        let dump = cfg.dump_intermediates;
        let mut dump_err: Option<Error> = None;
        let mut observer = |rec: &StepRecord| -> Result<()> {
            if !rec.guided {
                return Ok(());
            }
            let t = rec.timestep;
            for (v, ((p, b), n)) in rec
                .predicted
                .iter()
                .zip(&rec.blended)
                .zip(&rec.noise)
                .enumerate()
            {
                for (name, f) in [("predicted", p), ("blended", b), ("noise", n)] {
                    if let Err(e) =
                        bundle.pfm(&format!("dumps/t{t:03}/{name}_{v:02}.pfm"), f.data())
                    {
                        dump_err.get_or_insert(e);
                    }
                }
            }
            Ok(())
        };
        let sampled = sample_views(
            &scene,
            &schedule,
            denoiser.as_ref(),
            &cfg.policy,
            cfg,
            if dump { Some(&mut observer) } else { None },
        )?;
        if let Some(e) = dump_err {
            return Err(e);
        }
        clock.lap("sampling");
        let report = cross_view_consistency(
            &sampled.images,
            &scene.rig,
            &scene.geometry,
            cfg.eval.psnr_cap,
        )
        .map_err(|e| e.at("pipeline", "metrics"))?;
        clock.lap("metrics");
        for (v, img) in sampled.images.iter().enumerate() {
            bundle.png(&format!("views/view_{v:02}.png"), img)?;
            bundle.pfm(
                &format!("latents/latent_{v:02}.pfm"),
                sampled.latents[v].data(),
            )?;
            let c = &scene.condition_maps[v];
            bundle.png(
                &format!("conditions/depth_{v:02}.png"),
                &depth_image(&c.depth),
            )?;
            bundle.pfm(
                &format!("conditions/depth_{v:02}.pfm"),
                &depth_image(&c.depth),
            )?;
            bundle.png(&format!("conditions/normal_{v:02}.png"), &c.normal)?;
            bundle.pfm(&format!("conditions/normal_{v:02}.pfm"), &c.normal)?;
        }
        if dump {
            for i in 0..scene.rig.len() {
                for j in scene.rig.neighbors(i) {
                    let warped = scene.geometry.warp_map(j, i)?.apply(&sampled.images[j])?;
                    bundle.pfm(
                        &format!("dumps/warps/warp_{j:02}_to_{i:02}.pfm"),
                        &warped.image,
                    )?;
                    let occ = scene.geometry.occlusion(i, j, cfg.occlusion)?;
                    bundle.pfm(
                        &format!("dumps/warps/occlusion_{j:02}_to_{i:02}.pfm"),
                        &depth_image(&occ.weights),
                    )?;
                }
            }
        }
        let p = bundle.path("metrics.csv")?;
        report.write_csv(&p)?;
        let p = bundle.path("loss_trace.csv")?;
        write_loss_trace(&p, &sampled.loss_trace)?;
        bundle.text("config.json", &portable_config(cfg)?)?;
        clock.lap("write");
        let manifest = bundle.finish(&hash, cfg.seed, &clock.done())?;
        Ok(GenerateSummary {
            report,
            manifest,
            out: out.clone(),
        })
    })
}

/// Result of the 2D degenerate demo.
#[derive(Debug, Clone, Serialize)]
pub struct Demo2dSummary {
    pub processes: usize,
    pub seed: u64,
    /// Largest pairwise max-abs difference between the final images.
    pub pairwise_max_abs: f64,
    pub mode: usize,
    pub mode_max_abs: f64,
    pub consensus: bool,
    /// Modes reached by independent (vanilla) sampling with the same seed.
    pub vanilla_modes: Vec<usize>,
}

/// Tolerances of the demo's consensus test.
pub const DEMO_PAIRWISE_TOL: f64 = 1e-3;
pub const DEMO_MODE_TOL: f64 = 1e-2;

/// Runs the degenerate single-image-plane demo with the guided default
/// policy and, for contrast, with independent sampling.
pub fn demo2d(
    cfg: &RunConfig,
    seed: u64,
    exec: Execution,
) -> Result<(Demo2dSummary, Vec<LatentField>)> {
    let d = &cfg.demo2d;
    let shape = (d.channels, d.size, d.size);
    let schedule = cfg.schedule.build()?;
    let modes = demo_modes(shape);
    let denoiser = GmmDenoiser::new(GaussianMixture::uniform(modes.clone())?);
    let policy = crate::consistency::demo_policy();
    let finals = run_2d_degenerate(
        d.processes,
        &denoiser,
        &schedule,
        &policy,
        seed,
        shape,
        exec,
    )?;
    let mut pairwise: f64 = 0.0;
    for a in 0..finals.len() {
        for b in a + 1..finals.len() {
            pairwise = pairwise.max(finals[a].max_abs_diff(&finals[b])?);
        }
    }
    let (mode, mode_max_abs) = nearest_mode(&finals[0], &modes)?;
    let mut worst = mode_max_abs;
    for f in &finals[1..] {
        worst = worst.max(f.max_abs_diff(&modes[mode])?);
    }
    let vanilla = run_2d_degenerate(
        d.processes,
        &denoiser,
        &schedule,
        &SamplingPolicy::vanilla(),
        seed,
        shape,
        exec,
    )?;
    let vanilla_modes = vanilla
        .iter()
        .map(|f| nearest_mode(f, &modes).map(|m| m.0))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        Demo2dSummary {
            processes: d.processes,
            seed,
            pairwise_max_abs: pairwise,
            mode,
            mode_max_abs: worst,
            consensus: pairwise <= DEMO_PAIRWISE_TOL && worst <= DEMO_MODE_TOL,
            vanilla_modes,
        },
        finals,
    ))
}

/// CLI wrapper of [`demo2d`]: writes the final images (mapped from
/// `[-1, 1]` to `[0, 1]` for PNG), their raw PFMs and a summary.
pub fn run_demo2d(cfg: &RunConfig) -> Result<Demo2dSummary> {
    cfg.validate()?;
    let out = output_dir(cfg)?;
    let hash = config_hash(cfg)?;
    crate::exec::with_workers(cfg.workers, || {
        let mut clock = Clock::new();
        let (summary, finals) = demo2d(cfg, cfg.seed, execution(cfg))?;
        clock.lap("sampling");
        let mut bundle = Bundle::create(&out)?;
        for (k, f) in finals.iter().enumerate() {
            let img = f.data();
            if img.dim().0 == 1 || img.dim().0 == 3 {
                bundle.png(&format!("process_{k:02}.png"), &img.mapv(|v| 0.5 + 0.5 * v))?;
                bundle.pfm(&format!("process_{k:02}.pfm"), img)?;
            }
        }
        bundle.json("summary.json", &summary)?;
        bundle.finish(&hash, cfg.seed, &clock.done())?;
        Ok(summary)
    })
}

/// Converts camera-frame encoded normals (x right, y up, z towards the
/// viewer, `n * 0.5 + 0.5`) to a world-space target. All-zero pixels are
/// treated as background.
pub fn normal_target_from_condition(encoded: &Array3<f64>, cam: &Camera) -> Result<NormalTarget> {
    let (c, h, w) = encoded.dim();
    if c != 3 {
        return Err(Error::config(
            "targets",
            format!("normal map needs 3 channels, got {c}"),
        ));
    }
    let mut normals = Array3::zeros((3, h, w));
    let mut mask = Array2::from_elem((h, w), false);
    let rt = cam.rotation.transpose();
    for y in 0..h {
        for x in 0..w {
            let e = [encoded[[0, y, x]], encoded[[1, y, x]], encoded[[2, y, x]]];
            if e.iter().all(|&v| v == 0.0) {
                continue;
            }
            let n_cam = Vec3::new(2.0 * e[0] - 1.0, -(2.0 * e[1] - 1.0), -(2.0 * e[2] - 1.0));
            let n = rt * n_cam;
            for k in 0..3 {
                normals[[k, y, x]] = n[k];
            }
            mask[[y, x]] = true;
        }
    }
    NormalTarget::new(normals, mask)
}

/// Sorted image files in `paths`; a single directory is expanded to its
/// `.png` and `.pfm` files.
pub fn expand_inputs(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    if let [dir] = paths {
        if dir.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("png" | "pfm")))
                .collect();
            files.sort();
            // prefer PFM when both encodings of a map are present
            files.dedup_by(|b, a| a.with_extension("") == b.with_extension(""));
            return Ok(files);
        }
    }
    Ok(paths.to_vec())
}

fn read_inputs(paths: &[PathBuf], expected: usize, what: &str) -> Result<Vec<Array3<f64>>> {
    let files = expand_inputs(paths)?;
    if files.len() != expected {
        return Err(Error::config(
            what.to_string(),
            format!(
                "need one file per rig view ({expected}), got {}",
                files.len()
            ),
        ));
    }
    files
        .iter()
        .map(|p| {
            read_image(p)
                .map_err(|e| Error::config(what.to_string(), format!("{}: {e}", p.display())))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct RefineSummary {
    pub outcome: RefineOutcome,
    pub manifest: Manifest,
}

/// Refines `mesh` against per-view normal maps given in the same encoding
/// as the exported normal conditions.
pub fn run_refine(cfg: &RunConfig, mesh_path: &Path, targets: &[PathBuf]) -> Result<RefineSummary> {
    cfg.validate()?;
    let out = output_dir(cfg)?;
    let hash = config_hash(cfg)?;
    crate::exec::with_workers(cfg.workers, || {
        let mut clock = Clock::new();
        let exec = execution(cfg);
        let mesh =
            TriMesh::read_obj(mesh_path).map_err(|e| Error::config("--mesh", e.to_string()))?;
        let rig = build_rig(&cfg.rig, mesh.bbox())?;
        let cams = rig.cameras();
        let encoded = read_inputs(targets, rig.len(), "--targets")?;
        let targets = encoded
            .iter()
            .zip(&cams)
            .map(|(e, c)| normal_target_from_condition(e, c))
            .collect::<Result<Vec<_>>>()?;
        clock.lap("load");
        let outcome = refine_mesh(&mesh, &cams, &targets, &cfg.refine, exec)
            .map_err(|e| e.at("postprocess", "refine"))?;
        clock.lap("refine");
        if let Some(reason) = &outcome.aborted {
            return Err(Error::Numerical {
                timestep: 0,
                reason: format!("refinement aborted: {reason}"),
            }
            .at("postprocess", "refine"));
        }
        let mut bundle = Bundle::create(&out)?;
        let p = bundle.path("refined.obj")?;
        outcome.mesh.write_obj(&p)?;
        let p = bundle.path("refine_trace.csv")?;
        let mut w = csv::Writer::from_path(&p).map_err(csv_error)?;
        for r in &outcome.trace {
            w.serialize(r).map_err(csv_error)?;
        }
        w.flush()?;
        let manifest = bundle.finish(&hash, cfg.seed, &clock.done())?;
        Ok(RefineSummary { outcome, manifest })
    })
}

/// Cameras of the render path: the configured poses, or an orbit around
/// the mesh at the full-body radius.
pub fn render_cameras(cfg: &RunConfig, mesh: &TriMesh, rig: &ViewRig) -> Result<Vec<Camera>> {
    let intr = Intrinsics::from_fov(cfg.rig.fov_y_deg, cfg.rig.width, cfg.rig.height);
    let pose = |p: &PoseSpec| {
        Camera::look_at(
            Vec3::from(p.eye),
            Vec3::from(p.target),
            Vec3::from(p.up),
            intr,
        )
    };
    if !cfg.render.poses.is_empty() {
        return cfg.render.poses.iter().map(pose).collect();
    }
    let (lo, hi) = mesh.bbox();
    let center = (lo + hi) * 0.5;
    let radius = (rig.camera(0).position() - center).norm();
    let el = cfg.render.orbit_elevation_deg.to_radians();
    let n = cfg.render.orbit_frames;
    (0..n)
        .map(|k| {
            let az = (360.0 * k as f64 / n as f64).to_radians();
            let eye =
                center + Vec3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos()) * radius;
            Camera::look_at(eye, center, Vec3::y(), intr)
        })
        .collect()
}

/// Free-view frames: bakes the rig images onto the mesh as the base render
/// and composites the nearest rig views over it at every camera.
pub fn render_frames(
    cfg: &RunConfig,
    mesh: &TriMesh,
    rig: &ViewRig,
    images: &[Array3<f64>],
    cameras: &[Camera],
    provider: &dyn BlendWeightProvider,
    exec: Execution,
) -> Result<(TriMesh, Vec<Array3<f64>>)> {
    let rig_cams = rig.cameras();
    let baked = bake_vertex_colors(mesh, &rig_cams, images, &cfg.bake, exec)
        .map_err(|e| e.at("postprocess", "bake"))?;
    let rig_gbuffers: Vec<_> = exec.map(rig.len(), |v| {
        rasterize(
            mesh,
            &rig_cams[v],
            RasterOptions {
                normals: NormalMode::Smooth,
                exec: Execution::Sequential,
            },
        )
    });
    let abs_tol = cfg.tolerance.abs_frac * mesh.diagonal();
    let frames = exec.try_map(cameras.len(), |k| -> Result<Array3<f64>> {
        let cam = &cameras[k];
        let (base, gb) = render_vertex_colors(&baked, cam, BACKGROUND, Execution::Sequential)?;
        let view = blend_novel_view(
            &crate::postprocess::NovelViewInputs {
                rig,
                images,
                rig_gbuffers: &rig_gbuffers,
                novel_cam: cam,
                novel_gb: &gb,
                base: &base,
                abs_tol,
                rel_tol: cfg.tolerance.rel,
                exec: Execution::Sequential,
            },
            provider,
        )
        .map_err(|e| e.at("postprocess", format!("frame {k}")))?;
        Ok(view.image)
    })?;
    Ok((baked, frames))
}

#[derive(Debug, Clone)]
pub struct RenderSummary {
    pub frames: usize,
    pub manifest: Manifest,
}

pub fn run_render(cfg: &RunConfig, mesh_path: &Path, images: &[PathBuf]) -> Result<RenderSummary> {
    cfg.validate()?;
    let out = output_dir(cfg)?;
    let hash = config_hash(cfg)?;
    crate::exec::with_workers(cfg.workers, || {
        let mut clock = Clock::new();
        let exec = execution(cfg);
        let mesh =
            TriMesh::read_obj(mesh_path).map_err(|e| Error::config("--mesh", e.to_string()))?;
        let rig = build_rig(&cfg.rig, mesh.bbox())?;
        let imgs = read_inputs(images, rig.len(), "--images")?;
        for (v, img) in imgs.iter().enumerate() {
            if img.dim() != (3, cfg.rig.height, cfg.rig.width) {
                return Err(Error::config(
                    "--images",
                    format!(
                        "view {v} is {:?}, rig needs 3x{}x{}",
                        img.dim(),
                        cfg.rig.height,
                        cfg.rig.width
                    ),
                ));
            }
        }
        let cams = render_cameras(cfg, &mesh, &rig)?;
        clock.lap("load");
        let (baked, frames) = render_frames(cfg, &mesh, &rig, &imgs, &cams, &cfg.blend, exec)?;
        clock.lap("render");
        let mut bundle = Bundle::create(&out)?;
        let p = bundle.path("baked.obj")?;
        baked.write_obj(&p)?;
        for (k, f) in frames.iter().enumerate() {
            bundle.png(&format!("frames/frame_{k:03}.png"), f)?;
        }
        let manifest = bundle.finish(&hash, cfg.seed, &clock.done())?;
        Ok(RenderSummary {
            frames: frames.len(),
            manifest,
        })
    })
}

/// Cross-view consistency of externally produced rig images over the
/// configured scene.
pub fn run_eval(cfg: &RunConfig, images: &[PathBuf]) -> Result<MetricsReport> {
    cfg.validate()?;
    let out = output_dir(cfg)?;
    let hash = config_hash(cfg)?;
    crate::exec::with_workers(cfg.workers, || {
        let mut clock = Clock::new();
        let exec = execution(cfg);
        let mesh = load_mesh(cfg)?;
        let rig = build_rig(&cfg.rig, mesh.bbox())?;
        let geometry = SceneGeometry::build(&mesh, rig.cameras(), cfg.tolerance, exec)?;
        let imgs = read_inputs(images, rig.len(), "--images")?;
        let report = cross_view_consistency(&imgs, &rig, &geometry, cfg.eval.psnr_cap)
            .map_err(|e| e.at("pipeline", "metrics"))?;
        clock.lap("eval");
        let mut bundle = Bundle::create(&out)?;
        let p = bundle.path("metrics.csv")?;
        report.write_csv(&p)?;
        bundle.json("metrics.json", &report)?;
        bundle.finish(&hash, cfg.seed, &clock.done())?;
        Ok(report)
    })
}

/// Ground-truth renders of texture `variant` at `cameras`.
pub fn ground_truth_frames(
    mesh: &TriMesh,
    cameras: &[Camera],
    variant: usize,
    exec: Execution,
) -> Vec<Array3<f64>> {
    exec.map(cameras.len(), |k| {
        render_textured(mesh, &cameras[k], variant, Execution::Sequential)
    })
}

/// Normal maps of `mesh` at every rig view in the exported condition
/// encoding.
pub fn normal_conditions(mesh: &TriMesh, rig: &ViewRig, exec: Execution) -> Vec<Array3<f64>> {
    exec.map(rig.len(), |v| {
        let cam = rig.camera(v);
        let gb = rasterize(
            mesh,
            cam,
            RasterOptions {
                normals: NormalMode::Smooth,
                exec: Execution::Sequential,
            },
        );
        conditions_from_gbuffer(mesh, cam, &gb).normal
    })
}
