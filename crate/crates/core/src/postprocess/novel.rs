use ndarray::{Array2, Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::scene::{Camera, GBuffer, Track, ViewRig};
use crate::warpfield::WarpMap;

/// Per-pixel weights of the two warped sources; the rest goes to the layer
/// underneath.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendWeights {
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
}

impl BlendWeights {
    pub fn zeros(dims: (usize, usize)) -> Self {
        Self {
            w1: Array2::zeros(dims),
            w2: Array2::zeros(dims),
        }
    }

    pub fn validate(&self, dims: (usize, usize)) -> Result<()> {
        if self.w1.dim() != dims || self.w2.dim() != dims {
            return Err(Error::contract("blend weights do not match the view"));
        }
        let ok = Zip::from(&self.w1).and(&self.w2).all(|&a, &b| {
            (0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b) && a + b <= 1.0 + 1e-12
        });
        if !ok {
            return Err(Error::contract(
                "blend weights must lie in [0, 1] with w1 + w2 <= 1",
            ));
        }
        Ok(())
    }
}

/// What a weight provider sees for one stage.
#[derive(Debug, Clone, Copy)]
pub struct WeightInputs<'a> {
    pub warped: [&'a Array3<f64>; 2],
    /// Source depth minus the point's depth in that source, 0 where invalid.
    pub disparity: [&'a Array2<f64>; 2],
    pub valid: [&'a Array2<bool>; 2],
    /// Angles in radians between the novel and source optical axes.
    pub angles: [f64; 2],
    /// Depth range of the novel view's covered pixels.
    pub depth_range: f64,
}

pub trait BlendWeightProvider: Sync {
    fn weights(&self, inputs: &WeightInputs<'_>) -> Result<BlendWeights>;
}

/// Deterministic stand-in for a learned blending network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeuristicBlend {
    /// Disparity falloff as a fraction of the depth range.
    pub tau_fraction: f64,
}

impl Default for HeuristicBlend {
    fn default() -> Self {
        Self { tau_fraction: 0.05 }
    }
}

impl BlendWeightProvider for HeuristicBlend {
    fn weights(&self, inputs: &WeightInputs<'_>) -> Result<BlendWeights> {
        if !(self.tau_fraction > 0.0) {
            return Err(Error::config("blend.tau_fraction", "must be positive"));
        }
        let tau = self.tau_fraction * inputs.depth_range.max(1e-9);
        Ok(heuristic_blend_weights(
            inputs.disparity,
            inputs.valid,
            inputs.angles,
            tau,
        ))
    }
}

/// `w_k = valid_k * a_k * exp(-|O_k| / tau)`, with angle weights `a_1 =
/// t_2 / (t_1 + t_2)` and `a_2 = t_1 / (t_1 + t_2)`. The angle weights are
/// renormalized over the valid sources, so `w_1 + w_2 <= 1`.
pub fn heuristic_blend_weights(
    disparity: [&Array2<f64>; 2],
    valid: [&Array2<bool>; 2],
    angles: [f64; 2],
    tau: f64,
) -> BlendWeights {
    let sum = angles[0] + angles[1];
    let a = if sum > 0.0 {
        [angles[1] / sum, angles[0] / sum]
    } else {
        [0.5, 0.5]
    };
    let dims = disparity[0].dim();
    let mut out = BlendWeights::zeros(dims);
    for y in 0..dims.0 {
        for x in 0..dims.1 {
            let v = [valid[0][[y, x]], valid[1][[y, x]]];
            let norm: f64 = (0..2).filter(|&k| v[k]).map(|k| a[k]).sum();
            if norm <= 0.0 {
                continue;
            }
            let w = |k: usize| {
                if v[k] {
                    a[k] / norm * (-disparity[k][[y, x]].abs() / tau).exp()
                } else {
                    0.0
                }
            };
            out.w1[[y, x]] = w(0);
            out.w2[[y, x]] = w(1);
        }
    }
    out
}

/// The two views of `track` whose optical axes are closest to `cam`'s,
/// ties to the lower index.
pub fn nearest_views(rig: &ViewRig, track: Track, cam: &Camera) -> Result<[usize; 2]> {
    let mut c: Vec<(f64, usize)> = rig
        .views()
        .iter()
        .enumerate()
        .filter(|(_, v)| v.track == track)
        .map(|(i, v)| (cam.axis_angle(&v.camera), i))
        .collect();
    if c.len() < 2 {
        return Err(Error::config(
            "rig",
            format!("{track:?} track needs at least two views"),
        ));
    }
    c.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok([c[0].1, c[1].1])
}

/// `W1 * I1 + W2 * I2 + (1 - W1 - W2) * under`.
pub fn composite(
    i1: &Array3<f64>,
    i2: &Array3<f64>,
    under: &Array3<f64>,
    w: &BlendWeights,
) -> Array3<f64> {
    let mut out = under.clone();
    for ((c, y, x), v) in out.indexed_iter_mut() {
        let (a, b) = (w.w1[[y, x]], w.w2[[y, x]]);
        *v = a * i1[[c, y, x]] + b * i2[[c, y, x]] + (1.0 - a - b) * under[[c, y, x]];
    }
    out
}

#[derive(Debug, Clone)]
pub struct StageTrace {
    pub sources: [usize; 2],
    pub warped: [Array3<f64>; 2],
    pub valid: [Array2<bool>; 2],
    pub disparity: [Array2<f64>; 2],
    pub weights: BlendWeights,
}

#[derive(Debug, Clone)]
pub struct NovelView {
    pub image: Array3<f64>,
    /// Result after the full-body stage.
    pub coarse: Array3<f64>,
    pub stages: [StageTrace; 2],
}

pub struct NovelViewInputs<'a> {
    pub rig: &'a ViewRig,
    pub images: &'a [Array3<f64>],
    pub rig_gbuffers: &'a [GBuffer],
    pub novel_cam: &'a Camera,
    pub novel_gb: &'a GBuffer,
    /// Base render at the novel view, e.g. of the baked mesh.
    pub base: &'a Array3<f64>,
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub exec: Execution,
}

fn disparity(novel: &GBuffer, cam: &Camera, src: &GBuffer, valid: &Array2<bool>) -> Array2<f64> {
    Array2::from_shape_fn(valid.dim(), |(y, x)| {
        if !valid[[y, x]] {
            return 0.0;
        }
        let p = novel.hit_point(y, x);
        let Some((u, v, z)) = cam.project(&p) else {
            return 0.0;
        };
        let sx = ((u - 0.5).round().max(0.0) as usize).min(src.width - 1);
        let sy = ((v - 0.5).round().max(0.0) as usize).min(src.height - 1);
        if src.mask[[sy, sx]] {
            src.depth[[sy, sx]] - z
        } else {
            0.0
        }
    })
}

fn pair<T>(v: Vec<T>) -> [T; 2] {
    let mut it = v.into_iter();
    match (it.next(), it.next()) {
        (Some(a), Some(b)) => [a, b],
        _ => unreachable!("two sources per stage"),
    }
}

fn stage(
    inp: &NovelViewInputs<'_>,
    track: Track,
    provider: &dyn BlendWeightProvider,
    range: f64,
) -> Result<StageTrace> {
    let sources = nearest_views(inp.rig, track, inp.novel_cam)?;
    let mut warped = Vec::with_capacity(2);
    let mut valid = Vec::with_capacity(2);
    let mut disp = Vec::with_capacity(2);
    for &j in &sources {
        let cam = inp.rig.camera(j);
        let map = WarpMap::build(
            inp.novel_gb,
            cam,
            &inp.rig_gbuffers[j],
            inp.abs_tol,
            inp.rel_tol,
            inp.exec,
        );
        let r = map.apply(&inp.images[j])?;
        disp.push(disparity(inp.novel_gb, cam, &inp.rig_gbuffers[j], &r.mask));
        warped.push(r.image);
        valid.push(r.mask);
    }
    let angles = sources.map(|j| inp.novel_cam.axis_angle(inp.rig.camera(j)));
    let weights = provider.weights(&WeightInputs {
        warped: [&warped[0], &warped[1]],
        disparity: [&disp[0], &disp[1]],
        valid: [&valid[0], &valid[1]],
        angles,
        depth_range: range,
    })?;
    weights.validate(inp.novel_gb.mask.dim())?;
    Ok(StageTrace {
        sources,
        warped: pair(warped),
        valid: pair(valid),
        disparity: pair(disp),
        weights,
    })
}

/// Two-stage compositing at a novel view: full-body sources over the base
/// render, then upper-body sources over that.
pub fn blend_novel_view(
    inp: &NovelViewInputs<'_>,
    provider: &dyn BlendWeightProvider,
) -> Result<NovelView> {
    let n = inp.rig.len();
    if inp.images.len() != n || inp.rig_gbuffers.len() != n {
        return Err(Error::config(
            "images",
            format!("need {n} images and g-buffers"),
        ));
    }
    let dims = (inp.novel_gb.height, inp.novel_gb.width);
    if inp.base.dim() != (3, dims.0, dims.1) {
        return Err(Error::contract("base render does not match the novel view"));
    }
    for (j, img) in inp.images.iter().enumerate() {
        let gb = &inp.rig_gbuffers[j];
        if img.dim() != (3, gb.height, gb.width) {
            return Err(Error::contract(format!(
                "view {j}: image does not match its g-buffer"
            )));
        }
    }
    let depths: Vec<f64> = inp
        .novel_gb
        .depth
        .iter()
        .zip(inp.novel_gb.mask.iter())
        .filter(|(_, &m)| m)
        .map(|(&d, _)| d)
        .collect();
    let range = match (
        depths.iter().cloned().reduce(f64::min),
        depths.iter().cloned().reduce(f64::max),
    ) {
        (Some(lo), Some(hi)) => hi - lo,
        _ => 0.0,
    };
    let fb = stage(inp, Track::FullBody, provider, range)?;
    let coarse = composite(&fb.warped[0], &fb.warped[1], inp.base, &fb.weights);
    let ub = stage(inp, Track::UpperBody, provider, range)?;
    let image = composite(&ub.warped[0], &ub.warped[1], &coarse, &ub.weights);
    Ok(NovelView {
        image,
        coarse,
        stages: [fb, ub],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invalid_sources_get_nothing() {
        let d = Array2::zeros((2, 2));
        let v = Array2::from_elem((2, 2), false);
        let w = heuristic_blend_weights([&d, &d], [&v, &v], [0.1, 0.2], 0.05);
        assert!(w.w1.iter().chain(w.w2.iter()).all(|&x| x == 0.0));
    }

    #[test]
    fn symmetric_inputs_split_evenly() {
        let d = Array2::from_elem((1, 3), 0.01);
        let v = Array2::from_elem((1, 3), true);
        let w = heuristic_blend_weights([&d, &d], [&v, &v], [0.3, 0.3], 0.05);
        assert_eq!(w.w1, w.w2);
        w.validate((1, 3)).unwrap();
    }

    #[test]
    fn disparity_ratio_is_exponential() {
        let d1 = Array2::zeros((1, 1));
        let d2 = Array2::from_elem((1, 1), 0.2);
        let v = Array2::from_elem((1, 1), true);
        let tau = 0.05;
        let w = heuristic_blend_weights([&d1, &d2], [&v, &v], [0.4, 0.4], tau);
        let ratio = w.w1[[0, 0]] / w.w2[[0, 0]];
        assert!((ratio - (0.2f64 / 0.05).exp()).abs() < 1e-9 * ratio);
        assert!((w.w1[[0, 0]] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_valid_source_takes_full_angle_weight() {
        let d = Array2::zeros((1, 1));
        let yes = Array2::from_elem((1, 1), true);
        let no = Array2::from_elem((1, 1), false);
        let w = heuristic_blend_weights([&d, &d], [&no, &yes], [0.1, 0.7], 0.05);
        assert_eq!(w.w2[[0, 0]], 1.0);
        assert_eq!(w.w1[[0, 0]], 0.0);
    }

    #[test]
    fn composite_is_affine() {
        let a = Array3::from_elem((3, 2, 2), 1.0);
        let b = Array3::from_elem((3, 2, 2), 2.0);
        let base = Array3::from_elem((3, 2, 2), 4.0);
        let w = BlendWeights {
            w1: Array2::from_elem((2, 2), 0.25),
            w2: Array2::from_elem((2, 2), 0.5),
        };
        let out = composite(&a, &b, &base, &w);
        assert!(out.iter().all(|&v| (v - (0.25 + 1.0 + 1.0)).abs() < 1e-15));
        let zero = composite(&a, &b, &base, &BlendWeights::zeros((2, 2)));
        assert_eq!(zero, base);
    }
}
