use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Camera, GBuffer};

use super::WarpMap;

/// Constants of the occlusion weight `(n . d) w_s + w_c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcclusionParams {
    pub w_s: f64,
    pub w_c: f64,
}

impl Default for OcclusionParams {
    fn default() -> Self {
        Self { w_s: 0.2, w_c: 1.0 }
    }
}

impl OcclusionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.w_s >= 0.0) || !self.w_s.is_finite() {
            return Err(Error::config("occlusion.w_s", "must be finite and >= 0"));
        }
        if !(self.w_c > 0.0) || !self.w_c.is_finite() {
            return Err(Error::config("occlusion.w_c", "must be finite and > 0"));
        }
        Ok(())
    }
}

/// Per-pixel blending weights from a source view into a target view.
#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionMap {
    pub weights: Array2<f64>,
}

/// Occlusion weights for target `dst` seen from `src_cam`.
///
/// Zero wherever `warp` (built for the same pair) has no sample, so the map
/// shares the warp's visibility test. Back-facing normals are kept as they
/// are; the weight is floored at zero only when `w_s > w_c`.
pub fn occlusion_weights(
    dst: &GBuffer,
    src_cam: &Camera,
    warp: &WarpMap,
    params: OcclusionParams,
) -> OcclusionMap {
    let o = src_cam.position();
    let valid = warp.mask();
    let weights = Array2::from_shape_fn((dst.height, dst.width), |(y, x)| {
        if !valid[[y, x]] {
            return 0.0;
        }
        let p = dst.hit_point(y, x);
        let dir = o - p;
        let len = dir.norm();
        if len == 0.0 {
            return params.w_c;
        }
        let cos = dst.normal_at(y, x).dot(&(dir / len));
        (cos * params.w_s + params.w_c).max(0.0)
    });
    OcclusionMap { weights }
}
