use ndarray::{s, Array2, Array3};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::field::LatentField;
use crate::scene::{rasterize, Camera, GBuffer, NormalMode, RasterOptions, TriMesh};

use super::{occlusion_weights, Codec, DepthTolerance, OcclusionMap, OcclusionParams, WarpMap};

/// Block average of a per-pixel map down to latent resolution.
pub fn area_downsample(map: &Array2<f64>, factor: usize) -> Array2<f64> {
    if factor == 1 {
        return map.clone();
    }
    let (h, w) = map.dim();
    let norm = 1.0 / (factor * factor) as f64;
    Array2::from_shape_fn((h / factor, w / factor), |(y, x)| {
        map.slice(s![
            y * factor..(y + 1) * factor,
            x * factor..(x + 1) * factor
        ])
        .sum()
            * norm
    })
}

pub fn mask_to_f64(mask: &Array2<bool>) -> Array2<f64> {
    mask.mapv(|m| if m { 1.0 } else { 0.0 })
}

/// Decode-warp-encode of a latent from source view `j` into target view `i`.
///
/// Returns the transported latent and the warp mask area-averaged to latent
/// resolution.
pub fn transport_signal(
    x0_j: &LatentField,
    codec: &dyn Codec,
    warp: &WarpMap,
) -> Result<(LatentField, Array2<f64>)> {
    let image = codec.decode(x0_j.data())?;
    let warped = warp.apply(&image)?;
    let latent = codec.encode(&warped.image)?;
    let validity = area_downsample(&mask_to_f64(&warped.mask), codec.ratio());
    Ok((LatentField::latent(latent), validity))
}

/// Linear map of [`transport_signal`] applied to a gradient at the target,
/// pulled back to the source latent.
pub fn transport_adjoint(
    grad: &Array3<f64>,
    codec: &dyn Codec,
    warp: &WarpMap,
) -> Result<Array3<f64>> {
    let g_img = codec.encode_adjoint(grad)?;
    let g_src = warp.apply_adjoint(&g_img)?;
    codec.decode_adjoint(&g_src)
}

/// Rasterized views of the geometry proxy shared by warping, occlusion
/// weights and evaluation.
#[derive(Debug, Clone)]
pub struct SceneGeometry {
    pub cameras: Vec<Camera>,
    pub gbuffers: Vec<GBuffer>,
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub exec: Execution,
}

impl SceneGeometry {
    pub fn build(
        mesh: &TriMesh,
        cameras: Vec<Camera>,
        tol: DepthTolerance,
        exec: Execution,
    ) -> Result<Self> {
        tol.validate()?;
        let gbuffers = exec.map(cameras.len(), |i| {
            rasterize(
                mesh,
                &cameras[i],
                RasterOptions {
                    normals: NormalMode::Smooth,
                    exec: crate::exec::Execution::Sequential,
                },
            )
        });
        Ok(Self {
            cameras,
            gbuffers,
            abs_tol: tol.abs_frac * mesh.diagonal(),
            rel_tol: tol.rel,
            exec,
        })
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    fn check(&self, i: usize) -> Result<()> {
        if i >= self.len() {
            return Err(Error::contract(format!(
                "view {i} outside geometry of {} views",
                self.len()
            )));
        }
        Ok(())
    }

    /// Warp from source `j` into target `i`.
    pub fn warp_map(&self, j: usize, i: usize) -> Result<WarpMap> {
        self.check(i)?;
        self.check(j)?;
        Ok(WarpMap::build(
            &self.gbuffers[i],
            &self.cameras[j],
            &self.gbuffers[j],
            self.abs_tol,
            self.rel_tol,
            Execution::Sequential,
        ))
    }

    /// Occlusion weights `M_j^i` for target `i` and source `j`.
    pub fn occlusion(&self, i: usize, j: usize, params: OcclusionParams) -> Result<OcclusionMap> {
        let warp = self.warp_map(j, i)?;
        Ok(occlusion_weights(
            &self.gbuffers[i],
            &self.cameras[j],
            &warp,
            params,
        ))
    }
}
