use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::scene::{Camera, GBuffer, Vec3};

/// Visibility tolerance: a point is visible to a view when its projected
/// depth is within `max(abs_frac * scene_diagonal, rel * depth)` of the
/// view's depth buffer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepthTolerance {
    pub abs_frac: f64,
    pub rel: f64,
}

impl Default for DepthTolerance {
    fn default() -> Self {
        Self {
            abs_frac: 1e-4,
            rel: 1e-3,
        }
    }
}

impl DepthTolerance {
    pub fn validate(&self) -> Result<()> {
        if !(self.abs_frac >= 0.0) || !(self.rel >= 0.0) {
            return Err(Error::config("warp.tolerance", "tolerances must be >= 0"));
        }
        Ok(())
    }
}

/// Footprint of a point in a source view, in pixel-index coordinates
/// (pixel centers at integers), when the point is visible there.
pub fn visible_footprint(
    p: &Vec3,
    cam: &Camera,
    gb: &GBuffer,
    abs_tol: f64,
    rel_tol: f64,
) -> Option<(f64, f64)> {
    let (u, v, z) = cam.project(p)?;
    let (w, h) = (gb.width as f64, gb.height as f64);
    if !(u >= 0.0 && v >= 0.0 && u < w && v < h) {
        return None;
    }
    let (sx, sy) = (u - 0.5, v - 0.5);
    let src_depth = footprint_depth(gb, sx, sy)?;
    if (z - src_depth).abs() <= abs_tol.max(rel_tol * z) {
        Some((sx, sy))
    } else {
        None
    }
}

fn clamp_index(s: f64, n: usize) -> (usize, usize, f64) {
    let s = s.clamp(0.0, (n - 1) as f64);
    let mut lo = s.floor() as usize;
    let mut t = s - lo as f64;
    if t < 1e-9 {
        t = 0.0;
    } else if t > 1.0 - 1e-9 {
        lo = (lo + 1).min(n - 1);
        t = 0.0;
    }
    (lo, (lo + 1).min(n - 1), t)
}

/// Depth buffer value at a sub-pixel footprint: bilinear in inverse depth
/// when all four neighbours are covered, else the nearest pixel.
fn footprint_depth(gb: &GBuffer, sx: f64, sy: f64) -> Option<f64> {
    let (x0, x1, tx) = clamp_index(sx, gb.width);
    let (y0, y1, ty) = clamp_index(sy, gb.height);
    let quad = [(y0, x0), (y0, x1), (y1, x0), (y1, x1)];
    if quad.iter().all(|&(y, x)| gb.mask[[y, x]]) {
        let inv = (1.0 - ty) * ((1.0 - tx) / gb.depth[[y0, x0]] + tx / gb.depth[[y0, x1]])
            + ty * ((1.0 - tx) / gb.depth[[y1, x0]] + tx / gb.depth[[y1, x1]]);
        return Some(1.0 / inv);
    }
    let nx = (sx.round().max(0.0) as usize).min(gb.width - 1);
    let ny = (sy.round().max(0.0) as usize).min(gb.height - 1);
    gb.mask[[ny, nx]].then(|| gb.depth[[ny, nx]])
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Taps {
    idx: [usize; 4],
    w: [f64; 4],
}

/// Sparse gather from a source view into a destination view.
///
/// Each valid destination pixel is a convex combination of at most four
/// covered source pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpMap {
    width: usize,
    height: usize,
    src_width: usize,
    src_height: usize,
    taps: Vec<Option<Taps>>,
}

/// Warped image plus the destination pixels that received a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpResult {
    pub image: Array3<f64>,
    pub mask: Array2<bool>,
}

impl WarpMap {
    /// Destination-driven warp: each covered destination pixel looks up its
    /// hit point in the source view.
    pub fn build(
        dst: &GBuffer,
        src_cam: &Camera,
        src: &GBuffer,
        abs_tol: f64,
        rel_tol: f64,
        exec: Execution,
    ) -> Self {
        let (w, h) = (dst.width, dst.height);
        let rows: Vec<Vec<Option<Taps>>> = exec.map(h, |y| {
            (0..w)
                .map(|x| {
                    if !dst.mask[[y, x]] {
                        return None;
                    }
                    let p = dst.hit_point(y, x);
                    let (sx, sy) = visible_footprint(&p, src_cam, src, abs_tol, rel_tol)?;
                    gather_taps(src, sx, sy)
                })
                .collect()
        });
        Self {
            width: w,
            height: h,
            src_width: src.width,
            src_height: src.height,
            taps: rows.into_iter().flatten().collect(),
        }
    }

    /// Identity warp over `mask`.
    pub fn identity(mask: &Array2<bool>) -> Self {
        let (h, w) = mask.dim();
        let taps = mask
            .iter()
            .enumerate()
            .map(|(i, &m)| {
                m.then_some(Taps {
                    idx: [i; 4],
                    w: [1.0, 0.0, 0.0, 0.0],
                })
            })
            .collect();
        Self {
            width: w,
            height: h,
            src_width: w,
            src_height: h,
            taps,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn mask(&self) -> Array2<bool> {
        Array2::from_shape_fn((self.height, self.width), |(y, x)| {
            self.taps[y * self.width + x].is_some()
        })
    }

    pub fn valid_count(&self) -> usize {
        self.taps.iter().filter(|t| t.is_some()).count()
    }

    fn check_src(&self, img: &Array3<f64>) -> Result<()> {
        let (_, h, w) = img.dim();
        if (h, w) != (self.src_height, self.src_width) {
            return Err(Error::contract(format!(
                "warp source is {w}x{h}, expected {}x{}",
                self.src_width, self.src_height
            )));
        }
        Ok(())
    }

    pub fn apply(&self, src: &Array3<f64>) -> Result<WarpResult> {
        self.check_src(src)?;
        let c = src.dim().0;
        let sw = self.src_width;
        let mut image = Array3::zeros((c, self.height, self.width));
        for (i, t) in self.taps.iter().enumerate() {
            let Some(t) = t else { continue };
            let (y, x) = (i / self.width, i % self.width);
            for k in 0..c {
                let mut acc = 0.0;
                for n in 0..4 {
                    if t.w[n] != 0.0 {
                        acc += t.w[n] * src[[k, t.idx[n] / sw, t.idx[n] % sw]];
                    }
                }
                image[[k, y, x]] = acc;
            }
        }
        Ok(WarpResult {
            image,
            mask: self.mask(),
        })
    }

    /// Transpose of [`WarpMap::apply`] on the image part.
    pub fn apply_adjoint(&self, grad: &Array3<f64>) -> Result<Array3<f64>> {
        let (c, h, w) = grad.dim();
        if (h, w) != (self.height, self.width) {
            return Err(Error::contract("warp adjoint: gradient size mismatch"));
        }
        let sw = self.src_width;
        let mut out = Array3::zeros((c, self.src_height, sw));
        for (i, t) in self.taps.iter().enumerate() {
            let Some(t) = t else { continue };
            let (y, x) = (i / self.width, i % self.width);
            for k in 0..c {
                let g = grad[[k, y, x]];
                for n in 0..4 {
                    if t.w[n] != 0.0 {
                        out[[k, t.idx[n] / sw, t.idx[n] % sw]] += t.w[n] * g;
                    }
                }
            }
        }
        Ok(out)
    }
}

fn gather_taps(src: &GBuffer, sx: f64, sy: f64) -> Option<Taps> {
    let (x0, x1, tx) = clamp_index(sx, src.width);
    let (y0, y1, ty) = clamp_index(sy, src.height);
    let pix = [(y0, x0), (y0, x1), (y1, x0), (y1, x1)];
    let mut w = [
        (1.0 - ty) * (1.0 - tx),
        (1.0 - ty) * tx,
        ty * (1.0 - tx),
        ty * tx,
    ];
    for (k, &(y, x)) in pix.iter().enumerate() {
        if !src.mask[[y, x]] {
            w[k] = 0.0;
        }
    }
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return None;
    }
    if total != 1.0 {
        for v in &mut w {
            *v /= total;
        }
    }
    Some(Taps {
        idx: pix.map(|(y, x)| y * src.width + x),
        w,
    })
}

/// Warps `src_image` (channel-major, source view resolution) into the
/// destination view.
pub fn warp_image(
    src_image: &Array3<f64>,
    dst: &GBuffer,
    src_cam: &Camera,
    src: &GBuffer,
    abs_tol: f64,
    rel_tol: f64,
) -> Result<WarpResult> {
    WarpMap::build(dst, src_cam, src, abs_tol, rel_tol, Execution::Sequential).apply(src_image)
}
