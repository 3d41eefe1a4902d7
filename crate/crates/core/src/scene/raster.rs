use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::exec::Execution;

use super::{Camera, TriMesh, Vec3};

/// Marks pixels without a hit in [`GBuffer::face`].
pub const NO_FACE: usize = usize::MAX;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalMode {
    #[default]
    Flat,
    Smooth,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RasterOptions {
    pub normals: NormalMode,
    pub exec: Execution,
}

/// Per-pixel rasterization products for one view. All normals and hit points
/// are in world coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct GBuffer {
    pub width: usize,
    pub height: usize,
    /// Camera-space depth, `+inf` at misses.
    pub depth: Array2<f64>,
    /// `(h, w, 3)` unit normals, zero at misses.
    pub normal: Array3<f64>,
    pub mask: Array2<bool>,
    /// `(h, w, 3)` intersection points, zero at misses.
    pub hit: Array3<f64>,
    /// Winning face per pixel or [`NO_FACE`].
    pub face: Array2<usize>,
    /// `(h, w, 3)` perspective-correct barycentrics of the hit point.
    pub bary: Array3<f64>,
}

impl GBuffer {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            depth: Array2::from_elem((height, width), f64::INFINITY),
            normal: Array3::zeros((height, width, 3)),
            mask: Array2::from_elem((height, width), false),
            hit: Array3::zeros((height, width, 3)),
            face: Array2::from_elem((height, width), NO_FACE),
            bary: Array3::zeros((height, width, 3)),
        }
    }

    pub fn covered(&self, y: usize, x: usize) -> bool {
        self.mask[[y, x]]
    }

    pub fn hit_point(&self, y: usize, x: usize) -> Vec3 {
        Vec3::new(
            self.hit[[y, x, 0]],
            self.hit[[y, x, 1]],
            self.hit[[y, x, 2]],
        )
    }

    pub fn normal_at(&self, y: usize, x: usize) -> Vec3 {
        Vec3::new(
            self.normal[[y, x, 0]],
            self.normal[[y, x, 1]],
            self.normal[[y, x, 2]],
        )
    }

    pub fn coverage(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

struct ScreenTri {
    face: usize,
    p: [(f64, f64); 3],
    inv_z: [f64; 3],
    area: f64,
    x0: usize,
    x1: usize,
}

#[derive(Clone, Copy)]
struct Fragment {
    depth: f64,
    face: usize,
    bary: [f64; 3],
}

fn edge(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

/// Pixel index range whose centers may fall inside `[lo, hi]`.
fn pixel_span(lo: f64, hi: f64, n: usize) -> Option<(usize, usize)> {
    let a = (lo - 0.5).ceil().max(0.0);
    let b = (hi - 0.5).floor().min(n as f64 - 1.0);
    if a > b {
        None
    } else {
        Some((a as usize, b as usize))
    }
}

/// Depth-buffered rasterization of `mesh` as seen by `cam`.
///
/// Triangles are not culled by orientation. Ties in depth keep the lower
/// face index. Triangles reaching behind the camera plane are skipped.
pub fn rasterize(mesh: &TriMesh, cam: &Camera, opts: RasterOptions) -> GBuffer {
    let (w, h) = (cam.width(), cam.height());
    let mut gb = GBuffer::empty(w, h);
    if mesh.is_empty() {
        return gb;
    }
    let k = cam.intrinsics;
    let cam_pts: Vec<Vec3> = mesh.vertices().iter().map(|v| cam.to_camera(v)).collect();
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); h];
    let mut tris = Vec::new();
    for (f, face) in mesh.faces().iter().enumerate() {
        let c = face.map(|v| cam_pts[v]);
        if c.iter().any(|p| p.z <= 1e-12) {
            continue;
        }
        let p = c.map(|q| (k.fx * q.x / q.z + k.cx, k.fy * q.y / q.z + k.cy));
        let area = edge(p[0], p[1], p[2]);
        if area == 0.0 || !area.is_finite() {
            continue;
        }
        let xs = p.map(|q| q.0);
        let ys = p.map(|q| q.1);
        let min = |a: [f64; 3]| a[0].min(a[1]).min(a[2]);
        let max = |a: [f64; 3]| a[0].max(a[1]).max(a[2]);
        let (Some((x0, x1)), Some((y0, y1))) = (
            pixel_span(min(xs), max(xs), w),
            pixel_span(min(ys), max(ys), h),
        ) else {
            continue;
        };
        let idx = tris.len();
        tris.push(ScreenTri {
            face: f,
            p,
            inv_z: c.map(|q| 1.0 / q.z),
            area,
            x0,
            x1,
        });
        for row in &mut rows[y0..=y1] {
            row.push(idx);
        }
    }

    let row_frags: Vec<Vec<Option<Fragment>>> = opts.exec.map(h, |y| {
        let mut out: Vec<Option<Fragment>> = vec![None; w];
        let py = y as f64 + 0.5;
        for &ti in &rows[y] {
            let t = &tris[ti];
            for (x, slot) in out.iter_mut().enumerate().take(t.x1 + 1).skip(t.x0) {
                let pp = (x as f64 + 0.5, py);
                let e0 = edge(t.p[1], t.p[2], pp);
                let e1 = edge(t.p[2], t.p[0], pp);
                let e2 = edge(t.p[0], t.p[1], pp);
                let inside = if t.area > 0.0 {
                    e0 >= 0.0 && e1 >= 0.0 && e2 >= 0.0
                } else {
                    e0 <= 0.0 && e1 <= 0.0 && e2 <= 0.0
                };
                if !inside {
                    continue;
                }
                let l = [e0 / t.area, e1 / t.area, e2 / t.area];
                let wz = [l[0] * t.inv_z[0], l[1] * t.inv_z[1], l[2] * t.inv_z[2]];
                let inv = wz[0] + wz[1] + wz[2];
                let depth = 1.0 / inv;
                if slot.is_none_or(|f| depth < f.depth) {
                    *slot = Some(Fragment {
                        depth,
                        face: t.face,
                        bary: [wz[0] / inv, wz[1] / inv, wz[2] / inv],
                    });
                }
            }
        }
        out
    });

    let vertex_normals = match opts.normals {
        NormalMode::Smooth => Some(mesh.vertex_normals()),
        NormalMode::Flat => None,
    };
    let face_normals: Vec<Vec3> = (0..mesh.faces().len())
        .map(|f| mesh.face_normal(f))
        .collect();
    for (y, row) in row_frags.into_iter().enumerate() {
        for (x, frag) in row.into_iter().enumerate() {
            let Some(frag) = frag else { continue };
            let face = mesh.faces()[frag.face];
            let b = frag.bary;
            let p = mesh.vertices()[face[0]] * b[0]
                + mesh.vertices()[face[1]] * b[1]
                + mesh.vertices()[face[2]] * b[2];
            let n = match &vertex_normals {
                Some(vn) => {
                    let s = vn[face[0]] * b[0] + vn[face[1]] * b[1] + vn[face[2]] * b[2];
                    let len = s.norm();
                    if len > 0.0 {
                        s / len
                    } else {
                        face_normals[frag.face]
                    }
                }
                None => face_normals[frag.face],
            };
            gb.depth[[y, x]] = frag.depth;
            gb.mask[[y, x]] = true;
            gb.face[[y, x]] = frag.face;
            for c in 0..3 {
                gb.hit[[y, x, c]] = p[c];
                gb.normal[[y, x, c]] = n[c];
                gb.bary[[y, x, c]] = b[c];
            }
        }
    }
    gb
}
