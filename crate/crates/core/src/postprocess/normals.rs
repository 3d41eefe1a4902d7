use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::scene::{rasterize, Camera, NormalMode, RasterOptions, TriMesh, Vec3, NO_FACE};

use super::sobel::{clamp_offset, sobel_gradient, SOBEL_TAPS};

/// A per-view normal map to refine against, shape `(3, h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalTarget {
    pub normals: Array3<f64>,
    pub mask: Array2<bool>,
}

impl NormalTarget {
    pub fn new(normals: Array3<f64>, mask: Array2<bool>) -> Result<Self> {
        let (c, h, w) = normals.dim();
        if c != 3 || mask.dim() != (h, w) {
            return Err(Error::contract(format!(
                "normal target {:?} with mask {:?}",
                normals.dim(),
                mask.dim()
            )));
        }
        if normals.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("normal target has non-finite values"));
        }
        Ok(Self { normals, mask })
    }

    /// From RGB-encoded normals in `[0, 1]`.
    pub fn from_encoded(rgb: &Array3<f64>, mask: Array2<bool>) -> Result<Self> {
        Self::new(rgb.mapv(|v| 2.0 * v - 1.0), mask)
    }
}

fn triple(a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    a.dot(&b.cross(c))
}

/// Ray/plane barycentrics `(u, v)` of the hit `p0 + u e1 + v e2`.
struct RayHit {
    u: f64,
    v: f64,
    det: f64,
    tvec: Vec3,
    e1: Vec3,
    e2: Vec3,
    d: Vec3,
}

fn ray_hit(o: &Vec3, d: &Vec3, [p0, p1, p2]: [Vec3; 3]) -> Option<RayHit> {
    let e1 = p1 - p0;
    let e2 = p2 - p0;
    let det = triple(&e1, d, &e2);
    if det.abs() < 1e-300 {
        return None;
    }
    let tvec = o - p0;
    Some(RayHit {
        u: triple(&tvec, d, &e2) / det,
        v: triple(d, &tvec, &e1) / det,
        det,
        tvec,
        e1,
        e2,
        d: *d,
    })
}

impl RayHit {
    /// Gradients w.r.t. the three corners given `dL/du`, `dL/dv`.
    fn backward(&self, gu: f64, gv: f64) -> [Vec3; 3] {
        let (d, e1, e2, t) = (&self.d, &self.e1, &self.e2, &self.tvec);
        let s = gu * self.u + gv * self.v;
        let g_t = (d.cross(e2) * gu + e1.cross(d) * gv) / self.det;
        let g_e1 = (d.cross(t) * gv - d.cross(e2) * s) / self.det;
        let g_e2 = (t.cross(d) * gu - e1.cross(d) * s) / self.det;
        [-g_t - g_e1 - g_e2, g_e1, g_e2]
    }
}

/// Interpolated, normalized vertex normal at a pixel, plus what the
/// backward pass needs.
struct Shaded {
    n: Vec3,
    m_norm: f64,
    hit: RayHit,
    bary: [f64; 3],
}

fn shade_pixel(
    mesh: &TriMesh,
    vn: &[Vec3],
    cam: &Camera,
    y: usize,
    x: usize,
    f: usize,
) -> Option<Shaded> {
    let o = cam.position();
    let d = cam.ray_direction(x as f64 + 0.5, y as f64 + 0.5);
    let hit = ray_hit(&o, &d, mesh.corners(f))?;
    let bary = [1.0 - hit.u - hit.v, hit.u, hit.v];
    let face = mesh.faces()[f];
    let m: Vec3 = (0..3).map(|k| vn[face[k]] * bary[k]).sum();
    let m_norm = m.norm();
    if !(m_norm > 1e-12) {
        return None;
    }
    Some(Shaded {
        n: m / m_norm,
        m_norm,
        hit,
        bary,
    })
}

/// Smooth-shaded world-space normals for a fixed pixel-to-face assignment.
pub fn shade_normals(mesh: &TriMesh, cam: &Camera, faces: &Array2<usize>) -> NormalTarget {
    let vn = mesh.vertex_normals();
    shade_with(mesh, &vn, cam, faces)
}

fn shade_with(mesh: &TriMesh, vn: &[Vec3], cam: &Camera, faces: &Array2<usize>) -> NormalTarget {
    let (h, w) = faces.dim();
    let mut normals = Array3::zeros((3, h, w));
    let mut mask = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            let f = faces[[y, x]];
            if f == NO_FACE {
                continue;
            }
            if let Some(s) = shade_pixel(mesh, vn, cam, y, x, f) {
                for c in 0..3 {
                    normals[[c, y, x]] = s.n[c];
                }
                mask[[y, x]] = true;
            }
        }
    }
    NormalTarget { normals, mask }
}

/// Rasterize and shade: the normal map the refinement compares.
pub fn render_normals(mesh: &TriMesh, cam: &Camera, exec: Execution) -> NormalTarget {
    shade_normals(mesh, cam, &assign_faces(mesh, cam, exec))
}

pub fn assign_faces(mesh: &TriMesh, cam: &Camera, exec: Execution) -> Array2<usize> {
    rasterize(
        mesh,
        cam,
        RasterOptions {
            normals: NormalMode::Flat,
            exec,
        },
    )
    .face
}

fn check_inputs(cams: &[Camera], targets: &[NormalTarget], faces: &[Array2<usize>]) -> Result<()> {
    if targets.len() != cams.len() {
        return Err(Error::config(
            "targets",
            format!("{} normal targets for {} views", targets.len(), cams.len()),
        ));
    }
    for (i, ((c, t), f)) in cams.iter().zip(targets).zip(faces).enumerate() {
        let dims = (c.height(), c.width());
        if t.mask.dim() != dims || f.dim() != dims {
            return Err(Error::contract(format!(
                "view {i}: target or assignment does not match the camera"
            )));
        }
    }
    Ok(())
}

/// Pixels whose clamped 3x3 neighbourhood is covered in both maps.
pub fn shared_mask(a: &Array2<bool>, b: &Array2<bool>) -> Array2<bool> {
    let (h, w) = a.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        SOBEL_TAPS.iter().all(|&(dy, dx, _, _)| {
            let (yy, xx) = (clamp_offset(y, dy, h), clamp_offset(x, dx, w));
            a[[yy, xx]] && b[[yy, xx]]
        })
    })
}

struct ViewResidual {
    shaded: NormalTarget,
    valid: Array2<bool>,
    rx: Array3<f64>,
    ry: Array3<f64>,
    sum: f64,
    count: usize,
}

fn view_residual(
    mesh: &TriMesh,
    vn: &[Vec3],
    cam: &Camera,
    target: &NormalTarget,
    faces: &Array2<usize>,
) -> Result<ViewResidual> {
    residual(shade_with(mesh, vn, cam, faces), target)
}

fn residual(shaded: NormalTarget, target: &NormalTarget) -> Result<ViewResidual> {
    let valid = shared_mask(&shaded.mask, &target.mask);
    let (mx, my) = sobel_gradient(&shaded.normals)?;
    let (tx, ty) = sobel_gradient(&target.normals)?;
    let mut rx = mx - tx;
    let mut ry = my - ty;
    let mut sum = 0.0;
    for c in 0..3 {
        for ((y, x), &ok) in valid.indexed_iter() {
            if ok {
                sum += rx[[c, y, x]].powi(2) + ry[[c, y, x]].powi(2);
            } else {
                rx[[c, y, x]] = 0.0;
                ry[[c, y, x]] = 0.0;
            }
        }
    }
    let count = valid.iter().filter(|&&v| v).count();
    Ok(ViewResidual {
        shaded,
        valid,
        rx,
        ry,
        sum,
        count,
    })
}

/// Gradient-space normal loss for a fixed assignment, normalized by the
/// number of valid pixels over all views.
pub fn normal_loss_frozen(
    mesh: &TriMesh,
    cams: &[Camera],
    targets: &[NormalTarget],
    faces: &[Array2<usize>],
    exec: Execution,
) -> Result<f64> {
    check_inputs(cams, targets, faces)?;
    let vn = mesh.vertex_normals();
    let views = exec.try_map(cams.len(), |i| {
        view_residual(mesh, &vn, &cams[i], &targets[i], &faces[i])
    })?;
    Ok(normalize(&views))
}

fn normalize(views: &[ViewResidual]) -> f64 {
    let count: usize = views.iter().map(|v| v.count).sum();
    if count == 0 {
        return 0.0;
    }
    views.iter().map(|v| v.sum).sum::<f64>() / count as f64
}

/// Sum over views of `||G(N^m_i) - G(N^p_i)||^2` on shared coverage, per
/// valid pixel.
pub fn normal_refine_loss(
    mesh: &TriMesh,
    cams: &[Camera],
    targets: &[NormalTarget],
    exec: Execution,
) -> Result<f64> {
    let faces = exec.map(cams.len(), |i| {
        assign_faces(mesh, &cams[i], Execution::Sequential)
    });
    normal_loss_frozen(mesh, cams, targets, &faces, exec)
}

/// Loss and its gradient w.r.t. vertex positions with the pixel-to-face
/// assignment held fixed.
pub fn normal_loss_gradient(
    mesh: &TriMesh,
    cams: &[Camera],
    targets: &[NormalTarget],
    faces: &[Array2<usize>],
    exec: Execution,
) -> Result<(f64, Vec<Vec3>)> {
    check_inputs(cams, targets, faces)?;
    let nv = mesh.vertices().len();
    let vn = mesh.vertex_normals();
    let views = exec.try_map(cams.len(), |i| {
        view_residual(mesh, &vn, &cams[i], &targets[i], &faces[i])
    })?;
    let loss = normalize(&views);
    let count: usize = views.iter().map(|v| v.count).sum();
    if count == 0 {
        return Ok((loss, vec![Vec3::zeros(); nv]));
    }
    let scale = 2.0 / count as f64;

    // per view: (position grads, vertex-normal grads)
    let parts = exec.map(cams.len(), |i| {
        let v = &views[i];
        let (_, h, w) = v.rx.dim();
        let mut g_img = Array3::<f64>::zeros((3, h, w));
        for ((y, x), &ok) in v.valid.indexed_iter() {
            if !ok {
                continue;
            }
            for &(dy, dx, kx, ky) in &SOBEL_TAPS {
                let (yy, xx) = (clamp_offset(y, dy, h), clamp_offset(x, dx, w));
                for c in 0..3 {
                    g_img[[c, yy, xx]] += scale * (kx * v.rx[[c, y, x]] + ky * v.ry[[c, y, x]]);
                }
            }
        }
        let mut gp = vec![Vec3::zeros(); nv];
        let mut gn = vec![Vec3::zeros(); nv];
        for y in 0..h {
            for x in 0..w {
                if !v.shaded.mask[[y, x]] {
                    continue;
                }
                let g = Vec3::new(g_img[[0, y, x]], g_img[[1, y, x]], g_img[[2, y, x]]);
                if g == Vec3::zeros() {
                    continue;
                }
                let f = faces[i][[y, x]];
                let Some(s) = shade_pixel(mesh, &vn, &cams[i], y, x, f) else {
                    continue;
                };
                let g_m = (g - s.n * s.n.dot(&g)) / s.m_norm;
                let face = mesh.faces()[f];
                let gb: Vec<f64> = face.iter().map(|&k| vn[k].dot(&g_m)).collect();
                let corners = s.hit.backward(gb[1] - gb[0], gb[2] - gb[0]);
                for k in 0..3 {
                    gp[face[k]] += corners[k];
                    gn[face[k]] += g_m * s.bary[k];
                }
            }
        }
        (gp, gn)
    });
    let mut gp = vec![Vec3::zeros(); nv];
    let mut gn = vec![Vec3::zeros(); nv];
    for (p, n) in parts {
        for k in 0..nv {
            gp[k] += p[k];
            gn[k] += n[k];
        }
    }

    // vertex normal n_k = a_k / |a_k|, a_k = sum of adjacent face cross products
    let mut area = vec![Vec3::zeros(); nv];
    for (f, face) in mesh.faces().iter().enumerate() {
        let a = mesh.face_area_normal(f);
        for &k in face {
            area[k] += a;
        }
    }
    let ga: Vec<Vec3> = (0..nv)
        .map(|k| {
            let len = area[k].norm();
            if len > 0.0 {
                let n = area[k] / len;
                (gn[k] - n * n.dot(&gn[k])) / len
            } else {
                Vec3::zeros()
            }
        })
        .collect();
    for (f, face) in mesh.faces().iter().enumerate() {
        let g: Vec3 = face.iter().map(|&k| ga[k]).sum();
        let [p0, p1, p2] = mesh.corners(f);
        let (e1, e2) = (p1 - p0, p2 - p0);
        let g_e1 = e2.cross(&g);
        let g_e2 = g.cross(&e1);
        gp[face[0]] -= g_e1 + g_e2;
        gp[face[1]] += g_e1;
        gp[face[2]] += g_e2;
    }
    Ok((loss, gp))
}
