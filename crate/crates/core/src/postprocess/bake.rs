use std::cmp::Reverse;
use std::collections::BinaryHeap;

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::scene::{rasterize, Camera, GBuffer, NormalMode, RasterOptions, TriMesh, Vec3};
use serde::{Deserialize, Serialize};

use crate::warpfield::OcclusionParams;

/// Bilinear sample at pixel-index coordinates, clamped to the image.
pub fn sample_bilinear(img: &Array3<f64>, sx: f64, sy: f64) -> Vec3 {
    let (_, h, w) = img.dim();
    let sx = sx.clamp(0.0, (w - 1) as f64);
    let sy = sy.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (tx, ty) = (sx - x0 as f64, sy - y0 as f64);
    let mut out = Vec3::zeros();
    for c in 0..3.min(img.dim().0) {
        out[c] = (1.0 - ty) * ((1.0 - tx) * img[[c, y0, x0]] + tx * img[[c, y0, x1]])
            + ty * ((1.0 - tx) * img[[c, y1, x0]] + tx * img[[c, y1, x1]]);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BakeConfig {
    pub occlusion: OcclusionParams,
    /// A vertex counts as visible when its depth is within this fraction of
    /// the bbox diagonal of the nearest covered depth around its pixel.
    pub depth_tolerance: f64,
}

impl Default for BakeConfig {
    fn default() -> Self {
        Self {
            occlusion: OcclusionParams::default(),
            depth_tolerance: 0.01,
        }
    }
}

/// Pixel-index footprint of a vertex when the depth buffer does not hide it.
pub fn vertex_footprint(p: &Vec3, cam: &Camera, gb: &GBuffer, tol: f64) -> Option<(f64, f64)> {
    let (u, v, z) = cam.project(p)?;
    if !(u >= 0.0 && v >= 0.0 && u < gb.width as f64 && v < gb.height as f64) {
        return None;
    }
    let (sx, sy) = (u - 0.5, v - 0.5);
    let cx = sx.round().clamp(0.0, (gb.width - 1) as f64) as usize;
    let cy = sy.round().clamp(0.0, (gb.height - 1) as f64) as usize;
    let mut nearest = f64::INFINITY;
    for y in cy.saturating_sub(1)..=(cy + 1).min(gb.height - 1) {
        for x in cx.saturating_sub(1)..=(cx + 1).min(gb.width - 1) {
            if gb.mask[[y, x]] {
                nearest = nearest.min(gb.depth[[y, x]]);
            }
        }
    }
    (z <= nearest + tol).then_some((sx, sy))
}

/// Occlusion-weighted average of the image samples at each vertex over the
/// views that see it. Vertices no view sees take the color of the nearest
/// colored vertex along mesh edges.
pub fn bake_vertex_colors(
    mesh: &TriMesh,
    cams: &[Camera],
    images: &[Array3<f64>],
    config: &BakeConfig,
    exec: Execution,
) -> Result<TriMesh> {
    config.occlusion.validate()?;
    if !(config.depth_tolerance >= 0.0) {
        return Err(Error::config("bake.depth_tolerance", "must be >= 0"));
    }
    let params = config.occlusion;
    if images.len() != cams.len() {
        return Err(Error::config(
            "images",
            format!("{} images for {} views", images.len(), cams.len()),
        ));
    }
    for (i, (img, cam)) in images.iter().zip(cams).enumerate() {
        let (c, h, w) = img.dim();
        if c != 3 || h != cam.height() || w != cam.width() {
            return Err(Error::contract(format!(
                "view {i}: image {:?} does not match camera",
                img.dim()
            )));
        }
    }
    let n = mesh.vertices().len();
    let normals = mesh.vertex_normals();
    let tol = config.depth_tolerance * mesh.diagonal();
    let per_view: Vec<Vec<Option<(Vec3, f64)>>> = exec.map(cams.len(), |i| {
        let cam = &cams[i];
        let gb = rasterize(
            mesh,
            cam,
            RasterOptions {
                normals: NormalMode::Smooth,
                exec: Execution::Sequential,
            },
        );
        let o = cam.position();
        mesh.vertices()
            .iter()
            .zip(&normals)
            .map(|(p, nrm)| {
                let (sx, sy) = vertex_footprint(p, cam, &gb, tol)?;
                let dir = o - p;
                let len = dir.norm();
                let cos = if len > 0.0 {
                    nrm.dot(&(dir / len))
                } else {
                    1.0
                };
                let weight = (cos * params.w_s + params.w_c).max(0.0);
                (weight > 0.0).then(|| (sample_bilinear(&images[i], sx, sy), weight))
            })
            .collect()
    });
    let mut colors: Vec<Option<Vec3>> = (0..n)
        .map(|k| {
            let (mut acc, mut wsum) = (Vec3::zeros(), 0.0);
            for view in &per_view {
                if let Some((c, w)) = view[k] {
                    acc += c * w;
                    wsum += w;
                }
            }
            (wsum > 0.0).then(|| acc / wsum)
        })
        .collect();
    fill_unseen(mesh, &mut colors);
    let colors = colors
        .into_iter()
        .map(|c| c.unwrap_or_else(Vec3::zeros))
        .collect();
    mesh.clone().with_colors(colors)
}

/// Multi-source Dijkstra along edges from every colored vertex.
fn fill_unseen(mesh: &TriMesh, colors: &mut [Option<Vec3>]) {
    let v = mesh.vertices();
    let nb = mesh.vertex_neighbors();
    let mut dist = vec![f64::INFINITY; v.len()];
    let mut source = vec![usize::MAX; v.len()];
    let mut heap = BinaryHeap::new();
    for (k, c) in colors.iter().enumerate() {
        if c.is_some() {
            dist[k] = 0.0;
            source[k] = k;
            heap.push(Reverse((OrdF64(0.0), k)));
        }
    }
    while let Some(Reverse((OrdF64(d), k))) = heap.pop() {
        if d > dist[k] {
            continue;
        }
        for &j in &nb[k] {
            let nd = d + (v[j] - v[k]).norm();
            if nd < dist[j] || (nd == dist[j] && source[k] < source[j]) {
                dist[j] = nd;
                source[j] = source[k];
                heap.push(Reverse((OrdF64(nd), j)));
            }
        }
    }
    for k in 0..colors.len() {
        if colors[k].is_none() && source[k] != usize::MAX {
            colors[k] = colors[source[k]];
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Image of the mesh's vertex colors, interpolated with the rasterizer's
/// barycentrics, and its coverage mask. Background is `background`.
pub fn render_vertex_colors(
    mesh: &TriMesh,
    cam: &Camera,
    background: f64,
    exec: Execution,
) -> Result<(Array3<f64>, GBuffer)> {
    let colors = mesh
        .colors()
        .ok_or_else(|| Error::contract("mesh has no vertex colors"))?;
    let gb = rasterize(
        mesh,
        cam,
        RasterOptions {
            normals: NormalMode::Smooth,
            exec,
        },
    );
    let (h, w) = (gb.height, gb.width);
    let mut img = Array3::from_elem((3, h, w), background);
    for y in 0..h {
        for x in 0..w {
            if !gb.covered(y, x) {
                continue;
            }
            let face = mesh.faces()[gb.face[[y, x]]];
            let c: Vec3 = (0..3).map(|k| colors[face[k]] * gb.bary[[y, x, k]]).sum();
            for ch in 0..3 {
                img[[ch, y, x]] = c[ch];
            }
        }
    }
    Ok((img, gb))
}
