use std::f64::consts::PI;

use ndarray::Array3;

use crate::exec::Execution;
use crate::scene::{rasterize, Camera, GBuffer, NormalMode, RasterOptions, TriMesh, Vec3};

/// Number of built-in procedural textures.
pub const TEXTURE_VARIANTS: usize = 4;

/// Background value of textured renders.
pub const BACKGROUND: f64 = 0.0;

/// Colour of texture `variant` at a surface point. Textures are functions of
/// the direction from the origin, so they stay smooth on any star-shaped
/// mesh centred there.
///
/// Every texture is `0.5 + 0.35 sin(theta + phase_c)` with the three channel
/// phases a third of a turn apart, so all variants have the same colour norm
/// at every pixel. Renders of different variants then have equal norms and
/// no variant is favoured a priori by a mixture over them.
pub fn texture_color(variant: usize, p: &Vec3) -> [f64; 3] {
    let n = p.norm();
    let d = if n > 0.0 { p / n } else { Vec3::y() };
    let (x, y, z) = (d.x, d.y, d.z);
    let theta = match variant % TEXTURE_VARIANTS {
        // latitude bands
        0 => 3.0 * PI * y,
        // slanted bands
        1 => 2.5 * PI * x + 0.8 * PI * z,
        // saddle
        2 => 4.0 * PI * x * z + 1.5 * PI * y,
        // diagonal
        _ => 2.0 * PI * (x + y) - PI * z,
    };
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        *o = 0.5 + 0.35 * (theta + 2.0 * PI * c as f64 / 3.0).sin();
    }
    out
}

/// Texture `variant` painted over a G-buffer, background elsewhere.
pub fn shade_texture(gb: &GBuffer, variant: usize) -> Array3<f64> {
    let mut img = Array3::from_elem((3, gb.height, gb.width), BACKGROUND);
    for y in 0..gb.height {
        for x in 0..gb.width {
            if gb.covered(y, x) {
                let c = texture_color(variant, &gb.hit_point(y, x));
                for k in 0..3 {
                    img[[k, y, x]] = c[k];
                }
            }
        }
    }
    img
}

pub fn render_textured(
    mesh: &TriMesh,
    cam: &Camera,
    variant: usize,
    exec: Execution,
) -> Array3<f64> {
    let gb = rasterize(
        mesh,
        cam,
        RasterOptions {
            normals: NormalMode::Smooth,
            exec,
        },
    );
    shade_texture(&gb, variant)
}

/// Mesh whose vertex colours carry texture `variant`.
pub fn painted_mesh(mesh: &TriMesh, variant: usize) -> crate::Result<TriMesh> {
    let colors = mesh
        .vertices()
        .iter()
        .map(|p| Vec3::from(texture_color(variant, p)))
        .collect();
    mesh.clone().with_colors(colors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colours_stay_in_range() {
        for v in 0..TEXTURE_VARIANTS {
            for k in 0..200 {
                let a = k as f64 * 0.37;
                let p = Vec3::new(a.sin() * (1.3 * a).cos(), (0.7 * a).cos(), a.cos());
                for c in texture_color(v, &p) {
                    assert!((0.15..=0.85).contains(&c));
                }
            }
        }
    }

    #[test]
    fn variants_share_the_colour_norm() {
        let p = Vec3::new(0.3, -0.5, 0.8);
        let norm = |c: [f64; 3]| c.iter().map(|v| v * v).sum::<f64>();
        let n0 = norm(texture_color(0, &p));
        for v in 1..TEXTURE_VARIANTS {
            assert!((norm(texture_color(v, &p)) - n0).abs() < 1e-12);
        }
    }

    #[test]
    fn variants_differ() {
        let p = Vec3::new(0.3, 0.2, 0.9);
        let a = texture_color(0, &p);
        for v in 1..TEXTURE_VARIANTS {
            let b = texture_color(v, &p);
            assert!(a.iter().zip(b).any(|(x, y)| (x - y).abs() > 1e-3));
        }
    }
}
