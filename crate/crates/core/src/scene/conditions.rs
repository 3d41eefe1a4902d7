use ndarray::{Array2, Array3};

use crate::denoise::Conditions;
use crate::exec::Execution;

use super::{rasterize, Camera, GBuffer, NormalMode, RasterOptions, TriMesh};

/// Exportable condition images for one view.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionMaps {
    /// `(h, w)` depth in `[0, 1]` over the mesh's depth range; 0 at misses.
    pub depth: Array2<f64>,
    /// `(3, h, w)` camera-frame normal encoded as `n * 0.5 + 0.5`, with x right,
    /// y up and z towards the viewer; 0 at misses.
    pub normal: Array3<f64>,
}

impl ConditionMaps {
    pub fn to_conditions(&self) -> Conditions {
        let (h, w) = self.depth.dim();
        let mut c = Conditions::new();
        c.insert(
            "depth".into(),
            self.depth
                .clone()
                .into_shape_with_order((1, h, w))
                .expect("depth shape"),
        );
        c.insert("normal".into(), self.normal.clone());
        c
    }
}

/// Depth and normal conditions for one camera.
pub fn render_conditions(mesh: &TriMesh, cam: &Camera, exec: Execution) -> ConditionMaps {
    let gb = rasterize(
        mesh,
        cam,
        RasterOptions {
            normals: NormalMode::Smooth,
            exec,
        },
    );
    conditions_from_gbuffer(mesh, cam, &gb)
}

pub fn conditions_from_gbuffer(mesh: &TriMesh, cam: &Camera, gb: &GBuffer) -> ConditionMaps {
    let (h, w) = (gb.height, gb.width);
    let (mut near, mut far) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in mesh.vertices() {
        let z = cam.to_camera(v).z;
        near = near.min(z);
        far = far.max(z);
    }
    let range = (far - near).max(1e-12);
    let mut depth = Array2::zeros((h, w));
    let mut normal = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            if !gb.covered(y, x) {
                continue;
            }
            depth[[y, x]] = ((gb.depth[[y, x]] - near) / range).clamp(0.0, 1.0);
            let n = cam.rotation * gb.normal_at(y, x);
            let enc = [n.x, -n.y, -n.z];
            for c in 0..3 {
                normal[[c, y, x]] = enc[c] * 0.5 + 0.5;
            }
        }
    }
    ConditionMaps { depth, normal }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Intrinsics, Vec3};

    fn cam() -> Camera {
        Camera::look_at(
            Vec3::new(0.0, 0.0, 3.0),
            Vec3::zeros(),
            Vec3::y(),
            Intrinsics::from_fov(50.0, 32, 32),
        )
        .unwrap()
    }

    #[test]
    fn facing_plane_encodes_as_blue() {
        let mesh = TriMesh::square(Vec3::zeros(), 0.5);
        let m = render_conditions(&mesh, &cam(), Execution::Sequential);
        let expected = [0.5, 0.5, 1.0];
        for c in 0..3 {
            assert!((m.normal[[c, 16, 16]] - expected[c]).abs() < 1e-12);
        }
        assert_eq!(m.normal[[2, 0, 0]], 0.0);
    }

    #[test]
    fn empty_coverage_is_black() {
        let mesh = TriMesh::square(Vec3::new(0.0, 0.0, 10.0), 0.5);
        let m = render_conditions(&mesh, &cam(), Execution::Sequential);
        assert!(m.depth.iter().all(|&v| v == 0.0));
        assert!(m.normal.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn farther_surfaces_are_brighter() {
        let mut verts = TriMesh::square(Vec3::new(-0.5, 0.0, 0.0), 0.3)
            .vertices()
            .to_vec();
        verts.extend(TriMesh::square(Vec3::new(0.5, 0.0, -1.0), 0.3).vertices());
        let mesh = TriMesh::new(verts, vec![[0, 1, 2], [0, 2, 3], [4, 5, 6], [4, 6, 7]]).unwrap();
        let c = cam();
        let m = render_conditions(&mesh, &c, Execution::Sequential);
        let (u0, v0, _) = c.project(&Vec3::new(-0.5, 0.0, 0.0)).unwrap();
        let (u1, v1, _) = c.project(&Vec3::new(0.5, 0.0, -1.0)).unwrap();
        assert!(m.depth[[v1 as usize, u1 as usize]] > m.depth[[v0 as usize, u0 as usize]]);
    }
}
