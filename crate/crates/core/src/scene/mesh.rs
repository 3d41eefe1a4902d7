use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Indexed triangle mesh with optional per-vertex colors in `[0, 1]^3`.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    vertices: Vec<Vec3>,
    faces: Vec<[usize; 3]>,
    colors: Option<Vec<Vec3>>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let mesh = Self {
            vertices,
            faces,
            colors: None,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn with_colors(mut self, colors: Vec<Vec3>) -> Result<Self> {
        if colors.len() != self.vertices.len() {
            return Err(Error::contract(format!(
                "{} colors for {} vertices",
                colors.len(),
                self.vertices.len()
            )));
        }
        if colors.iter().any(|c| c.iter().any(|v| !v.is_finite())) {
            return Err(Error::contract("non-finite vertex color"));
        }
        self.colors = Some(colors);
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        for (i, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&v| v >= n) {
                return Err(Error::contract(format!(
                    "face {i} indexes past {n} vertices"
                )));
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::contract(format!("face {i} repeats a vertex")));
            }
        }
        if self
            .vertices
            .iter()
            .any(|v| v.iter().any(|c| !c.is_finite()))
        {
            return Err(Error::contract("non-finite vertex coordinate"));
        }
        Ok(())
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn colors(&self) -> Option<&[Vec3]> {
        self.colors.as_deref()
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    /// Replaces vertex positions, keeping topology and colors.
    pub fn with_vertices(&self, vertices: Vec<Vec3>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::contract("vertex count changed"));
        }
        let mesh = Self {
            vertices,
            faces: self.faces.clone(),
            colors: self.colors.clone(),
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn bbox(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (lo, hi)
    }

    pub fn diagonal(&self) -> f64 {
        let (lo, hi) = self.bbox();
        (hi - lo).norm()
    }

    pub fn corners(&self, f: usize) -> [Vec3; 3] {
        let [a, b, c] = self.faces[f];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Cross product of the face edges: outward normal times twice the area.
    pub fn face_area_normal(&self, f: usize) -> Vec3 {
        let [a, b, c] = self.corners(f);
        (b - a).cross(&(c - a))
    }

    pub fn face_normal(&self, f: usize) -> Vec3 {
        self.face_area_normal(f).normalize()
    }

    /// Area-weighted vertex normals (unnormalized sums are normalized).
    pub fn vertex_normals(&self) -> Vec<Vec3> {
        let mut acc = vec![Vec3::zeros(); self.vertices.len()];
        for (f, face) in self.faces.iter().enumerate() {
            let n = self.face_area_normal(f);
            for &v in face {
                acc[v] += n;
            }
        }
        acc.into_iter()
            .map(|n| {
                let len = n.norm();
                if len > 0.0 {
                    n / len
                } else {
                    n
                }
            })
            .collect()
    }

    /// One-ring neighbours of every vertex, sorted and deduplicated.
    pub fn vertex_neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.vertices.len()];
        for &[a, b, c] in &self.faces {
            for (u, v) in [(a, b), (b, c), (c, a)] {
                adj[u].push(v);
                adj[v].push(u);
            }
        }
        for n in &mut adj {
            n.sort_unstable();
            n.dedup();
        }
        adj
    }

    /// Unit icosahedron subdivided `level` times, scaled to `radius`.
    pub fn icosphere(level: usize, radius: f64) -> Self {
        let t = (1.0 + 5f64.sqrt()) / 2.0;
        let mut vertices: Vec<Vec3> = [
            (-1.0, t, 0.0),
            (1.0, t, 0.0),
            (-1.0, -t, 0.0),
            (1.0, -t, 0.0),
            (0.0, -1.0, t),
            (0.0, 1.0, t),
            (0.0, -1.0, -t),
            (0.0, 1.0, -t),
            (t, 0.0, -1.0),
            (t, 0.0, 1.0),
            (-t, 0.0, -1.0),
            (-t, 0.0, 1.0),
        ]
        .iter()
        .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
        .collect();
        let mut faces: Vec<[usize; 3]> = vec![
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        for _ in 0..level {
            let mut cache: HashMap<(usize, usize), usize> = HashMap::new();
            let mut midpoint = |a: usize, b: usize, vs: &mut Vec<Vec3>| -> usize {
                let key = (a.min(b), a.max(b));
                *cache.entry(key).or_insert_with(|| {
                    vs.push(((vs[a] + vs[b]) * 0.5).normalize());
                    vs.len() - 1
                })
            };
            let mut next = Vec::with_capacity(faces.len() * 4);
            for &[a, b, c] in &faces {
                let ab = midpoint(a, b, &mut vertices);
                let bc = midpoint(b, c, &mut vertices);
                let ca = midpoint(c, a, &mut vertices);
                next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
            }
            faces = next;
        }
        for v in &mut vertices {
            *v *= radius;
        }
        Self {
            vertices,
            faces,
            colors: None,
        }
    }

    /// Axis-aligned square in the plane `z = z0`, facing `+z`.
    pub fn square(center: Vec3, half: f64) -> Self {
        let (x, y, z) = (center.x, center.y, center.z);
        let vertices = vec![
            Vec3::new(x - half, y - half, z),
            Vec3::new(x + half, y - half, z),
            Vec3::new(x + half, y + half, z),
            Vec3::new(x - half, y + half, z),
        ];
        Self {
            vertices,
            faces: vec![[0, 1, 2], [0, 2, 3]],
            colors: None,
        }
    }

    /// Parses Wavefront OBJ text. Polygons are fan-triangulated, negative
    /// indices count from the end, and `v x y z r g b` lines carry vertex
    /// colors. Vertex order is preserved.
    pub fn parse_obj(text: &str) -> Result<Self> {
        let mut vertices = Vec::new();
        let mut colors = Vec::new();
        let mut faces = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let bad = |what: &str| Error::contract(format!("obj line {}: {what}", lineno + 1));
            let line = line.split('#').next().unwrap_or("");
            let mut parts = line.split_whitespace();
            match parts.next() {
                Some("v") => {
                    let nums = parts
                        .map(|p| p.parse::<f64>().map_err(|_| bad("bad number")))
                        .collect::<Result<Vec<_>>>()?;
                    match nums.len() {
                        3 | 4 => {}
                        6 => colors.push(Vec3::new(nums[3], nums[4], nums[5])),
                        _ => return Err(bad("vertex needs 3 or 6 values")),
                    }
                    vertices.push(Vec3::new(nums[0], nums[1], nums[2]));
                }
                Some("f") => {
                    let idx = parts
                        .map(|p| {
                            let first = p.split('/').next().unwrap_or("");
                            let i: i64 = first.parse().map_err(|_| bad("bad face index"))?;
                            let n = vertices.len() as i64;
                            let resolved = if i < 0 { n + i } else { i - 1 };
                            if resolved < 0 {
                                return Err(bad("face index out of range"));
                            }
                            Ok(resolved as usize)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    if idx.len() < 3 {
                        return Err(bad("face needs at least 3 vertices"));
                    }
                    for k in 1..idx.len() - 1 {
                        faces.push([idx[0], idx[k], idx[k + 1]]);
                    }
                }
                _ => {}
            }
        }
        let mesh = Self::new(vertices, faces)?;
        match colors.len() {
            0 => Ok(mesh),
            n if n == mesh.vertices.len() => mesh.with_colors(colors),
            _ => Err(Error::contract("obj: colors given for only some vertices")),
        }
    }

    pub fn read_obj(path: &Path) -> Result<Self> {
        Self::parse_obj(&std::fs::read_to_string(path)?)
    }

    pub fn to_obj(&self) -> String {
        let mut out = String::new();
        for (i, v) in self.vertices.iter().enumerate() {
            match &self.colors {
                Some(c) => writeln!(
                    out,
                    "v {} {} {} {} {} {}",
                    v.x, v.y, v.z, c[i].x, c[i].y, c[i].z
                ),
                None => writeln!(out, "v {} {} {}", v.x, v.y, v.z),
            }
            .expect("string write");
        }
        for f in &self.faces {
            writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).expect("string write");
        }
        out
    }

    pub fn write_obj(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_obj())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn icosphere_counts_and_orientation() {
        for (level, faces, verts) in [(0, 20, 12), (1, 80, 42), (2, 320, 162)] {
            let m = TriMesh::icosphere(level, 2.0);
            assert_eq!(m.faces().len(), faces);
            assert_eq!(m.vertices().len(), verts);
            for f in 0..m.faces().len() {
                let [a, b, c] = m.corners(f);
                let centroid = (a + b + c) / 3.0;
                assert!(m.face_area_normal(f).dot(&centroid) > 0.0);
            }
            assert!(m.vertices().iter().all(|v| (v.norm() - 2.0).abs() < 1e-12));
        }
    }

    #[test]
    fn rejects_bad_faces() {
        let v = vec![Vec3::zeros(), Vec3::x(), Vec3::y()];
        assert!(TriMesh::new(v.clone(), vec![[0, 1, 3]]).is_err());
        assert!(TriMesh::new(v.clone(), vec![[0, 1, 1]]).is_err());
        assert!(TriMesh::new(v, vec![[0, 1, 2]]).is_ok());
    }

    #[test]
    fn obj_round_trip_with_colors() {
        let m = TriMesh::icosphere(1, 0.5);
        let colors = m
            .vertices()
            .iter()
            .map(|v| v.map(|c| c.abs().min(1.0)))
            .collect();
        let m = m.with_colors(colors).unwrap();
        let back = TriMesh::parse_obj(&m.to_obj()).unwrap();
        assert_eq!(back.faces(), m.faces());
        for (a, b) in back.vertices().iter().zip(m.vertices()) {
            assert!((a - b).norm() < 1e-6);
        }
        assert!(back.colors().is_some());
    }

    #[test]
    fn obj_quads_are_triangulated() {
        let text = "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n";
        let m = TriMesh::parse_obj(text).unwrap();
        assert_eq!(m.faces().len(), 2);
        assert!(m.colors().is_none());
    }

    #[test]
    fn neighbors_of_icosahedron_vertex() {
        let m = TriMesh::icosphere(0, 1.0);
        let n = m.vertex_neighbors();
        assert!(n.iter().all(|r| r.len() == 5));
    }
}
