use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::scene::{Camera, TriMesh, Vec3};

use super::normals::{assign_faces, normal_loss_gradient, normal_refine_loss, NormalTarget};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    pub iterations: usize,
    /// Initial largest per-vertex move, as a fraction of the bbox diagonal.
    pub step_fraction: f64,
    /// Hard cap on any vertex move per iteration, fraction of the diagonal.
    pub max_step_fraction: f64,
    /// Weight of the uniform Laplacian term.
    pub laplacian_weight: f64,
    pub max_halvings: usize,
    /// Step multiplier after an accepted iteration.
    pub growth: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            step_fraction: 0.002,
            max_step_fraction: 0.01,
            laplacian_weight: 0.1,
            max_halvings: 12,
            growth: 1.25,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_step_fraction > 0.0 && self.max_step_fraction <= 0.01) {
            return Err(Error::config(
                "refine.max_step_fraction",
                "must lie in (0, 0.01]",
            ));
        }
        if !(self.step_fraction > 0.0 && self.step_fraction <= self.max_step_fraction) {
            return Err(Error::config(
                "refine.step_fraction",
                "must lie in (0, max_step_fraction]",
            ));
        }
        if !(self.laplacian_weight >= 0.0 && self.laplacian_weight.is_finite()) {
            return Err(Error::config(
                "refine.laplacian_weight",
                "must be finite and >= 0",
            ));
        }
        if !(self.growth >= 1.0 && self.growth.is_finite()) {
            return Err(Error::config("refine.growth", "must be >= 1"));
        }
        Ok(())
    }
}

/// Mean squared uniform-Laplacian offset, divided by the squared diagonal,
/// and its gradient.
pub fn laplacian_energy(mesh: &TriMesh, neighbors: &[Vec<usize>], diag: f64) -> (f64, Vec<Vec3>) {
    let v = mesh.vertices();
    let n = v.len();
    let mut grad = vec![Vec3::zeros(); n];
    if n == 0 || diag <= 0.0 {
        return (0.0, grad);
    }
    let scale = 1.0 / (n as f64 * diag * diag);
    let mut energy = 0.0;
    for (i, nb) in neighbors.iter().enumerate() {
        if nb.is_empty() {
            continue;
        }
        let mean: Vec3 = nb.iter().map(|&j| v[j]).sum::<Vec3>() / nb.len() as f64;
        let delta = v[i] - mean;
        energy += delta.norm_squared();
        grad[i] += delta * (2.0 * scale);
        for &j in nb {
            grad[j] -= delta * (2.0 * scale / nb.len() as f64);
        }
    }
    (energy * scale, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RefineRecord {
    pub iteration: usize,
    pub data_loss: f64,
    pub laplacian: f64,
    pub total: f64,
    /// Largest vertex move taken in this iteration.
    pub step: f64,
    pub halvings: usize,
}

#[derive(Debug, Clone)]
pub struct RefineOutcome {
    pub mesh: TriMesh,
    pub trace: Vec<RefineRecord>,
    /// Set when the loop stopped on a non-finite loss.
    pub aborted: Option<String>,
}

struct Objective<'a> {
    cams: &'a [Camera],
    targets: &'a [NormalTarget],
    neighbors: Vec<Vec<usize>>,
    diag: f64,
    lambda: f64,
    exec: Execution,
}

impl Objective<'_> {
    fn value(&self, mesh: &TriMesh) -> Result<(f64, f64)> {
        let data = normal_refine_loss(mesh, self.cams, self.targets, self.exec)?;
        let (lap, _) = laplacian_energy(mesh, &self.neighbors, self.diag);
        Ok((data, lap))
    }
}

/// Descends the normal loss plus `lambda` times the Laplacian energy. Each
/// iteration moves along the negative gradient, scaled so the largest
/// vertex move equals the current step, and halves the step until the
/// objective does not increase.
pub fn refine_mesh(
    mesh: &TriMesh,
    cams: &[Camera],
    targets: &[NormalTarget],
    config: &RefineConfig,
    exec: Execution,
) -> Result<RefineOutcome> {
    config.validate()?;
    if targets.len() != cams.len() {
        return Err(Error::config(
            "targets",
            format!("{} normal targets for {} views", targets.len(), cams.len()),
        ));
    }
    let mut used = vec![false; mesh.vertices().len()];
    for f in mesh.faces() {
        for &k in f {
            used[k] = true;
        }
    }
    if used.iter().any(|u| !u) {
        return Err(Error::contract("mesh has unreferenced vertices"));
    }
    let diag = mesh.diagonal();
    let obj = Objective {
        cams,
        targets,
        neighbors: mesh.vertex_neighbors(),
        diag,
        lambda: config.laplacian_weight,
        exec,
    };
    let cap = config.max_step_fraction * diag;
    let mut step = config.step_fraction * diag;
    let mut current = mesh.clone();
    let (mut data, mut lap) = obj.value(&current)?;
    let mut trace = Vec::new();
    if !(data + lap).is_finite() {
        return Ok(RefineOutcome {
            mesh: current,
            trace,
            aborted: Some("non-finite initial loss".into()),
        });
    }
    for iteration in 0..config.iterations {
        let faces = exec.map(cams.len(), |i| {
            assign_faces(&current, &cams[i], Execution::Sequential)
        });
        let (_, g_data) = normal_loss_gradient(&current, cams, targets, &faces, exec)?;
        let (_, g_lap) = laplacian_energy(&current, &obj.neighbors, diag);
        let grad: Vec<Vec3> = g_data
            .iter()
            .zip(&g_lap)
            .map(|(a, b)| a + b * obj.lambda)
            .collect();
        let gmax = grad.iter().map(|g| g.norm()).fold(0.0, f64::max);
        if !gmax.is_finite() {
            return Ok(RefineOutcome {
                mesh: current,
                trace,
                aborted: Some(format!("non-finite gradient at iteration {iteration}")),
            });
        }
        if gmax == 0.0 {
            break;
        }
        let total = data + obj.lambda * lap;
        let mut accepted = None;
        let mut halvings = 0;
        while halvings <= config.max_halvings {
            let s = step.min(cap);
            let moved: Vec<Vec3> = current
                .vertices()
                .iter()
                .zip(&grad)
                .map(|(p, g)| p - g * (s / gmax))
                .collect();
            let candidate = current.with_vertices(moved)?;
            let (d, l) = obj.value(&candidate)?;
            let t = d + obj.lambda * l;
            if !t.is_finite() {
                return Ok(RefineOutcome {
                    mesh: current,
                    trace,
                    aborted: Some(format!("non-finite loss at iteration {iteration}")),
                });
            }
            if t <= total {
                accepted = Some((candidate, d, l, s));
                break;
            }
            step = s / 2.0;
            halvings += 1;
        }
        let Some((next, d, l, s)) = accepted else {
            break;
        };
        current = next;
        data = d;
        lap = l;
        step = (s * config.growth).min(cap);
        trace.push(RefineRecord {
            iteration,
            data_loss: data,
            laplacian: lap,
            total: data + obj.lambda * lap,
            step: s,
            halvings,
        });
    }
    Ok(RefineOutcome {
        mesh: current,
        trace,
        aborted: None,
    })
}
