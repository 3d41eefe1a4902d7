//! Photometric optimization of latent codes between overlapping views.
//!
//! For a pair `(i, j)` the loss is
//! `|D(x_i) - W_ij(D(x_j))|^2 + |D(x_j) - W_ji(D(x_i))|^2`, each term taken
//! over its warp's valid pixels and divided by their count. Warps are fixed;
//! with the linear reference codecs the loss is quadratic in the latents and
//! its gradient is exact.

use ndarray::{Array2, Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::consistency::WarpBank;
use crate::error::{Error, Result};
use crate::field::LatentField;
use crate::scene::ViewRig;
use crate::warpfield::{Codec, WarpMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMethod {
    Analytic,
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Step in units of the inverse per-texel curvature, so 0.5 halves the
    /// disagreement of a fully overlapping pair with one side locked.
    pub step_size: f64,
    pub iterations: usize,
    pub gradient: GradientMethod,
    pub fd_epsilon: f64,
    pub max_halvings: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            step_size: 0.5,
            iterations: 10,
            gradient: GradientMethod::Analytic,
            fd_epsilon: 1e-5,
            max_halvings: 12,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::config(
                "optimizer.step_size",
                "must be finite and > 0",
            ));
        }
        if self.iterations < 1 {
            return Err(Error::config("optimizer.iterations", "must be >= 1"));
        }
        if !(self.fd_epsilon > 0.0) {
            return Err(Error::config("optimizer.fd_epsilon", "must be > 0"));
        }
        Ok(())
    }
}

/// Warps for a pair: `into_i` carries view `j` into view `i` and `into_j`
/// the reverse. `None` is the identity warp.
#[derive(Debug, Clone, Copy, Default)]
pub struct PairWarps<'a> {
    pub into_i: Option<&'a WarpMap>,
    pub into_j: Option<&'a WarpMap>,
}

impl<'a> PairWarps<'a> {
    pub fn from_bank(bank: &'a WarpBank, i: usize, j: usize) -> Result<Self> {
        Ok(Self {
            into_i: bank.get(j, i)?,
            into_j: bank.get(i, j)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLoss {
    pub value: f64,
    /// Neither direction has a valid pixel.
    pub empty_overlap: bool,
}

struct Direction {
    residual: Array3<f64>,
    count: usize,
}

fn direction(dst: &Array3<f64>, src: &Array3<f64>, warp: Option<&WarpMap>) -> Result<Direction> {
    let (_, h, w) = dst.dim();
    let (warped, mask) = match warp {
        Some(m) => {
            let r = m.apply(src)?;
            (r.image, r.mask)
        }
        None => {
            if src.dim() != dst.dim() {
                return Err(Error::contract(
                    "identity warp between differently sized views",
                ));
            }
            (src.clone(), Array2::from_elem((h, w), true))
        }
    };
    if warped.dim() != dst.dim() {
        return Err(Error::contract("warped image does not match destination"));
    }
    let mut residual = dst - &warped;
    for mut ch in residual.outer_iter_mut() {
        Zip::from(&mut ch).and(&mask).for_each(|r, &m| {
            if !m {
                *r = 0.0;
            }
        });
    }
    let count = mask.iter().filter(|&&m| m).count();
    Ok(Direction { residual, count })
}

fn sum_sq(a: &Array3<f64>) -> f64 {
    a.iter().map(|v| v * v).sum()
}

struct Evaluated {
    loss: PairLoss,
    d1: Direction,
    d2: Direction,
}

fn evaluate(
    x_i: &LatentField,
    x_j: &LatentField,
    codec: &dyn Codec,
    warps: PairWarps<'_>,
) -> Result<Evaluated> {
    let di = codec.decode(x_i.data())?;
    let dj = codec.decode(x_j.data())?;
    let d1 = direction(&di, &dj, warps.into_i)?;
    let d2 = direction(&dj, &di, warps.into_j)?;
    let term = |d: &Direction| {
        if d.count == 0 {
            0.0
        } else {
            sum_sq(&d.residual) / d.count as f64
        }
    };
    let loss = PairLoss {
        value: term(&d1) + term(&d2),
        empty_overlap: d1.count == 0 && d2.count == 0,
    };
    Ok(Evaluated { loss, d1, d2 })
}

pub fn latent_pair_loss(
    x_i: &LatentField,
    x_j: &LatentField,
    codec: &dyn Codec,
    warps: PairWarps<'_>,
) -> Result<PairLoss> {
    Ok(evaluate(x_i, x_j, codec, warps)?.loss)
}

fn adjoint(warp: Option<&WarpMap>, g: &Array3<f64>) -> Result<Array3<f64>> {
    match warp {
        Some(m) => m.apply_adjoint(g),
        None => Ok(g.clone()),
    }
}

/// Gradient of `s1 * S1 + s2 * S2` where `S` are the unnormalized squared
/// residual sums of the two directions.
fn weighted_gradient(
    ev: &Evaluated,
    codec: &dyn Codec,
    warps: PairWarps<'_>,
    s1: f64,
    s2: f64,
) -> Result<(Array3<f64>, Array3<f64>)> {
    let g1 = &ev.d1.residual * (2.0 * s1);
    let g2 = &ev.d2.residual * (2.0 * s2);
    let gi_img = &g1 - &adjoint(warps.into_j, &g2)?;
    let gj_img = &g2 - &adjoint(warps.into_i, &g1)?;
    Ok((
        codec.decode_adjoint(&gi_img)?,
        codec.decode_adjoint(&gj_img)?,
    ))
}

/// Loss and its exact gradient with respect to both latents.
pub fn latent_pair_gradient(
    x_i: &LatentField,
    x_j: &LatentField,
    codec: &dyn Codec,
    warps: PairWarps<'_>,
) -> Result<(PairLoss, Array3<f64>, Array3<f64>)> {
    let ev = evaluate(x_i, x_j, codec, warps)?;
    let inv = |n: usize| if n == 0 { 0.0 } else { 1.0 / n as f64 };
    let (gi, gj) = weighted_gradient(&ev, codec, warps, inv(ev.d1.count), inv(ev.d2.count))?;
    Ok((ev.loss, gi, gj))
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_difference(
    x: &LatentField,
    eps: f64,
    mut f: impl FnMut(&LatentField) -> Result<f64>,
) -> Result<Array3<f64>> {
    let mut probe = x.clone();
    let mut grad = Array3::zeros(x.data().dim());
    for (idx, g) in grad.indexed_iter_mut() {
        let orig = probe.data()[idx];
        probe.data_mut()[idx] = orig + eps;
        let up = f(&probe)?;
        probe.data_mut()[idx] = orig - eps;
        let down = f(&probe)?;
        probe.data_mut()[idx] = orig;
        *g = (up - down) / (2.0 * eps);
    }
    Ok(grad)
}

fn summed_loss(
    x_i: &LatentField,
    x_j: &LatentField,
    codec: &dyn Codec,
    warps: PairWarps<'_>,
) -> Result<f64> {
    let ev = evaluate(x_i, x_j, codec, warps)?;
    Ok(sum_sq(&ev.d1.residual) + sum_sq(&ev.d2.residual))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairOutcome {
    pub x_i: LatentField,
    pub x_j: LatentField,
    pub loss_before: f64,
    pub loss_after: f64,
    pub note: Option<&'static str>,
}

/// Gradient descent on the pair loss; locked latents stay constant.
///
/// Each iteration steps along the gradient of the summed squared residuals
/// scaled by `step / (4 r^2)` for codec ratio `r`, halving the step until
/// the normalized loss does not increase.
pub fn optimize_pair(
    x_i: &LatentField,
    x_j: &LatentField,
    codec: &dyn Codec,
    warps: PairWarps<'_>,
    config: &OptimizerConfig,
    locked: (bool, bool),
) -> Result<PairOutcome> {
    let start = latent_pair_loss(x_i, x_j, codec, warps)?;
    let mut out = PairOutcome {
        x_i: x_i.clone(),
        x_j: x_j.clone(),
        loss_before: start.value,
        loss_after: start.value,
        note: None,
    };
    if locked.0 && locked.1 {
        out.note = Some("both-locked");
        return Ok(out);
    }
    if start.empty_overlap {
        out.note = Some("empty-overlap");
        return Ok(out);
    }
    let r = codec.ratio() as f64;
    let scale = 1.0 / (4.0 * r * r);
    let mut loss = start.value;
    let mut eta = config.step_size;
    for _ in 0..config.iterations {
        let (gi, gj) = match config.gradient {
            GradientMethod::Analytic => {
                let ev = evaluate(&out.x_i, &out.x_j, codec, warps)?;
                weighted_gradient(&ev, codec, warps, 1.0, 1.0)?
            }
            GradientMethod::FiniteDifference => {
                let xj = out.x_j.clone();
                let xi = out.x_i.clone();
                let gi = finite_difference(&out.x_i, config.fd_epsilon, |p| {
                    summed_loss(p, &xj, codec, warps)
                })?;
                let gj = finite_difference(&out.x_j, config.fd_epsilon, |p| {
                    summed_loss(&xi, p, codec, warps)
                })?;
                (gi, gj)
            }
        };
        let moving = |g: &Array3<f64>, lock: bool| !lock && g.iter().any(|v| *v != 0.0);
        if !moving(&gi, locked.0) && !moving(&gj, locked.1) {
            break;
        }
        let mut accepted = false;
        for _ in 0..=config.max_halvings {
            let step = eta * scale;
            let ci = if locked.0 {
                out.x_i.clone()
            } else {
                LatentField::new(out.x_i.data() - &(&gi * step), out.x_i.space())
            };
            let cj = if locked.1 {
                out.x_j.clone()
            } else {
                LatentField::new(out.x_j.data() - &(&gj * step), out.x_j.space())
            };
            let candidate = latent_pair_loss(&ci, &cj, codec, warps)?.value;
            if candidate.is_finite() && candidate <= loss {
                out.x_i = ci;
                out.x_j = cj;
                loss = candidate;
                accepted = true;
                break;
            }
            eta *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    out.loss_after = loss;
    Ok(out)
}

/// Loss trace entry of one optimized pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairRecord {
    pub timestep: usize,
    pub phase: u8,
    pub i: usize,
    pub j: usize,
    pub loss_before: f64,
    pub loss_after: f64,
    pub note: Option<&'static str>,
}

pub type PairList = Vec<(usize, usize)>;

/// Pairs optimized by an event on a rig: adjacent views on each track, then
/// each full-body view with its close-up partner.
pub fn rig_pair_schedule(rig: &ViewRig) -> (PairList, PairList) {
    let n = rig.per_track();
    let cross = (0..n).map(|i| (i, i + n)).collect();
    (rig.adjacent_pairs(), cross)
}

/// One optimization event. Phase-two pairs treat their second view as a
/// fixed reference. Returns the new latents and the loss trace; `latents`
/// is left untouched on error.
#[allow(clippy::too_many_arguments)]
pub fn optimization_event(
    latents: &[LatentField],
    locked: &[bool],
    phase1: &[(usize, usize)],
    phase2: &[(usize, usize)],
    bank: &WarpBank,
    codec: &dyn Codec,
    config: &OptimizerConfig,
    timestep: usize,
) -> Result<(Vec<LatentField>, Vec<PairRecord>)> {
    if locked.len() != latents.len() {
        return Err(Error::contract("lock flags do not match views"));
    }
    let mut next = latents.to_vec();
    let mut trace = Vec::new();
    for (phase, pairs) in [(1u8, phase1), (2u8, phase2)] {
        for &(i, j) in pairs {
            if i >= next.len() || j >= next.len() {
                return Err(Error::contract(format!(
                    "pair ({i}, {j}) outside {} views",
                    next.len()
                )));
            }
            let lock_j = locked[j] || phase == 2;
            let warps = PairWarps::from_bank(bank, i, j)?;
            let o = optimize_pair(
                &next[i],
                &next[j],
                codec,
                warps,
                config,
                (locked[i], lock_j),
            )?;
            debug_assert!(o.loss_after <= o.loss_before);
            trace.push(PairRecord {
                timestep,
                phase,
                i,
                j,
                loss_before: o.loss_before,
                loss_after: o.loss_after,
                note: o.note,
            });
            next[i] = o.x_i;
            next[j] = o.x_j;
        }
    }
    Ok((next, trace))
}

/// Lock flags after an event at elapsed fraction `elapsed`: front and back
/// views lock at the first event (or with the sides when `front_back_early`
/// is false), side views once `elapsed >= side_fraction`. Locks never clear.
pub fn update_locks(
    locked: &mut [bool],
    rig: &ViewRig,
    elapsed: f64,
    front_back_early: bool,
    side_fraction: f64,
) {
    let sides_due = elapsed >= side_fraction;
    let mut lock = |az: f64| {
        for v in rig.views_at_azimuth(az) {
            locked[v] = true;
        }
    };
    if front_back_early || sides_due {
        lock(0.0);
        lock(180.0);
    }
    if sides_due {
        lock(90.0);
        lock(270.0);
    }
}
