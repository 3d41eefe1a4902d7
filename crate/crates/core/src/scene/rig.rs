use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Camera, Intrinsics, Vec3};

/// Track a rig view belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Track {
    FullBody,
    UpperBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigSpec {
    /// Views per track (`N`).
    pub views_per_track: usize,
    /// Orbit radii; derived from the framing when absent.
    pub radius_fb: Option<f64>,
    pub radius_ub: Option<f64>,
    pub elevation_fb_deg: f64,
    pub elevation_ub_deg: f64,
    pub fov_y_deg: f64,
    pub width: usize,
    pub height: usize,
    /// Top fraction of the bounding box framed by the upper-body track.
    pub upper_fraction: f64,
    /// Slack around the framed region.
    pub margin: f64,
}

impl Default for RigSpec {
    fn default() -> Self {
        Self {
            views_per_track: 8,
            radius_fb: None,
            radius_ub: None,
            elevation_fb_deg: 0.0,
            elevation_ub_deg: 0.0,
            fov_y_deg: 50.0,
            width: 128,
            height: 128,
            upper_fraction: 0.45,
            margin: 1.05,
        }
    }
}

impl RigSpec {
    pub fn validate(&self) -> Result<()> {
        if self.views_per_track < 3 {
            return Err(Error::config(
                "rig.views_per_track",
                format!(
                    "need at least 3 views per track, got {}",
                    self.views_per_track
                ),
            ));
        }
        for (name, r) in [
            ("rig.radius_fb", self.radius_fb),
            ("rig.radius_ub", self.radius_ub),
        ] {
            if let Some(r) = r {
                if !(r > 0.0) || !r.is_finite() {
                    return Err(Error::config(name, "radius must be positive"));
                }
            }
        }
        if !(self.fov_y_deg > 0.0 && self.fov_y_deg < 180.0) {
            return Err(Error::config("rig.fov_y_deg", "must lie in (0, 180)"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("rig.width", "image size must be positive"));
        }
        if !(self.upper_fraction > 0.0 && self.upper_fraction <= 1.0) {
            return Err(Error::config("rig.upper_fraction", "must lie in (0, 1]"));
        }
        if !(self.margin >= 1.0) || !self.margin.is_finite() {
            return Err(Error::config("rig.margin", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RigView {
    pub camera: Camera,
    pub track: Track,
    pub azimuth_deg: f64,
}

/// Two concentric circular tracks of `N` views each. Views `0..N` form the
/// full-body track and `N..2N` the upper-body track; view `i + N` shares the
/// azimuth of view `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewRig {
    views: Vec<RigView>,
    per_track: usize,
}

fn framing(lo: Vec3, hi: Vec3, fov_y_deg: f64, aspect: f64, margin: f64) -> (Vec3, f64) {
    let center = (lo + hi) * 0.5;
    let radius = (hi - lo).norm() * 0.5;
    let half_fov = 0.5 * fov_y_deg.to_radians();
    let half_fov_x = (half_fov.tan() * aspect).atan();
    let dist = margin * radius / half_fov.min(half_fov_x).sin();
    (center, dist)
}

fn orbit(center: Vec3, radius: f64, azimuth_deg: f64, elevation_deg: f64) -> Vec3 {
    let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    center + Vec3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos()) * radius
}

/// Builds the two-track rig framing the bounding box `(lo, hi)`; `+y` is up.
pub fn build_rig(spec: &RigSpec, bbox: (Vec3, Vec3)) -> Result<ViewRig> {
    spec.validate()?;
    let (lo, hi) = bbox;
    let n = spec.views_per_track;
    let aspect = spec.width as f64 / spec.height as f64;
    let (c_fb, d_fb) = framing(lo, hi, spec.fov_y_deg, aspect, spec.margin);
    let mut lo_ub = lo;
    lo_ub.y = hi.y - spec.upper_fraction * (hi.y - lo.y);
    let (c_ub, d_ub) = framing(lo_ub, hi, spec.fov_y_deg, aspect, spec.margin);
    let intr = Intrinsics::from_fov(spec.fov_y_deg, spec.width, spec.height);
    let mut views = Vec::with_capacity(2 * n);
    for (track, center, dist, elev) in [
        (
            Track::FullBody,
            c_fb,
            spec.radius_fb.unwrap_or(d_fb),
            spec.elevation_fb_deg,
        ),
        (
            Track::UpperBody,
            c_ub,
            spec.radius_ub.unwrap_or(d_ub),
            spec.elevation_ub_deg,
        ),
    ] {
        for k in 0..n {
            let azimuth_deg = 360.0 * k as f64 / n as f64;
            let eye = orbit(center, dist, azimuth_deg, elev);
            let camera = Camera::look_at(eye, center, Vec3::y(), intr)?;
            views.push(RigView {
                camera,
                track,
                azimuth_deg,
            });
        }
    }
    Ok(ViewRig {
        views,
        per_track: n,
    })
}

/// Unsigned angular distance in degrees on the circle.
pub fn azimuth_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

const NEIGHBOR_RANGE_DEG: f64 = 60.0;
const ANGLE_EPS: f64 = 1e-9;

impl ViewRig {
    pub fn views(&self) -> &[RigView] {
        &self.views
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn per_track(&self) -> usize {
        self.per_track
    }

    pub fn camera(&self, i: usize) -> &Camera {
        &self.views[i].camera
    }

    pub fn cameras(&self) -> Vec<Camera> {
        self.views.iter().map(|v| v.camera.clone()).collect()
    }

    /// Source views for target `i`: same-track views within 60 degrees
    /// (inclusive), nearest first with ties by index, then the paired
    /// upper-body view for full-body targets.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        let me = &self.views[i];
        let mut same: Vec<(f64, usize)> = self
            .views
            .iter()
            .enumerate()
            .filter(|&(j, v)| j != i && v.track == me.track)
            .map(|(j, v)| (azimuth_distance(v.azimuth_deg, me.azimuth_deg), j))
            .filter(|&(d, _)| d <= NEIGHBOR_RANGE_DEG + ANGLE_EPS)
            .collect();
        same.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut out: Vec<usize> = same.into_iter().map(|(_, j)| j).collect();
        if me.track == Track::FullBody && i + self.per_track < self.views.len() {
            out.push(i + self.per_track);
        }
        out
    }

    /// Adjacent same-track pairs `(i, i+1 mod N)` on both tracks.
    pub fn adjacent_pairs(&self) -> Vec<(usize, usize)> {
        let n = self.per_track;
        let mut pairs = Vec::new();
        for base in [0, n] {
            for k in 0..n {
                pairs.push((base + k, base + (k + 1) % n));
            }
        }
        pairs
    }

    /// Views on either track at the given azimuth.
    pub fn views_at_azimuth(&self, azimuth_deg: f64) -> Vec<usize> {
        self.views
            .iter()
            .enumerate()
            .filter(|(_, v)| azimuth_distance(v.azimuth_deg, azimuth_deg) < 1e-6)
            .map(|(i, _)| i)
            .collect()
    }

    /// The azimuth-0 view on the same track as `i`, used as attention
    /// reference.
    pub fn reference_view(&self, i: usize) -> usize {
        if self.views[i].track == Track::FullBody {
            0
        } else {
            self.per_track
        }
    }
}
