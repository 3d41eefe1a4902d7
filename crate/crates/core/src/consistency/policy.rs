use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::Schedule;

/// Which steps use consistency-guided noise once it is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CgPattern {
    /// Never: every view samples independently.
    Off,
    /// Even timesteps use guided noise, odd ones the denoiser's own noise.
    Alternate,
    /// Every active step uses guided noise.
    EveryStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingPolicy {
    /// Fraction of steps sampled with the original noise before guidance starts.
    pub cg_start_fraction: f64,
    pub cg_pattern: CgPattern,
    /// Run latent optimization when `t` is a multiple of this period.
    pub optimization_period: usize,
    pub optimize: bool,
    /// Feed the reference view's attention features to every denoiser call.
    pub reference_attention: bool,
    pub upper_body_replacement: bool,
    /// Replace close-up texels after deriving the guided noise instead of before.
    pub replace_after_noise: bool,
    /// Lock front and back views from the first optimization event rather
    /// than together with the side views.
    pub lock_front_back_early: bool,
    /// Elapsed fraction at which side views lock.
    pub side_lock_fraction: f64,
    /// Minimum fraction of a latent texel's pixels that must carry a warped
    /// sample for a source to contribute there.
    pub validity_threshold: f64,
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        Self {
            cg_start_fraction: 0.1,
            cg_pattern: CgPattern::Alternate,
            optimization_period: 4,
            optimize: true,
            reference_attention: true,
            upper_body_replacement: true,
            replace_after_noise: false,
            lock_front_back_early: true,
            side_lock_fraction: 0.2,
            validity_threshold: 0.999,
        }
    }
}

impl SamplingPolicy {
    /// Independent per-view sampling.
    pub fn vanilla() -> Self {
        Self {
            cg_pattern: CgPattern::Off,
            optimize: false,
            reference_attention: false,
            upper_body_replacement: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.cg_start_fraction) {
            return Err(Error::config(
                "policy.cg_start_fraction",
                "must lie in [0, 1]",
            ));
        }
        if self.optimization_period < 1 {
            return Err(Error::config("policy.optimization_period", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.side_lock_fraction) {
            return Err(Error::config(
                "policy.side_lock_fraction",
                "must lie in [0, 1]",
            ));
        }
        if !(self.validity_threshold > 0.0 && self.validity_threshold <= 1.0) {
            return Err(Error::config(
                "policy.validity_threshold",
                "must lie in (0, 1]",
            ));
        }
        Ok(())
    }

    /// Whether step `t` uses consistency-guided noise.
    pub fn is_cg_step(&self, t: usize, s: &Schedule) -> bool {
        let active =
            s.elapsed_fraction(t) >= self.cg_start_fraction && self.cg_start_fraction < 1.0;
        match self.cg_pattern {
            CgPattern::Off => false,
            CgPattern::Alternate => active && t.is_multiple_of(2),
            CgPattern::EveryStep => active,
        }
    }

    /// Whether an optimization event follows step `t`.
    pub fn is_optimization_step(&self, t: usize) -> bool {
        self.optimize && t.is_multiple_of(self.optimization_period)
    }
}
