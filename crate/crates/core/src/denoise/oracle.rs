use crate::error::{Error, Result};
use crate::field::LatentField;
use crate::schedule::{noise_from_original, Schedule};

use super::{Denoiser, DenoiserRequest, DenoiserResponse};

/// The noise whose predicted original is exactly `target`.
pub fn oracle_denoise(
    req: &DenoiserRequest<'_>,
    target: &LatentField,
    s: &Schedule,
) -> Result<DenoiserResponse> {
    let eps = noise_from_original(req.latent, target, req.timestep, s)?;
    Ok(DenoiserResponse { eps })
}

/// Oracle toward a fixed target per view. A single target serves every view.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    targets: Vec<LatentField>,
}

impl OracleDenoiser {
    pub fn new(target: LatentField) -> Self {
        Self {
            targets: vec![target],
        }
    }

    pub fn per_view(targets: Vec<LatentField>) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::config(
                "denoiser.targets",
                "at least one target required",
            ));
        }
        Ok(Self { targets })
    }

    pub fn target(&self, view_id: usize) -> Result<&LatentField> {
        if self.targets.len() == 1 {
            return Ok(&self.targets[0]);
        }
        self.targets.get(view_id).ok_or_else(|| {
            Error::config(
                "denoiser.targets",
                format!(
                    "no target for view {view_id} ({} given)",
                    self.targets.len()
                ),
            )
        })
    }
}

impl Denoiser for OracleDenoiser {
    fn denoise(&self, req: &DenoiserRequest<'_>, schedule: &Schedule) -> Result<DenoiserResponse> {
        oracle_denoise(req, self.target(req.view_id)?, schedule)
    }
}
