use ndarray::Array3;

use crate::error::{Error, Result};
use crate::field::LatentField;
use crate::schedule::Schedule;
use crate::warpfield::Codec;

use super::{
    gmm_denoise, Denoiser, DenoiserRequest, DenoiserResponse, FeaturePack, GaussianMixture,
};

/// Per-view mixture over encoded ground-truth renders of several texture
/// variants of the same mesh.
///
/// Each view samples its own variant independently unless the sampler couples
/// the views, which is the ambiguity multi-view guidance has to resolve.
#[derive(Debug, Clone)]
pub struct MeshOracleDenoiser {
    per_view: Vec<GaussianMixture>,
}

impl MeshOracleDenoiser {
    /// `renders[k][v]` is variant `k` seen from view `v`.
    pub fn from_renders(
        renders: &[Vec<Array3<f64>>],
        codec: &dyn Codec,
        weights: Option<Vec<f64>>,
        spread: f64,
    ) -> Result<Self> {
        if renders.is_empty() {
            return Err(Error::config(
                "denoiser.variants",
                "at least one texture variant required",
            ));
        }
        let views = renders[0].len();
        if renders.iter().any(|r| r.len() != views) {
            return Err(Error::config(
                "denoiser.variants",
                "variants cover different view counts",
            ));
        }
        let k = renders.len();
        let weights = weights.unwrap_or_else(|| vec![1.0 / k as f64; k]);
        let per_view = (0..views)
            .map(|v| {
                let comps = renders
                    .iter()
                    .map(|variant| codec.encode(&variant[v]).map(LatentField::latent))
                    .collect::<Result<Vec<_>>>()?;
                GaussianMixture::new(comps, weights.clone())?.with_spread(spread)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { per_view })
    }

    pub fn num_views(&self) -> usize {
        self.per_view.len()
    }

    pub fn mixture(&self, view_id: usize) -> Result<&GaussianMixture> {
        self.per_view.get(view_id).ok_or_else(|| {
            Error::config(
                "denoiser.variants",
                format!(
                    "no render for view {view_id} ({} views)",
                    self.per_view.len()
                ),
            )
        })
    }
}

impl Denoiser for MeshOracleDenoiser {
    fn denoise(&self, req: &DenoiserRequest<'_>, schedule: &Schedule) -> Result<DenoiserResponse> {
        gmm_denoise(req, self.mixture(req.view_id)?, schedule)
    }

    fn reference_features(
        &self,
        req: &DenoiserRequest<'_>,
        schedule: &Schedule,
    ) -> Result<Option<FeaturePack>> {
        self.mixture(req.view_id)?
            .features(req.latent, req.timestep, schedule)
            .map(Some)
    }
}
