//! The denoiser contract and analytic reference denoisers.
//!
//! A denoiser maps a latent at timestep `t` to a noise prediction `eps_t`.
//! The references here are exact posterior means of simple priors, so every
//! sampler identity can be checked without a trained network.

mod attention;
mod gmm;
mod mesh_oracle;
mod oracle;

use std::collections::BTreeMap;

use ndarray::{Array2, Array3};

pub use attention::{attention, attention_weights, extended_attention};
pub use gmm::{gmm_denoise, GaussianMixture, GmmDenoiser};
pub use mesh_oracle::MeshOracleDenoiser;
pub use oracle::{oracle_denoise, OracleDenoiser};

use crate::error::Result;
use crate::field::LatentField;
use crate::schedule::Schedule;

/// Named image maps passed alongside a request (`depth`, `normal`, ...).
pub type Conditions = BTreeMap<String, Array3<f64>>;

static NO_CONDITIONS: Conditions = BTreeMap::new();

/// Keys and values a reference view contributes to extended attention.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePack {
    pub keys: Array2<f64>,
    pub values: Array2<f64>,
}

/// Whether one denoiser instance may serve several views at once.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Concurrency {
    ConcurrentSafe,
    SerialOnly,
}

#[derive(Debug, Clone, Copy)]
pub struct DenoiserRequest<'a> {
    pub view_id: usize,
    pub timestep: usize,
    pub latent: &'a LatentField,
    pub conditions: &'a Conditions,
    pub prompt: Option<&'a str>,
    pub reference_features: Option<&'a FeaturePack>,
}

impl<'a> DenoiserRequest<'a> {
    pub fn new(view_id: usize, timestep: usize, latent: &'a LatentField) -> Self {
        Self {
            view_id,
            timestep,
            latent,
            conditions: &NO_CONDITIONS,
            prompt: None,
            reference_features: None,
        }
    }

    pub fn with_conditions(mut self, conditions: &'a Conditions) -> Self {
        self.conditions = conditions;
        self
    }

    pub fn with_prompt(mut self, prompt: Option<&'a str>) -> Self {
        self.prompt = prompt;
        self
    }

    pub fn with_reference(mut self, features: Option<&'a FeaturePack>) -> Self {
        self.reference_features = features;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserResponse {
    pub eps: LatentField,
}

pub trait Denoiser: Send + Sync {
    fn denoise(&self, req: &DenoiserRequest<'_>, schedule: &Schedule) -> Result<DenoiserResponse>;

    fn concurrency(&self) -> Concurrency {
        Concurrency::ConcurrentSafe
    }

    /// Features this denoiser exposes when `req`'s view acts as the
    /// attention reference. Denoisers without an attention hook return `None`.
    fn reference_features(
        &self,
        _req: &DenoiserRequest<'_>,
        _schedule: &Schedule,
    ) -> Result<Option<FeaturePack>> {
        Ok(None)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for Box<D> {
    fn denoise(&self, req: &DenoiserRequest<'_>, schedule: &Schedule) -> Result<DenoiserResponse> {
        (**self).denoise(req, schedule)
    }

    fn concurrency(&self) -> Concurrency {
        (**self).concurrency()
    }

    fn reference_features(
        &self,
        req: &DenoiserRequest<'_>,
        schedule: &Schedule,
    ) -> Result<Option<FeaturePack>> {
        (**self).reference_features(req, schedule)
    }
}

impl<D: Denoiser + ?Sized> Denoiser for std::sync::Arc<D> {
    fn denoise(&self, req: &DenoiserRequest<'_>, schedule: &Schedule) -> Result<DenoiserResponse> {
        (**self).denoise(req, schedule)
    }

    fn concurrency(&self) -> Concurrency {
        (**self).concurrency()
    }

    fn reference_features(
        &self,
        req: &DenoiserRequest<'_>,
        schedule: &Schedule,
    ) -> Result<Option<FeaturePack>> {
        (**self).reference_features(req, schedule)
    }
}

/// Checks a response against the request it answers.
pub fn check_response(req: &DenoiserRequest<'_>, resp: &DenoiserResponse) -> Result<()> {
    if resp.eps.shape() != req.latent.shape() {
        return Err(crate::Error::Denoiser {
            view_id: req.view_id,
            timestep: req.timestep,
            reason: format!(
                "response shape {:?} differs from latent shape {:?}",
                resp.eps.shape(),
                req.latent.shape()
            ),
        });
    }
    if !resp.eps.is_finite() {
        return Err(crate::Error::Denoiser {
            view_id: req.view_id,
            timestep: req.timestep,
            reason: "non-finite noise prediction".into(),
        });
    }
    Ok(())
}
