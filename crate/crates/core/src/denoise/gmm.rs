use ndarray::{Array2, Zip};

use crate::error::{Error, Result};
use crate::field::LatentField;
use crate::schedule::{noise_from_original, Schedule};

use super::{extended_attention, Denoiser, DenoiserRequest, DenoiserResponse, FeaturePack};

/// Mixture prior over clean signals.
///
/// With `spread = 0` every component is a point mass at `x*_k` and the
/// posterior mean is the responsibility-weighted mean of the components.
/// A positive spread gives each component isotropic standard deviation
/// `spread`, which adds a continuous, noise-dependent part to the sample.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    components: Vec<LatentField>,
    weights: Vec<f64>,
    spread: f64,
}

impl GaussianMixture {
    pub fn new(components: Vec<LatentField>, weights: Vec<f64>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::config(
                "gmm.components",
                "at least one component required",
            ));
        }
        if weights.len() != components.len() {
            return Err(Error::config(
                "gmm.weights",
                format!(
                    "{} weights for {} components",
                    weights.len(),
                    components.len()
                ),
            ));
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::config("gmm.weights", "weights must be positive"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(
                "gmm.weights",
                format!("weights sum to {sum}, not 1"),
            ));
        }
        let shape = components[0].shape();
        if components.iter().any(|c| c.shape() != shape) {
            return Err(Error::config(
                "gmm.components",
                "components differ in shape",
            ));
        }
        if components.iter().any(|c| !c.is_finite()) {
            return Err(Error::config("gmm.components", "non-finite component"));
        }
        Ok(Self {
            components,
            weights,
            spread: 0.0,
        })
    }

    pub fn uniform(components: Vec<LatentField>) -> Result<Self> {
        let k = components.len().max(1);
        Self::new(components, vec![1.0 / k as f64; k])
    }

    pub fn with_spread(mut self, spread: f64) -> Result<Self> {
        if !(spread >= 0.0) || !spread.is_finite() {
            return Err(Error::config("gmm.spread", "must be finite and >= 0"));
        }
        self.spread = spread;
        Ok(self)
    }

    pub fn components(&self) -> &[LatentField] {
        &self.components
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn spread(&self) -> f64 {
        self.spread
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.components[0].shape()
    }

    pub fn prior_mean(&self) -> LatentField {
        let mut out = LatentField::zeros(self.shape(), self.components[0].space());
        for (c, &w) in self.components.iter().zip(&self.weights) {
            out.data_mut().scaled_add(w, c.data());
        }
        out
    }

    /// Normalized log responsibilities `log w_k(x_t)`.
    pub fn log_responsibilities(
        &self,
        x_t: &LatentField,
        t: usize,
        s: &Schedule,
    ) -> Result<Vec<f64>> {
        self.components[0].ensure_same_shape(x_t, "gmm")?;
        let a = s.alpha_bar(t);
        let sa = a.sqrt();
        let var = a * self.spread * self.spread + (1.0 - a);
        let logits: Vec<f64> = self
            .components
            .iter()
            .zip(&self.weights)
            .map(|(c, &w)| {
                let d2 = Zip::from(x_t.data())
                    .and(c.data())
                    .fold(0.0, |acc, &x, &m| {
                        let d = x - sa * m;
                        acc + d * d
                    });
                w.ln() - d2 / (2.0 * var)
            })
            .collect();
        normalize_log(&logits).ok_or_else(|| Error::Numerical {
            timestep: t,
            reason: "all mixture responsibilities underflowed".into(),
        })
    }

    pub fn responsibilities(&self, x_t: &LatentField, t: usize, s: &Schedule) -> Result<Vec<f64>> {
        Ok(self
            .log_responsibilities(x_t, t, s)?
            .into_iter()
            .map(f64::exp)
            .collect())
    }

    /// Posterior mean of `x_0` given `x_t` and component probabilities.
    pub fn posterior_mean(&self, x_t: &LatentField, resp: &[f64], alpha_bar: f64) -> LatentField {
        let mut mean = LatentField::zeros(self.shape(), x_t.space());
        for (c, &w) in self.components.iter().zip(resp) {
            mean.data_mut().scaled_add(w, c.data());
        }
        if self.spread == 0.0 {
            return mean;
        }
        let s2 = self.spread * self.spread;
        let sa = alpha_bar.sqrt();
        let gain = s2 * sa / (alpha_bar * s2 + 1.0 - alpha_bar);
        Zip::from(mean.data_mut())
            .and(x_t.data())
            .for_each(|m, &x| *m += gain * (x - sa * *m));
        mean
    }

    /// Attention keys and values exposing this latent's component beliefs.
    pub fn features(&self, x_t: &LatentField, t: usize, s: &Schedule) -> Result<FeaturePack> {
        let log_p = self.log_responsibilities(x_t, t, s)?;
        let k = log_p.len();
        Ok(FeaturePack {
            keys: Array2::from_shape_vec((k, 1), log_p).expect("k x 1"),
            values: Array2::eye(k),
        })
    }

    /// Predicted original, with component beliefs mixed with a reference
    /// view's through extended attention when `reference` is given.
    pub fn predict(
        &self,
        x_t: &LatentField,
        t: usize,
        s: &Schedule,
        reference: Option<&FeaturePack>,
    ) -> Result<LatentField> {
        let log_p = self.log_responsibilities(x_t, t, s)?;
        let resp = match reference {
            None => log_p.iter().map(|v| v.exp()).collect::<Vec<_>>(),
            Some(pack) => mix_with_reference(&log_p, pack)?,
        };
        Ok(self.posterior_mean(x_t, &resp, s.alpha_bar(t)))
    }
}

/// Shifts logits so that they exponentiate to a distribution.
fn normalize_log(logits: &[f64]) -> Option<Vec<f64>> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    if !lse.is_finite() {
        return None;
    }
    Some(logits.iter().map(|l| l - lse).collect())
}

fn mix_with_reference(log_p: &[f64], pack: &FeaturePack) -> Result<Vec<f64>> {
    let k = log_p.len();
    if pack.keys.dim() != (k, 1) || pack.values.dim() != (k, k) {
        return Err(Error::contract(format!(
            "reference features {:?}/{:?} do not match {k} mixture components",
            pack.keys.dim(),
            pack.values.dim()
        )));
    }
    let q = Array2::from_elem((1, 1), 1.0);
    let keys = Array2::from_shape_vec((k, 1), log_p.to_vec()).expect("k x 1");
    let out = extended_attention(&q, &keys, &Array2::eye(k), &pack.keys, &pack.values)?;
    Ok(out.row(0).to_vec())
}

/// Posterior-mean denoiser for a mixture prior.
pub fn gmm_denoise(
    req: &DenoiserRequest<'_>,
    gmm: &GaussianMixture,
    s: &Schedule,
) -> Result<DenoiserResponse> {
    s.check_step(req.timestep)?;
    let x0 = gmm.predict(req.latent, req.timestep, s, req.reference_features)?;
    let eps = noise_from_original(req.latent, &x0, req.timestep, s)?;
    Ok(DenoiserResponse { eps })
}

/// A single mixture shared by every view.
#[derive(Debug, Clone)]
pub struct GmmDenoiser {
    pub gmm: GaussianMixture,
}

impl GmmDenoiser {
    pub fn new(gmm: GaussianMixture) -> Self {
        Self { gmm }
    }
}

impl Denoiser for GmmDenoiser {
    fn denoise(&self, req: &DenoiserRequest<'_>, schedule: &Schedule) -> Result<DenoiserResponse> {
        gmm_denoise(req, &self.gmm, schedule)
    }

    fn reference_features(
        &self,
        req: &DenoiserRequest<'_>,
        schedule: &Schedule,
    ) -> Result<Option<FeaturePack>> {
        self.gmm
            .features(req.latent, req.timestep, schedule)
            .map(Some)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoise::oracle_denoise;
    use crate::field::Space;
    use crate::schedule::predict_original;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn scalar(v: f64) -> LatentField {
        LatentField::filled((1, 1, 1), v, Space::Latent)
    }

    fn sched(a: f64) -> Schedule {
        Schedule::from_alpha_bar(vec![1.0, a]).unwrap()
    }

    #[test]
    fn single_component_matches_oracle() {
        let s = Schedule::new(10, Default::default()).unwrap();
        let c = LatentField::new(
            Array3::from_shape_fn((2, 3, 3), |(c, y, x)| (c + y) as f64 * 0.3 - x as f64 * 0.1),
            Space::Latent,
        );
        let g = GaussianMixture::uniform(vec![c.clone()]).unwrap();
        let x = LatentField::filled((2, 3, 3), 0.7, Space::Latent);
        let req = DenoiserRequest::new(0, 6, &x);
        let a = gmm_denoise(&req, &g, &s).unwrap();
        let b = oracle_denoise(&req, &c, &s).unwrap();
        assert!(a.eps.max_abs_diff(&b.eps).unwrap() < 1e-12);
    }

    #[test]
    fn symmetric_components_at_origin_give_zero() {
        let g = GaussianMixture::uniform(vec![scalar(1.5), scalar(-1.5)]).unwrap();
        let s = sched(0.5);
        let x0 = g.predict(&scalar(0.0), 1, &s, None).unwrap();
        assert!(x0.data()[[0, 0, 0]].abs() < 1e-15);
    }

    #[test]
    fn two_component_scalar_example() {
        let g = GaussianMixture::new(vec![scalar(0.0), scalar(1.0)], vec![0.5, 0.5]).unwrap();
        let s = sched(0.64);
        let x = scalar(0.8);
        let x0 = g.predict(&x, 1, &s, None).unwrap().data()[[0, 0, 0]];
        // Unnormalized weights exp(-0.64/0.72) and exp(0) evaluated directly.
        let w0 = (-0.8f64 * 0.8 / 0.72).exp();
        let w1 = 1.0f64;
        let expected = (w0 * 0.0 + w1 * 1.0) / (w0 + w1);
        assert!((x0 - expected).abs() < 1e-12);
        assert!((x0 - 0.708_660_825_0).abs() < 1e-9);
        let eps = gmm_denoise(&DenoiserRequest::new(0, 1, &x), &g, &s)
            .unwrap()
            .eps;
        let back = predict_original(&x, &eps, 1, &s).unwrap();
        assert!((back.data()[[0, 0, 0]] - x0).abs() < 1e-12);
    }

    #[test]
    fn late_timesteps_do_not_underflow() {
        let g = GaussianMixture::uniform(vec![scalar(-3.0), scalar(3.0)]).unwrap();
        let s = sched(1.0 - 1e-12);
        let r = g.responsibilities(&scalar(2.9), 1, &s).unwrap();
        assert!((r[1] - 1.0).abs() < 1e-12);
        let bad = g.responsibilities(&scalar(f64::NAN), 1, &s);
        assert!(matches!(bad, Err(Error::Numerical { timestep: 1, .. })));
    }

    #[test]
    fn early_timesteps_approach_prior_mean() {
        let g = GaussianMixture::new(
            vec![scalar(-1.0), scalar(0.5), scalar(2.0)],
            vec![0.2, 0.3, 0.5],
        )
        .unwrap();
        let s = sched(1e-4);
        let prior = g.prior_mean().data()[[0, 0, 0]];
        for x in [-0.5, 0.0, 0.5] {
            let x0 = g.predict(&scalar(x), 1, &s, None).unwrap().data()[[0, 0, 0]];
            assert!(
                (x0 - prior).abs() <= 1e-2 * prior.abs().max(1e-12),
                "{x0} vs {prior}"
            );
        }
    }

    #[test]
    fn spread_posterior_matches_scalar_gaussian() {
        // One component with std s: x0 | x_t is Gaussian with the standard
        // conjugate mean m + s^2 sqrt(a) / (a s^2 + 1 - a) (x - sqrt(a) m).
        let g = GaussianMixture::uniform(vec![scalar(0.4)])
            .unwrap()
            .with_spread(0.5)
            .unwrap();
        let a: f64 = 0.3;
        let x: f64 = -0.2;
        let prec = 1.0 / 0.25 + a / (1.0 - a);
        let expected = (0.4 / 0.25 + a.sqrt() * x / (1.0 - a)) / prec;
        let got = g.predict(&scalar(x), 1, &sched(a), None).unwrap().data()[[0, 0, 0]];
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn reference_features_average_beliefs() {
        let g = GaussianMixture::uniform(vec![scalar(-1.0), scalar(1.0)]).unwrap();
        let s = sched(0.5);
        let own = g.responsibilities(&scalar(0.6), 1, &s).unwrap();
        let reference = g.features(&scalar(-0.9), 1, &s).unwrap();
        let ref_p: Vec<f64> = reference.keys.iter().map(|v| v.exp()).collect();
        let x0 = g
            .predict(&scalar(0.6), 1, &s, Some(&reference))
            .unwrap()
            .data()[[0, 0, 0]];
        let expected = -(own[0] + ref_p[0]) / 2.0 + (own[1] + ref_p[1]) / 2.0;
        assert!((x0 - expected).abs() < 1e-12);
        // a view used as its own reference is unaffected
        let me = g.features(&scalar(0.6), 1, &s).unwrap();
        let a = g.predict(&scalar(0.6), 1, &s, Some(&me)).unwrap();
        let b = g.predict(&scalar(0.6), 1, &s, None).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
    }

    #[test]
    fn invalid_weights_rejected() {
        assert!(GaussianMixture::new(vec![scalar(0.0)], vec![0.9]).is_err());
        assert!(GaussianMixture::new(vec![scalar(0.0), scalar(1.0)], vec![1.5, -0.5]).is_err());
        assert!(GaussianMixture::new(vec![], vec![]).is_err());
        assert!(GaussianMixture::uniform(vec![
            scalar(0.0),
            LatentField::zeros((1, 2, 1), Space::Latent)
        ])
        .is_err());
    }

    proptest! {
        #[test]
        fn responsibilities_sum_to_one(
            x in -5.0f64..5.0, a in 1e-4f64..0.9999,
            m in proptest::collection::vec(-3.0f64..3.0, 1..6),
        ) {
            let g = GaussianMixture::uniform(m.iter().map(|&v| scalar(v)).collect()).unwrap();
            let r = g.responsibilities(&scalar(x), 1, &sched(a)).unwrap();
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            let x0 = g.predict(&scalar(x), 1, &sched(a), None).unwrap();
            prop_assert!(x0.is_finite());
        }
    }
}
