//! Deterministic (DDIM) sampling constants and step algebra.
//!
//! Timesteps run `t = T, ..., 1` and `alpha_bar[0] = 1`, so the final step
//! lands exactly on the predicted original.

use ndarray::Zip;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::LatentField;

/// How the cumulative `alpha_bar` table was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BetaSpec {
    Linear {
        beta_start: f64,
        beta_end: f64,
    },
    Cosine,
    /// Table received verbatim, e.g. from a remote peer.
    Explicit,
}

impl Default for BetaSpec {
    fn default() -> Self {
        BetaSpec::Linear {
            beta_start: 8.5e-4,
            beta_end: 1.2e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    num_steps: usize,
    alpha_bar: Vec<f64>,
    beta_spec: BetaSpec,
}

impl Schedule {
    pub fn new(num_steps: usize, beta_spec: BetaSpec) -> Result<Self> {
        if num_steps < 1 {
            return Err(Error::config("schedule.num_steps", "must be at least 1"));
        }
        let betas: Vec<f64> = match &beta_spec {
            BetaSpec::Linear {
                beta_start,
                beta_end,
            } => {
                let (b0, b1) = (*beta_start, *beta_end);
                if !(b0 > 0.0 && b0 < 1.0) {
                    return Err(Error::config(
                        "schedule.beta.beta_start",
                        format!("{b0} not in (0, 1)"),
                    ));
                }
                if !(b1 >= b0 && b1 < 1.0) {
                    return Err(Error::config(
                        "schedule.beta.beta_end",
                        format!("{b1} not in [beta_start, 1)"),
                    ));
                }
                if num_steps == 1 {
                    vec![b0]
                } else {
                    let span = (num_steps - 1) as f64;
                    (0..num_steps)
                        .map(|i| b0 + (b1 - b0) * i as f64 / span)
                        .collect()
                }
            }
            BetaSpec::Cosine => {
                let s = 0.008;
                let f = |t: f64| {
                    let x = (t / num_steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
                    x.cos().powi(2)
                };
                (1..=num_steps)
                    .map(|t| (1.0 - f(t as f64) / f((t - 1) as f64)).clamp(1e-8, 0.999))
                    .collect()
            }
            BetaSpec::Explicit => {
                return Err(Error::config(
                    "schedule.beta",
                    "explicit tables are built with Schedule::from_alpha_bar",
                ))
            }
        };
        let mut alpha_bar = Vec::with_capacity(num_steps + 1);
        alpha_bar.push(1.0);
        let mut prod = 1.0;
        for b in betas {
            prod *= 1.0 - b;
            alpha_bar.push(prod);
        }
        let s = Self {
            num_steps,
            alpha_bar,
            beta_spec,
        };
        s.validate()?;
        Ok(s)
    }

    /// Builds a schedule from a full `alpha_bar` table (`T + 1` entries).
    pub fn from_alpha_bar(alpha_bar: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::config(
                "schedule.alpha_bar",
                "needs at least two entries",
            ));
        }
        let s = Self {
            num_steps: alpha_bar.len() - 1,
            alpha_bar,
            beta_spec: BetaSpec::Explicit,
        };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        if self.alpha_bar[0] != 1.0 {
            return Err(Error::config(
                "schedule.alpha_bar",
                "alpha_bar[0] must be 1",
            ));
        }
        for (t, w) in self.alpha_bar.windows(2).enumerate() {
            if !(w[1] > 0.0 && w[1] <= 1.0 && w[1].is_finite()) {
                return Err(Error::config(
                    "schedule.alpha_bar",
                    format!("alpha_bar[{}] = {} outside (0, 1]", t + 1, w[1]),
                ));
            }
            if w[1] >= w[0] {
                return Err(Error::config(
                    "schedule.alpha_bar",
                    format!("not strictly decreasing at t = {}", t + 1),
                ));
            }
        }
        Ok(())
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn beta_spec(&self) -> &BetaSpec {
        &self.beta_spec
    }

    /// Fraction of the sampling run completed before step `t` executes.
    pub fn elapsed_fraction(&self, t: usize) -> f64 {
        (self.num_steps - t.min(self.num_steps)) as f64 / self.num_steps as f64
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.num_steps {
            return Err(Error::contract(format!(
                "timestep {t} outside 1..={}",
                self.num_steps
            )));
        }
        Ok(())
    }
}

/// `x_0 = (x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)`.
pub fn predict_original(
    x_t: &LatentField,
    eps: &LatentField,
    t: usize,
    s: &Schedule,
) -> Result<LatentField> {
    if t > s.num_steps() {
        return Err(Error::contract(format!("timestep {t} beyond schedule")));
    }
    let a = s.alpha_bar(t);
    let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
    x_t.zip_map(eps, |x, e| (x - sb * e) / sa)
}

/// One deterministic step `x_t -> x_{t-1}`.
pub fn ddim_step(
    x_t: &LatentField,
    eps: &LatentField,
    t: usize,
    s: &Schedule,
) -> Result<LatentField> {
    s.check_step(t)?;
    x_t.ensure_same_shape(eps, "ddim_step")?;
    let a = s.alpha_bar(t);
    let a_prev = s.alpha_bar(t - 1);
    let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
    let (pa, pb) = (a_prev.sqrt(), (1.0 - a_prev).sqrt());
    let data = Zip::from(x_t.data())
        .and(eps.data())
        .map_collect(|&x, &e| pa * ((x - sb * e) / sa) + pb * e);
    Ok(LatentField::new(data, x_t.space()))
}

/// Inverse of [`predict_original`]: the noise that maps `x_t` to `x0`.
pub fn noise_from_original(
    x_t: &LatentField,
    x0: &LatentField,
    t: usize,
    s: &Schedule,
) -> Result<LatentField> {
    if t > s.num_steps() {
        return Err(Error::contract(format!("timestep {t} beyond schedule")));
    }
    let a = s.alpha_bar(t);
    if a >= 1.0 {
        return Err(Error::Numerical {
            timestep: t,
            reason: "alpha_bar = 1 leaves the noise undetermined".into(),
        });
    }
    let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
    x_t.zip_map(x0, |x, o| (x - sa * o) / sb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Space;
    use ndarray::Array3;
    use proptest::prelude::*;

    fn scalar(v: f64) -> LatentField {
        LatentField::filled((1, 1, 1), v, Space::Latent)
    }

    fn two_step() -> Schedule {
        Schedule::from_alpha_bar(vec![1.0, 0.81, 0.64]).unwrap()
    }

    #[test]
    fn single_step_linear_schedule() {
        let s = Schedule::new(
            1,
            BetaSpec::Linear {
                beta_start: 0.19,
                beta_end: 0.19,
            },
        )
        .unwrap();
        assert_eq!(s.alpha_bars().len(), 2);
        assert!((s.alpha_bar(0) - 1.0).abs() < 1e-15);
        assert!((s.alpha_bar(1) - 0.81).abs() < 1e-15);
    }

    #[test]
    fn default_schedule_has_151_decreasing_entries() {
        let s = Schedule::new(150, BetaSpec::default()).unwrap();
        let ab = s.alpha_bars();
        assert_eq!(ab.len(), 151);
        assert_eq!(ab[0], 1.0);
        for w in ab.windows(2) {
            assert!(w[1] < w[0] && w[1] > 0.0);
        }
        let cos = Schedule::new(150, BetaSpec::Cosine).unwrap();
        assert!(cos.alpha_bar(150) > 0.0);
    }

    #[test]
    fn invalid_configurations_are_rejected() {
        let e = Schedule::new(0, BetaSpec::default()).unwrap_err();
        assert!(e.to_string().contains("num_steps"));
        let e = Schedule::new(
            10,
            BetaSpec::Linear {
                beta_start: 0.2,
                beta_end: 0.1,
            },
        )
        .unwrap_err();
        assert!(e.to_string().contains("beta_end"));
        let e = Schedule::new(
            10,
            BetaSpec::Linear {
                beta_start: 0.0,
                beta_end: 0.1,
            },
        )
        .unwrap_err();
        assert!(e.to_string().contains("beta_start"));
        assert!(Schedule::from_alpha_bar(vec![1.0, 0.5, 0.6]).is_err());
    }

    #[test]
    fn predict_original_examples() {
        let s = two_step();
        let x0 = predict_original(&scalar(1.0), &scalar(0.0), 2, &s).unwrap();
        assert!((x0.data()[[0, 0, 0]] - 1.25).abs() < 1e-12);
        let x0 = predict_original(&scalar(1.0), &scalar(0.5), 2, &s).unwrap();
        assert!((x0.data()[[0, 0, 0]] - 0.875).abs() < 1e-12);
        // alpha_bar(0) = 1 is the identity
        let x0 = predict_original(&scalar(0.3), &scalar(0.7), 0, &s).unwrap();
        assert!((x0.data()[[0, 0, 0]] - 0.3).abs() < 1e-15);
        let bad = LatentField::zeros((1, 1, 2), Space::Latent);
        assert!(predict_original(&scalar(1.0), &bad, 2, &s).is_err());
    }

    #[test]
    fn ddim_step_examples() {
        let s = two_step();
        // hand evaluation: 0.9 * 0.875 + sqrt(0.19) * 0.5
        let expected = 0.9 * 0.875 + 0.19f64.sqrt() * 0.5;
        assert!((expected - 1.005_444_947).abs() < 1e-9);
        let out = ddim_step(&scalar(1.0), &scalar(0.5), 2, &s).unwrap();
        assert!((out.data()[[0, 0, 0]] - expected).abs() < 1e-12);

        // t = 1 lands on the predicted original
        let x = scalar(0.4);
        let e = scalar(-1.3);
        let a = ddim_step(&x, &e, 1, &s).unwrap();
        let b = predict_original(&x, &e, 1, &s).unwrap();
        assert_eq!(a, b);

        // zero noise scales by sqrt(abar_{t-1} / abar_t)
        let out = ddim_step(&scalar(1.0), &scalar(0.0), 2, &s).unwrap();
        assert!((out.data()[[0, 0, 0]] - 0.9 / 0.8).abs() < 1e-12);

        assert!(ddim_step(&scalar(1.0), &scalar(0.0), 0, &s).is_err());
        assert!(ddim_step(&scalar(1.0), &scalar(0.0), 3, &s).is_err());
    }

    #[test]
    fn noise_from_original_examples() {
        let s = two_step();
        let e = noise_from_original(&scalar(1.0), &scalar(0.875), 2, &s).unwrap();
        assert!((e.data()[[0, 0, 0]] - 0.5).abs() < 1e-12);
        let e = noise_from_original(&scalar(1.0), &scalar(1.25), 2, &s).unwrap();
        assert!(e.data()[[0, 0, 0]].abs() < 1e-12);
        let err = noise_from_original(&scalar(1.0), &scalar(1.0), 0, &s).unwrap_err();
        assert!(matches!(err, Error::Numerical { timestep: 0, .. }));
    }

    #[test]
    fn ddim_step_is_deterministic() {
        let s = Schedule::new(150, BetaSpec::default()).unwrap();
        let x = LatentField::latent(Array3::from_shape_fn((3, 8, 8), |(c, y, x)| {
            ((c * 31 + y * 7 + x) as f64).sin()
        }));
        let e = x.map(|v| v.cos());
        let a = ddim_step(&x, &e, 77, &s).unwrap();
        let b = ddim_step(&x, &e, 77, &s).unwrap();
        assert!(a
            .data()
            .iter()
            .zip(b.data().iter())
            .all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    proptest! {
        #[test]
        fn noise_round_trip(
            vals in proptest::collection::vec(-4.0f64..4.0, 2 * 3 * 3 * 2),
            t in 1usize..=150,
        ) {
            let s = Schedule::new(150, BetaSpec::default()).unwrap();
            let (xs, es) = vals.split_at(18);
            let x = LatentField::latent(Array3::from_shape_vec((2, 3, 3), xs.to_vec()).unwrap());
            let e = LatentField::latent(Array3::from_shape_vec((2, 3, 3), es.to_vec()).unwrap());
            let x0 = predict_original(&x, &e, t, &s).unwrap();
            let back = noise_from_original(&x, &x0, t, &s).unwrap();
            prop_assert!(back.max_abs_diff(&e).unwrap() <= 1e-6);
        }
    }
}
