use ndarray::{Array2, Zip};

use crate::error::{Error, Result};
use crate::field::LatentField;
use crate::schedule::{noise_from_original, Schedule};

/// One term of the blend at target resolution: transported prediction
/// `x'_k`, transported distribution mean `mu'_k` and per-texel weight `M_k`.
#[derive(Debug, Clone, Copy)]
pub struct BlendInput<'a> {
    pub x: &'a LatentField,
    pub mu: &'a LatentField,
    pub weight: &'a Array2<f64>,
}

/// Variance-restoring factor `E = sum(M) / sqrt(sum(M^2))`; 1 for empty input.
pub fn blend_factor(weights: &[f64]) -> f64 {
    let sum: f64 = weights.iter().sum();
    let sq: f64 = weights.iter().map(|w| w * w).sum();
    if sq > 0.0 {
        (sum * sum / sq).sqrt()
    } else {
        1.0
    }
}

/// Occlusion-weighted blend of predicted originals.
///
/// Per texel: `x~ = sum_k (M_k / M_sum) (mu'_k + E (x'_k - mu'_k))`. Texels
/// with a single positive weight take that term's prediction unchanged, and
/// texels with no positive weight keep `own`.
pub fn blend_predictions(own: &LatentField, inputs: &[BlendInput<'_>]) -> Result<LatentField> {
    let (c, h, w) = own.shape();
    for (k, inp) in inputs.iter().enumerate() {
        if inp.x.shape() != own.shape() || inp.mu.shape() != own.shape() {
            return Err(Error::contract(format!(
                "blend input {k}: latent shape mismatch"
            )));
        }
        if inp.weight.dim() != (h, w) {
            return Err(Error::contract(format!(
                "blend input {k}: weight map {:?} vs latent {h}x{w}",
                inp.weight.dim()
            )));
        }
        if inp.weight.iter().any(|&m| !(m >= 0.0) || !m.is_finite()) {
            return Err(Error::contract(format!(
                "blend input {k}: negative or non-finite weight"
            )));
        }
    }
    let mut out = own.clone();
    let mut ws = Vec::with_capacity(inputs.len());
    let mut positive = Vec::with_capacity(inputs.len());
    for y in 0..h {
        for x in 0..w {
            ws.clear();
            ws.extend(inputs.iter().map(|inp| inp.weight[[y, x]]));
            positive.clear();
            positive.extend((0..ws.len()).filter(|&k| ws[k] > 0.0));
            match positive.len() {
                0 => {}
                1 => {
                    let src = inputs[positive[0]].x.data();
                    for ch in 0..c {
                        out.data_mut()[[ch, y, x]] = src[[ch, y, x]];
                    }
                }
                _ => {
                    let m_sum: f64 = positive.iter().map(|&k| ws[k]).sum();
                    let e = blend_factor(&ws);
                    for ch in 0..c {
                        let mut acc = 0.0;
                        for &k in &positive {
                            let xk = inputs[k].x.data()[[ch, y, x]];
                            let mk = inputs[k].mu.data()[[ch, y, x]];
                            acc += ws[k] / m_sum * (mk + e * (xk - mk));
                        }
                        out.data_mut()[[ch, y, x]] = acc;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Consistency-guided noise `(x_t - sqrt(abar_t) x~) / sqrt(1 - abar_t)`.
pub fn cg_noise(
    x_t: &LatentField,
    blended: &LatentField,
    t: usize,
    s: &Schedule,
) -> Result<LatentField> {
    noise_from_original(x_t, blended, t, s)
}

/// Overwrites `blended` with `closeup` wherever `weight > 0`.
pub fn apply_upper_body_replacement(
    blended: &LatentField,
    closeup: &LatentField,
    weight: &Array2<f64>,
) -> Result<LatentField> {
    blended.ensure_same_shape(closeup, "upper-body replacement")?;
    let (_, h, w) = blended.shape();
    if weight.dim() != (h, w) {
        return Err(Error::contract(
            "upper-body replacement: weight map size mismatch",
        ));
    }
    let mut out = blended.clone();
    for (mut o, c) in out
        .data_mut()
        .outer_iter_mut()
        .zip(closeup.data().outer_iter())
    {
        Zip::from(&mut o).and(&c).and(weight).for_each(|o, &c, &m| {
            if m > 0.0 {
                *o = c;
            }
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Space;
    use ndarray::Array3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn scalar(v: f64) -> LatentField {
        LatentField::filled((1, 1, 1), v, Space::Latent)
    }

    fn w1(v: f64) -> Array2<f64> {
        Array2::from_elem((1, 1), v)
    }

    #[test]
    fn two_view_scalar_example() {
        let (x0, x1, m0, m1) = (scalar(1.0), scalar(0.0), scalar(0.8), scalar(0.2));
        let (a, b) = (w1(1.2), w1(0.6));
        let inputs = [
            BlendInput {
                x: &x0,
                mu: &m0,
                weight: &a,
            },
            BlendInput {
                x: &x1,
                mu: &m1,
                weight: &b,
            },
        ];
        let out = blend_predictions(&x0, &inputs).unwrap().data()[[0, 0, 0]];
        let e = 1.8 / (1.2f64 * 1.2 + 0.6 * 0.6).sqrt();
        let expected = (1.2 / 1.8) * (0.8 + e * 0.2) + (0.6 / 1.8) * (0.2 + e * (0.0 - 0.2));
        assert!((out - expected).abs() < 1e-12);
        assert!((out - 0.689_442_719_1).abs() < 1e-9);
        assert!((e - 1.341_640_786_5).abs() < 1e-9);
    }

    #[test]
    fn cg_noise_scalar_example() {
        let s = Schedule::from_alpha_bar(vec![1.0, 0.64]).unwrap();
        let eps = cg_noise(&scalar(1.0), &scalar(0.69069), 1, &s)
            .unwrap()
            .data()[[0, 0, 0]];
        assert!((eps - (1.0 - 0.8 * 0.69069) / 0.6).abs() < 1e-12);
        assert!((eps - 0.74574).abs() < 1e-5);
    }

    #[test]
    fn self_only_returns_own_prediction() {
        let own = LatentField::new(
            Array3::from_shape_fn((2, 2, 2), |(c, y, x)| (c + 2 * y + 3 * x) as f64 * 0.37),
            Space::Latent,
        );
        let mu = own.map(|v| v * 1.7 - 0.2);
        let other = own.map(|v| -v);
        let ones = Array2::from_elem((2, 2), 1.2);
        let zeros = Array2::zeros((2, 2));
        let inputs = [
            BlendInput {
                x: &own,
                mu: &mu,
                weight: &ones,
            },
            BlendInput {
                x: &other,
                mu: &other,
                weight: &zeros,
            },
        ];
        assert_eq!(blend_predictions(&own, &inputs).unwrap(), own);
    }

    #[test]
    fn equal_weights_give_sqrt_n() {
        for n in [2usize, 4, 9] {
            let e = blend_factor(&vec![1.0; n]);
            assert_eq!(e, (n as f64).sqrt());
        }
        assert_eq!(blend_factor(&[0.0, 3.0, 0.0]), 1.0);
    }

    #[test]
    fn blended_noise_keeps_unit_variance() {
        let n = 4;
        let samples = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let e = blend_factor(&vec![1.0; n]);
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..samples {
            let mut v = 0.0;
            for _ in 0..n {
                let z: f64 = rng.sample(StandardNormal);
                v += e * z / n as f64;
            }
            sum += v;
            sq += v * v;
        }
        let mean = sum / samples as f64;
        let var = sq / samples as f64 - mean * mean;
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
    }

    #[test]
    fn replacement_is_per_texel_select() {
        let a = LatentField::new(
            Array3::from_shape_fn((2, 3, 4), |(c, y, x)| (c * 12 + y * 4 + x) as f64),
            Space::Latent,
        );
        let b = a.map(|v| -v - 1.0);
        let w = Array2::from_shape_fn((3, 4), |(_, x)| if x < 2 { 0.7 } else { 0.0 });
        let out = apply_upper_body_replacement(&a, &b, &w).unwrap();
        for ((c, y, x), v) in out.data().indexed_iter() {
            let expected = if w[[y, x]] > 0.0 {
                b.data()[[c, y, x]]
            } else {
                a.data()[[c, y, x]]
            };
            assert_eq!(*v, expected);
        }
        let none = apply_upper_body_replacement(&a, &b, &Array2::zeros((3, 4))).unwrap();
        assert_eq!(none, a);
        let all = apply_upper_body_replacement(&a, &b, &Array2::ones((3, 4))).unwrap();
        assert_eq!(all, b);
    }

    proptest! {
        #[test]
        fn blend_factor_at_least_one(ws in proptest::collection::vec(0.0f64..3.0, 1..10)) {
            let positive = ws.iter().filter(|&&w| w > 0.0).count();
            prop_assume!(positive > 0);
            let e = blend_factor(&ws);
            prop_assert!(e >= 1.0 - 1e-12);
            if positive == 1 {
                prop_assert!((e - 1.0).abs() < 1e-12);
            } else {
                prop_assert!(e > 1.0);
            }
        }
    }
}
