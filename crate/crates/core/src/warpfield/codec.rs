use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Latent/image codec. Both reference codecs are linear, so their adjoints
/// are exact and gradients can be pulled back through them.
pub trait Codec: Send + Sync + std::fmt::Debug {
    /// Image pixels per latent texel along each axis.
    fn ratio(&self) -> usize;
    fn encode(&self, image: &Array3<f64>) -> Result<Array3<f64>>;
    fn decode(&self, latent: &Array3<f64>) -> Result<Array3<f64>>;
    fn encode_adjoint(&self, grad_latent: &Array3<f64>) -> Result<Array3<f64>>;
    fn decode_adjoint(&self, grad_image: &Array3<f64>) -> Result<Array3<f64>>;

    fn latent_shape(&self, image: (usize, usize, usize)) -> (usize, usize, usize) {
        let r = self.ratio();
        (image.0, image.1 / r, image.2 / r)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CodecSpec {
    #[default]
    Identity,
    Pool {
        factor: usize,
    },
}

impl CodecSpec {
    pub fn build(&self) -> Result<Box<dyn Codec>> {
        Ok(match *self {
            CodecSpec::Identity => Box::new(IdentityCodec),
            CodecSpec::Pool { factor } => {
                if factor == 0 {
                    return Err(Error::config("codec.factor", "must be positive"));
                }
                Box::new(PoolCodec::new(factor))
            }
        })
    }
}

/// Latent equals image.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityCodec;

impl Codec for IdentityCodec {
    fn ratio(&self) -> usize {
        1
    }

    fn encode(&self, image: &Array3<f64>) -> Result<Array3<f64>> {
        Ok(image.clone())
    }

    fn decode(&self, latent: &Array3<f64>) -> Result<Array3<f64>> {
        Ok(latent.clone())
    }

    fn encode_adjoint(&self, grad_latent: &Array3<f64>) -> Result<Array3<f64>> {
        Ok(grad_latent.clone())
    }

    fn decode_adjoint(&self, grad_image: &Array3<f64>) -> Result<Array3<f64>> {
        Ok(grad_image.clone())
    }
}

/// Area-pooling encoder with a smooth decoder.
///
/// `decode(z) = B z + U (z - P B z)` where `P` pools, `B` upsamples
/// bilinearly and `U` replicates blocks. Because `P U = I`, `encode` is an
/// exact left inverse of `decode` and `decode . encode` is a projection.
#[derive(Debug, Clone, Copy)]
pub struct PoolCodec {
    factor: usize,
}

impl PoolCodec {
    pub fn new(factor: usize) -> Self {
        assert!(factor > 0, "pool factor must be positive");
        Self { factor }
    }

    fn check_image(&self, shape: (usize, usize, usize)) -> Result<()> {
        let f = self.factor;
        if !shape.1.is_multiple_of(f) || !shape.2.is_multiple_of(f) {
            return Err(Error::contract(format!(
                "image {}x{} is not divisible by pool factor {f}",
                shape.1, shape.2
            )));
        }
        Ok(())
    }

    fn pool(&self, image: &Array3<f64>) -> Array3<f64> {
        let f = self.factor;
        let (c, h, w) = image.dim();
        let norm = 1.0 / (f * f) as f64;
        Array3::from_shape_fn((c, h / f, w / f), |(k, y, x)| {
            image
                .slice(s![k, y * f..(y + 1) * f, x * f..(x + 1) * f])
                .sum()
                * norm
        })
    }

    fn pool_adjoint(&self, g: &Array3<f64>) -> Array3<f64> {
        let f = self.factor;
        let norm = 1.0 / (f * f) as f64;
        let (c, h, w) = g.dim();
        Array3::from_shape_fn((c, h * f, w * f), |(k, y, x)| g[[k, y / f, x / f]] * norm)
    }

    fn replicate(&self, z: &Array3<f64>) -> Array3<f64> {
        let f = self.factor;
        let (c, h, w) = z.dim();
        Array3::from_shape_fn((c, h * f, w * f), |(k, y, x)| z[[k, y / f, x / f]])
    }

    fn replicate_adjoint(&self, g: &Array3<f64>) -> Array3<f64> {
        let f = self.factor;
        let (c, h, w) = g.dim();
        Array3::from_shape_fn((c, h / f, w / f), |(k, y, x)| {
            g.slice(s![k, y * f..(y + 1) * f, x * f..(x + 1) * f]).sum()
        })
    }

    /// Interpolation taps `(lo, hi, t)` for output index `i` along an axis
    /// of `n` latent texels.
    fn taps(&self, i: usize, n: usize) -> (usize, usize, f64) {
        let s = ((i as f64 + 0.5) / self.factor as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, s - lo as f64)
    }

    fn bilinear(&self, z: &Array3<f64>) -> Array3<f64> {
        let f = self.factor;
        let (c, h, w) = z.dim();
        let ys: Vec<_> = (0..h * f).map(|y| self.taps(y, h)).collect();
        let xs: Vec<_> = (0..w * f).map(|x| self.taps(x, w)).collect();
        Array3::from_shape_fn((c, h * f, w * f), |(k, y, x)| {
            let (y0, y1, ty) = ys[y];
            let (x0, x1, tx) = xs[x];
            (1.0 - ty) * ((1.0 - tx) * z[[k, y0, x0]] + tx * z[[k, y0, x1]])
                + ty * ((1.0 - tx) * z[[k, y1, x0]] + tx * z[[k, y1, x1]])
        })
    }

    fn bilinear_adjoint(&self, g: &Array3<f64>) -> Array3<f64> {
        let f = self.factor;
        let (c, hh, ww) = g.dim();
        let (h, w) = (hh / f, ww / f);
        let ys: Vec<_> = (0..hh).map(|y| self.taps(y, h)).collect();
        let xs: Vec<_> = (0..ww).map(|x| self.taps(x, w)).collect();
        let mut out = Array3::zeros((c, h, w));
        for k in 0..c {
            for y in 0..hh {
                let (y0, y1, ty) = ys[y];
                for x in 0..ww {
                    let (x0, x1, tx) = xs[x];
                    let v = g[[k, y, x]];
                    out[[k, y0, x0]] += (1.0 - ty) * (1.0 - tx) * v;
                    out[[k, y0, x1]] += (1.0 - ty) * tx * v;
                    out[[k, y1, x0]] += ty * (1.0 - tx) * v;
                    out[[k, y1, x1]] += ty * tx * v;
                }
            }
        }
        out
    }
}

impl Codec for PoolCodec {
    fn ratio(&self) -> usize {
        self.factor
    }

    fn encode(&self, image: &Array3<f64>) -> Result<Array3<f64>> {
        self.check_image(image.dim())?;
        Ok(self.pool(image))
    }

    fn decode(&self, latent: &Array3<f64>) -> Result<Array3<f64>> {
        if latent.dim().1 == 0 || latent.dim().2 == 0 {
            return Err(Error::contract("empty latent"));
        }
        let up = self.bilinear(latent);
        let residual = latent - &self.pool(&up);
        Ok(up + self.replicate(&residual))
    }

    fn encode_adjoint(&self, grad_latent: &Array3<f64>) -> Result<Array3<f64>> {
        Ok(self.pool_adjoint(grad_latent))
    }

    fn decode_adjoint(&self, grad_image: &Array3<f64>) -> Result<Array3<f64>> {
        self.check_image(grad_image.dim())?;
        let ut = self.replicate_adjoint(grad_image);
        let correction = self.bilinear_adjoint(&self.pool_adjoint(&ut));
        Ok(self.bilinear_adjoint(grad_image) + ut - correction)
    }
}
