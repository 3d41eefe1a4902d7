use ndarray::{Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which space a tensor lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Latent,
    Image,
}

/// A `(channels, height, width)` tensor of reals tagged with its space.
///
/// Holds latents `x_t`, predicted originals and noises alike.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentField {
    data: Array3<f64>,
    space: Space,
}

impl LatentField {
    pub fn new(data: Array3<f64>, space: Space) -> Self {
        Self { data, space }
    }

    pub fn latent(data: Array3<f64>) -> Self {
        Self::new(data, Space::Latent)
    }

    pub fn image(data: Array3<f64>) -> Self {
        Self::new(data, Space::Image)
    }

    pub fn zeros(shape: (usize, usize, usize), space: Space) -> Self {
        Self::new(Array3::zeros(shape), space)
    }

    pub fn filled(shape: (usize, usize, usize), value: f64, space: Space) -> Self {
        Self::new(Array3::from_elem(shape, value), space)
    }

    /// Builds a field and rejects non-finite entries.
    pub fn try_new(data: Array3<f64>, space: Space) -> Result<Self> {
        let field = Self::new(data, space);
        if !field.is_finite() {
            return Err(Error::contract("field contains non-finite entries"));
        }
        Ok(field)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn with_space(mut self, space: Space) -> Self {
        self.space = space;
        self
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_shape(&self, other: &LatentField, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::contract(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// Elementwise `f(self, other)` into a new field with `self`'s space.
    pub fn zip_map(&self, other: &LatentField, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.ensure_same_shape(other, "zip_map")?;
        let data = Zip::from(&self.data)
            .and(&other.data)
            .map_collect(|&a, &b| f(a, b));
        Ok(Self::new(data, self.space))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::new(self.data.mapv(f), self.space)
    }

    pub fn max_abs_diff(&self, other: &LatentField) -> Result<f64> {
        self.ensure_same_shape(other, "max_abs_diff")?;
        Ok(Zip::from(&self.data)
            .and(&other.data)
            .fold(0.0f64, |m, &a, &b| m.max((a - b).abs())))
    }

    pub fn sum_sq_diff(&self, other: &LatentField) -> Result<f64> {
        self.ensure_same_shape(other, "sum_sq_diff")?;
        Ok(Zip::from(&self.data)
            .and(&other.data)
            .fold(0.0f64, |s, &a, &b| s + (a - b) * (a - b)))
    }
}
