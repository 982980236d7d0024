//! Explicit dense tensors, used at desk scale and in test oracles.

use crate::error::{Error, Result};
use crate::shape::Shape;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    shape: Shape,
    data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.count() {
            return Err(Error::ShapeMismatch(format!(
                "data length {} != element count {}",
                data.len(),
                shape.count()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(shape.delinearize(pos)));
        }
        Ok(DenseTensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        let n = shape.count();
        DenseTensor { shape, data: vec![0.0; n] }
    }

    pub fn from_fn(shape: Shape, f: impl Fn(&[usize]) -> f64) -> Result<Self> {
        let data: Vec<f64> = shape.indices().map(|idx| f(&idx)).collect();
        DenseTensor::new(shape, data)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, idx: &[usize]) -> Result<f64> {
        Ok(self.data[self.shape.linear_index(idx)?])
    }

    pub fn set(&mut self, idx: &[usize], v: f64) -> Result<()> {
        let off = self.shape.linear_index(idx)?;
        self.data[off] = v;
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &DenseTensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn rel_frobenius_diff(&self, other: &DenseTensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        let num: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den = other.norm().max(f64::MIN_POSITIVE);
        num / den
    }
}
