//! Shapes and multi-indices with row-major (last index fastest) layout.

use crate::error::{Error, Result};

/// A multi-index is one zero-based coordinate per dimension.
pub type MultiIndex = Vec<usize>;

/// Dimensions of a D-way tensor, D >= 1, every dimension >= 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shape {
    dims: Vec<usize>,
}

impl Shape {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Precondition("shape must have at least one dimension".into()));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Precondition(format!("zero-sized dimension in {dims:?}")));
        }
        let mut count: usize = 1;
        for &d in &dims {
            count = count.checked_mul(d).ok_or(Error::SizeCap {
                count: dims.iter().map(|&d| d as u128).product(),
                cap: usize::MAX as u128,
            })?;
        }
        let _ = count;
        Ok(Shape { dims })
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Total number of elements.
    pub fn count(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn contains(&self, idx: &[usize]) -> bool {
        idx.len() == self.dims.len() && idx.iter().zip(&self.dims).all(|(&i, &d)| i < d)
    }

    fn check(&self, idx: &[usize]) -> Result<()> {
        if !self.contains(idx) {
            return Err(Error::IndexOutOfRange { index: idx.to_vec(), dims: self.dims.clone() });
        }
        Ok(())
    }

    /// Row-major offset of a multi-index. Inverse of [`Shape::delinearize`].
    pub fn linear_index(&self, idx: &[usize]) -> Result<usize> {
        self.check(idx)?;
        let mut off = 0;
        for (i, d) in idx.iter().zip(&self.dims) {
            off = off * d + i;
        }
        Ok(off)
    }

    pub fn delinearize(&self, mut off: usize) -> MultiIndex {
        let mut idx = vec![0; self.dims.len()];
        for (k, &d) in self.dims.iter().enumerate().rev() {
            idx[k] = off % d;
            off /= d;
        }
        idx
    }

    /// Iterate all multi-indices in row-major order. Desk scale only.
    pub fn indices(&self) -> impl Iterator<Item = MultiIndex> + '_ {
        (0..self.count()).map(move |o| self.delinearize(o))
    }
}
