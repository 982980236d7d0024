//! Quantized index bijection: a D-way grid with power-of-two sides viewed as
//! a tensor with all mode sizes 2. The reshape exists only as an index map;
//! no data is moved.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::oracle::TensorOracle;
use crate::shape::{MultiIndex, Shape};

#[derive(Debug, Clone)]
pub struct QttMap {
    original: Shape,
    /// Sizes after rounding up to powers of two (equal to original when no
    /// padding was needed).
    padded: Vec<usize>,
    bits: Vec<u32>,
    padding: bool,
}

impl QttMap {
    /// Requires every dimension to be a power of two.
    pub fn new(original: Shape) -> Result<Self> {
        for (d, &size) in original.dims().iter().enumerate() {
            if !size.is_power_of_two() {
                return Err(Error::NotPowerOfTwo { dim: d, size });
            }
        }
        Ok(Self::build(original, false))
    }

    /// Rounds non-power-of-two dimensions up to the next power of two; the
    /// padded region is recorded so reconstruction can crop.
    pub fn new_padded(original: Shape) -> Self {
        Self::build(original, true)
    }

    fn build(original: Shape, padding: bool) -> Self {
        let padded: Vec<usize> =
            original.dims().iter().map(|&d| d.next_power_of_two().max(2)).collect();
        let bits: Vec<u32> = padded.iter().map(|&d| d.trailing_zeros()).collect();
        QttMap { original, padded, bits, padding }
    }

    pub fn original_shape(&self) -> &Shape {
        &self.original
    }

    pub fn padded_dims(&self) -> &[usize] {
        &self.padded
    }

    pub fn is_padded(&self) -> bool {
        self.padding && self.padded != self.original.dims()
    }

    pub fn bits(&self) -> &[u32] {
        &self.bits
    }

    /// Shape of the virtual tensor: sum(log2 I_d) dimensions of size 2.
    pub fn virtual_shape(&self) -> Shape {
        let total: u32 = self.bits.iter().sum();
        Shape::new(vec![2; total as usize]).expect("non-empty")
    }

    /// Original index -> virtual index. Most-significant bit first within
    /// each dimension's bit group; groups in original dimension order.
    pub fn forward(&self, idx: &[usize]) -> Result<MultiIndex> {
        if !self.original.contains(idx) {
            return Err(Error::IndexOutOfRange {
                index: idx.to_vec(),
                dims: self.original.dims().to_vec(),
            });
        }
        let mut out = Vec::with_capacity(self.bits.iter().sum::<u32>() as usize);
        for (&i, &b) in idx.iter().zip(&self.bits) {
            for k in (0..b).rev() {
                out.push((i >> k) & 1);
            }
        }
        Ok(out)
    }

    /// Virtual index -> index into the padded grid. May land in the padded
    /// region, i.e. outside the original shape.
    pub fn backward(&self, vidx: &[usize]) -> MultiIndex {
        let mut out = Vec::with_capacity(self.bits.len());
        let mut pos = 0;
        for &b in &self.bits {
            let mut i = 0usize;
            for _ in 0..b {
                i = (i << 1) | (vidx[pos] & 1);
                pos += 1;
            }
            out.push(i);
        }
        out
    }
}

/// Oracle over the virtual shape, reading through to the original oracle.
/// Padded entries are zero and do not touch the underlying oracle.
pub struct QttOracle<'a, O: TensorOracle> {
    inner: &'a O,
    map: QttMap,
    vshape: Shape,
    padded_hits: AtomicU64,
}

impl<'a, O: TensorOracle> QttOracle<'a, O> {
    pub fn new(inner: &'a O, map: QttMap) -> Self {
        let vshape = map.virtual_shape();
        QttOracle { inner, map, vshape, padded_hits: AtomicU64::new(0) }
    }

    pub fn map(&self) -> &QttMap {
        &self.map
    }
}

impl<O: TensorOracle> TensorOracle for QttOracle<'_, O> {
    fn shape(&self) -> &Shape {
        &self.vshape
    }

    fn eval(&self, idx: &[usize]) -> f64 {
        let orig = self.map.backward(idx);
        if self.map.original_shape().contains(&orig) {
            self.inner.eval(&orig)
        } else {
            self.padded_hits.fetch_add(1, Ordering::Relaxed);
            0.0
        }
    }

    fn samples(&self) -> u64 {
        self.inner.samples() + self.padded_hits.load(Ordering::Relaxed)
    }
}
