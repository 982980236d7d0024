//! Black-box entry access to tensors that may never be materialized.
//!
//! An oracle is a pure, deterministic map from multi-index to value with a
//! monotone counter of scalar evaluations. Everything downstream (cross
//! approximation, training) touches data only through this interface.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::dense::DenseTensor;
use crate::error::Result;
use crate::shape::Shape;

pub trait TensorOracle: Sync {
    fn shape(&self) -> &Shape;

    /// Evaluate a single entry. Must be referentially transparent and safe
    /// for concurrent invocation. Each call bumps the sample counter by one.
    fn eval(&self, idx: &[usize]) -> f64;

    /// Number of scalar evaluations performed so far.
    fn samples(&self) -> u64;

    /// Fiber along dimension `dim`: all entries with coordinates
    /// `prefix ++ [i] ++ suffix` for i in 0..I_dim. Equals `I_dim`
    /// individual evaluations.
    fn fiber(&self, prefix: &[usize], dim: usize, suffix: &[usize]) -> Vec<f64> {
        let n = self.shape().dims()[dim];
        let mut idx = Vec::with_capacity(prefix.len() + 1 + suffix.len());
        idx.extend_from_slice(prefix);
        idx.push(0);
        idx.extend_from_slice(suffix);
        (0..n)
            .map(|i| {
                idx[prefix.len()] = i;
                self.eval(&idx)
            })
            .collect()
    }
}

/// Oracle over a closure. The workhorse for analytic fields and adapters.
pub struct FnOracle<F: Fn(&[usize]) -> f64 + Sync> {
    shape: Shape,
    f: F,
    counter: AtomicU64,
}

impl<F: Fn(&[usize]) -> f64 + Sync> FnOracle<F> {
    pub fn new(shape: Shape, f: F) -> Self {
        FnOracle { shape, f, counter: AtomicU64::new(0) }
    }
}

impl<F: Fn(&[usize]) -> f64 + Sync> TensorOracle for FnOracle<F> {
    fn shape(&self) -> &Shape {
        &self.shape
    }

    fn eval(&self, idx: &[usize]) -> f64 {
        debug_assert!(self.shape.contains(idx), "index {idx:?} out of range");
        self.counter.fetch_add(1, Ordering::Relaxed);
        (self.f)(idx)
    }

    fn samples(&self) -> u64 {
        self.counter.load(Ordering::Relaxed)
    }
}

/// Adapter exposing a dense tensor through the oracle interface, counting reads.
pub struct DenseOracle<'a> {
    tensor: &'a DenseTensor,
    counter: AtomicU64,
}

impl<'a> DenseOracle<'a> {
    pub fn new(tensor: &'a DenseTensor) -> Self {
        DenseOracle { tensor, counter: AtomicU64::new(0) }
    }
}

impl TensorOracle for DenseOracle<'_> {
    fn shape(&self) -> &Shape {
        self.tensor.shape()
    }

    fn eval(&self, idx: &[usize]) -> f64 {
        self.counter.fetch_add(1, Ordering::Relaxed);
        self.tensor.get(idx).expect("index in range")
    }

    fn samples(&self) -> u64 {
        self.counter.load(Ordering::Relaxed)
    }
}

/// Built-in analytic fields, evaluated on demand and never materialized.
pub mod fields {
    use super::*;

    pub type Field = FnOracle<Box<dyn Fn(&[usize]) -> f64 + Sync + Send>>;

    /// Separable Gaussian bump exp(-||x||^2) on the grid mapped to [-2, 2]^D.
    pub fn gaussian(shape: Shape) -> Field {
        let dims = shape.dims().to_vec();
        FnOracle::new(
            shape,
            Box::new(move |idx: &[usize]| {
                let sq: f64 = idx
                    .iter()
                    .zip(&dims)
                    .map(|(&i, &d)| {
                        let x = if d > 1 { 4.0 * (i as f64) / ((d - 1) as f64) - 2.0 } else { 0.0 };
                        x * x
                    })
                    .sum();
                (-sq).exp()
            }),
        )
    }

    /// Hilbert-like field 1 / (i_1 + ... + i_D + D).
    pub fn hilbert(shape: Shape) -> Field {
        let d = shape.ndim() as f64;
        FnOracle::new(
            shape,
            Box::new(move |idx: &[usize]| 1.0 / (idx.iter().sum::<usize>() as f64 + d)),
        )
    }

    /// Linear ramp: sum of coordinates, normalized to [0, 1].
    pub fn ramp(shape: Shape) -> Field {
        let span: usize = shape.dims().iter().map(|&d| d - 1).sum();
        let span = span.max(1) as f64;
        FnOracle::new(
            shape,
            Box::new(move |idx: &[usize]| idx.iter().sum::<usize>() as f64 / span),
        )
    }

    pub fn constant(shape: Shape, value: f64) -> Field {
        FnOracle::new(shape, Box::new(move |_: &[usize]| value))
    }

    pub fn by_name(name: &str, shape: Shape) -> Result<Field> {
        match name {
            "gaussian" => Ok(gaussian(shape)),
            "hilbert" => Ok(hilbert(shape)),
            "ramp" => Ok(ramp(shape)),
            "constant" => Ok(constant(shape, 1.0)),
            other => Err(crate::error::Error::Precondition(format!(
                "unknown field '{other}' (expected gaussian, hilbert, ramp or constant)"
            ))),
        }
    }
}
