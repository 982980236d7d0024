//! Greedy maxvol: select a quasi-dominant r x r submatrix of a tall n x r
//! matrix. Warm-started from pivoted-LU rows, then row swaps that each
//! strictly increase |det| of the selected submatrix, until every entry of
//! A * A_hat^{-1} has magnitude <= 1 + delta.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;

pub const DEFAULT_DELTA: f64 = 1e-2;
pub const DEFAULT_MAX_ITERS: usize = 100;

#[derive(Debug, Clone)]
pub struct MaxvolResult {
    /// Selected row indices; rows[j] is the row playing the role of pivot j.
    pub rows: Vec<usize>,
    /// Coefficient matrix A * A_hat^{-1} (n x r). Restricted to the selected
    /// rows it is the identity.
    pub coeffs: DMatrix<f64>,
    pub iterations: usize,
    /// Largest coefficient magnitude at exit.
    pub dominance: f64,
    pub converged: bool,
}

pub fn maxvol(a: &DMatrix<f64>, delta: f64, max_iters: usize) -> Result<MaxvolResult> {
    let n = a.nrows();
    let r = a.ncols();
    if n < r {
        return Err(Error::Precondition(format!("maxvol needs n >= r, got {n} x {r}")));
    }
    let (rows, rank) = linalg::pivot_rows(a);
    if rank < r {
        return Err(Error::RankDeficient { achieved: rank, requested: r });
    }
    let mut rows = rows;
    // B = A * A_hat^{-1}, computed by solving A_hat^T X^T = A^T
    let ahat = DMatrix::from_fn(r, r, |i, j| a[(rows[i], j)]);
    let ahat_inv = linalg::stabilized_inverse(&ahat)?;
    let mut b = a * ahat_inv;
    let mut iterations = 0;
    loop {
        // largest |B(i,j)|, lowest row-major linear index on ties
        let (mut bi, mut bj, mut best) = (0usize, 0usize, 0.0f64);
        for i in 0..n {
            for j in 0..r {
                let v = b[(i, j)].abs();
                if v > best {
                    best = v;
                    bi = i;
                    bj = j;
                }
            }
        }
        if best <= 1.0 + delta {
            return Ok(MaxvolResult { rows, coeffs: b, iterations, dominance: best, converged: true });
        }
        if iterations >= max_iters {
            return Ok(MaxvolResult {
                rows,
                coeffs: b,
                iterations,
                dominance: best,
                converged: false,
            });
        }
        iterations += 1;
        // swap row bi into pivot slot bj; rank-1 update of B
        let pivot = b[(bi, bj)];
        let col: Vec<f64> = (0..n).map(|i| b[(i, bj)]).collect();
        let mut row: Vec<f64> = (0..r).map(|j| b[(bi, j)]).collect();
        row[bj] -= 1.0;
        for i in 0..n {
            let f = col[i] / pivot;
            if f == 0.0 {
                continue;
            }
            for j in 0..r {
                b[(i, j)] -= f * row[j];
            }
        }
        rows[bj] = bi;
    }
}
