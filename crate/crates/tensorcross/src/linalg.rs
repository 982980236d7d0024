//! Thin wrappers over nalgebra factorizations with fixed sign conventions,
//! so repeated runs produce bitwise-identical factors.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// SVD with deterministic signs: each left singular vector is scaled so its
/// largest-magnitude entry is positive, ties broken by lowest index.
pub fn svd_fixed(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    let svd = m
        .clone()
        .try_svd(true, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical("SVD did not converge".into()))?;
    let mut u = svd.u.expect("requested u");
    let mut vt = svd.v_t.expect("requested v_t");
    let s = svd.singular_values;
    for j in 0..u.ncols() {
        let col = u.column(j);
        let mut best = 0usize;
        let mut best_abs = 0.0f64;
        for (i, &v) in col.iter().enumerate() {
            if v.abs() > best_abs {
                best_abs = v.abs();
                best = i;
            }
        }
        if u[(best, j)] < 0.0 {
            for i in 0..u.nrows() {
                u[(i, j)] = -u[(i, j)];
            }
            if j < vt.nrows() {
                for k in 0..vt.ncols() {
                    vt[(j, k)] = -vt[(j, k)];
                }
            }
        }
    }
    Ok((u, s, vt))
}

/// Thin QR with the diagonal of R forced non-negative.
pub fn qr_pos(m: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let qr = m.clone().qr();
    let mut q = qr.q();
    let mut r = qr.r();
    let k = q.ncols().min(r.nrows());
    for j in 0..k {
        if r[(j, j)] < 0.0 {
            for i in 0..q.nrows() {
                q[(i, j)] = -q[(i, j)];
            }
            for c in 0..r.ncols() {
                r[(j, c)] = -r[(j, c)];
            }
        }
    }
    (q, r)
}

/// Thin LQ (A = L Q with Q having orthonormal rows), diagonal of L non-negative.
pub fn lq_pos(m: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let (q, r) = qr_pos(&m.transpose());
    (r.transpose(), q.transpose())
}

/// Row indices of the pivots of a partial-pivoting elimination on an n x r
/// matrix. Returns the rows in pivot order plus the achieved rank (pivots
/// found before numerical breakdown).
pub fn pivot_rows(a: &DMatrix<f64>) -> (Vec<usize>, usize) {
    let n = a.nrows();
    let r = a.ncols();
    let mut work = a.clone();
    let mut perm: Vec<usize> = (0..n).collect();
    let scale = a.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(f64::MIN_POSITIVE);
    let tol = 1e-12 * scale;
    let mut rank = 0usize;
    for col in 0..r.min(n) {
        let mut best = col;
        let mut best_abs = work[(col, col)].abs();
        for i in (col + 1)..n {
            let v = work[(i, col)].abs();
            if v > best_abs {
                best_abs = v;
                best = i;
            }
        }
        if best_abs <= tol {
            break;
        }
        work.swap_rows(col, best);
        perm.swap(col, best);
        rank += 1;
        let pivot = work[(col, col)];
        for i in (col + 1)..n {
            let factor = work[(i, col)] / pivot;
            for c in col..r {
                work[(i, c)] -= factor * work[(col, c)];
            }
        }
    }
    (perm[..rank].to_vec(), rank)
}

pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let s = m.clone().singular_values();
    let max = s.iter().cloned().fold(0.0f64, f64::max);
    let min = s.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Inverse of a square pivot matrix, with a Tikhonov ridge of 1e-12 applied
/// through the SVD when the condition number exceeds 1e10. Condition numbers
/// beyond 1e14 are reported as failures.
pub fn stabilized_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let r = m.nrows();
    assert_eq!(r, m.ncols(), "pivot matrix must be square");
    let (u, s, vt) = svd_fixed(m)?;
    let smax = s.iter().cloned().fold(0.0f64, f64::max);
    let smin = s.iter().cloned().fold(f64::INFINITY, f64::min);
    if smax <= 0.0 || smax / smin > 1e14 {
        return Err(Error::Numerical(format!(
            "pivot matrix condition number {:.3e} beyond recovery",
            if smin > 0.0 { smax / smin } else { f64::INFINITY }
        )));
    }
    let ridge = if smax / smin > 1e10 { 1e-12 * smax * smax } else { 0.0 };
    // inv = V diag(s_i / (s_i^2 + ridge)) U^T
    let mut vs = vt.transpose();
    for j in 0..r {
        let f = s[j] / (s[j] * s[j] + ridge);
        for i in 0..r {
            vs[(i, j)] *= f;
        }
    }
    Ok(vs * u.transpose())
}

/// Moore-Penrose pseudo-inverse, truncating singular values below
/// `1e-12 * s_max`. A zero matrix maps to the zero matrix.
pub fn pseudo_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (u, s, vt) = svd_fixed(m)?;
    let smax = s.iter().cloned().fold(0.0f64, f64::max);
    let cutoff = 1e-12 * smax;
    let mut vs = vt.transpose();
    for j in 0..s.len() {
        let f = if s[j] > cutoff && s[j] > 0.0 { 1.0 / s[j] } else { 0.0 };
        for i in 0..vs.nrows() {
            vs[(i, j)] *= f;
        }
    }
    Ok(vs * u.transpose())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svd_signs_are_deterministic() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -3.0, 0.5, 0.25, -1.0]);
        let (u, s, vt) = svd_fixed(&m).unwrap();
        let rebuilt = &u * DMatrix::from_diagonal(&s) * &vt;
        assert!((rebuilt - &m).abs().max() < 1e-12);
        for j in 0..u.ncols() {
            let mut best = 0;
            for i in 0..u.nrows() {
                if u[(i, j)].abs() > u[(best, j)].abs() {
                    best = i;
                }
            }
            assert!(u[(best, j)] > 0.0);
        }
    }

    #[test]
    fn qr_reconstructs_with_nonneg_diagonal() {
        let m = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, 3.0, -4.0, 0.0, 1.0, -2.0, 5.0]);
        let (q, r) = qr_pos(&m);
        assert!((&q * &r - &m).abs().max() < 1e-12);
        assert!((q.transpose() * &q - DMatrix::identity(2, 2)).abs().max() < 1e-12);
        assert!(r[(0, 0)] >= 0.0 && r[(1, 1)] >= 0.0);
    }

    #[test]
    fn lq_reconstructs() {
        let m = DMatrix::from_row_slice(2, 4, &[1.0, 2.0, 3.0, -4.0, 0.0, 1.0, -2.0, 5.0]);
        let (l, q) = lq_pos(&m);
        assert!((&l * &q - &m).abs().max() < 1e-12);
        assert!((&q * q.transpose() - DMatrix::identity(2, 2)).abs().max() < 1e-12);
    }

    #[test]
    fn pivot_rows_finds_unit_rows() {
        let mut m = DMatrix::zeros(5, 2);
        m[(3, 0)] = 1.0;
        m[(1, 1)] = 1.0;
        let (rows, rank) = pivot_rows(&m);
        assert_eq!(rank, 2);
        assert!(rows.contains(&3) && rows.contains(&1));
    }

    #[test]
    fn pivot_rows_detects_rank_deficiency() {
        let m = DMatrix::from_row_slice(4, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0, -1.0, -2.0]);
        let (_, rank) = pivot_rows(&m);
        assert_eq!(rank, 1);
    }

    #[test]
    fn stabilized_inverse_matches_direct_inverse() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let inv = stabilized_inverse(&m).unwrap();
        assert!((&m * &inv - DMatrix::identity(2, 2)).abs().max() < 1e-12);
    }
}
