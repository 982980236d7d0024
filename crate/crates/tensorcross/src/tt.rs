//! Tensor-train format: order-3 cores chained by matrix products, plus the
//! standard algebra on them (evaluation, TT-SVD, orthogonalization, rounding,
//! linear combination, inner products, gauge transforms, stacking).

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dense::DenseTensor;
use crate::error::{Error, Result};
use crate::linalg;
use crate::shape::Shape;

/// Order-3 core with shape (r0, n, r1), stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Core {
    pub r0: usize,
    pub n: usize,
    pub r1: usize,
    pub data: Vec<f64>,
}

fn to_row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

impl Core {
    pub fn zeros(r0: usize, n: usize, r1: usize) -> Self {
        Core { r0, n, r1, data: vec![0.0; r0 * n * r1] }
    }

    pub fn from_data(r0: usize, n: usize, r1: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != r0 * n * r1 {
            return Err(Error::ShapeMismatch(format!(
                "core data length {} != {}x{}x{}",
                data.len(),
                r0,
                n,
                r1
            )));
        }
        Ok(Core { r0, n, r1, data })
    }

    #[inline]
    pub fn at(&self, a: usize, i: usize, b: usize) -> f64 {
        self.data[(a * self.n + i) * self.r1 + b]
    }

    #[inline]
    pub fn at_mut(&mut self, a: usize, i: usize, b: usize) -> &mut f64 {
        &mut self.data[(a * self.n + i) * self.r1 + b]
    }

    /// (r0*n) x r1 matrix, rows ordered (a, i) with a major.
    pub fn left_unfold(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.r0 * self.n, self.r1, &self.data)
    }

    /// r0 x (n*r1) matrix.
    pub fn right_unfold(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.r0, self.n * self.r1, &self.data)
    }

    pub fn from_left_unfold(m: &DMatrix<f64>, r0: usize, n: usize) -> Self {
        let r1 = m.ncols();
        assert_eq!(m.nrows(), r0 * n);
        Core { r0, n, r1, data: to_row_major(m) }
    }

    pub fn from_right_unfold(m: &DMatrix<f64>, n: usize, r1: usize) -> Self {
        let r0 = m.nrows();
        assert_eq!(m.ncols(), n * r1);
        Core { r0, n, r1, data: to_row_major(m) }
    }

    /// r0 x r1 slice at mode index i.
    pub fn slice(&self, i: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.r0, self.r1, |a, b| self.at(a, i, b))
    }

    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orthogonality {
    None,
    Left,
    Right,
}

/// Rank budget for TT-SVD and rounding: either explicit interior ranks
/// r_1..r_{D-1} or a relative Frobenius tolerance.
#[derive(Debug, Clone)]
pub enum Truncation {
    Ranks(Vec<usize>),
    MaxRank(usize),
    Tol(f64),
}

#[derive(Debug, Clone)]
pub struct TTTensor {
    cores: Vec<Core>,
    orth: Orthogonality,
}

impl TTTensor {
    pub fn new(cores: Vec<Core>) -> Result<Self> {
        if cores.is_empty() {
            return Err(Error::Precondition("TT needs at least one core".into()));
        }
        if cores[0].r0 != 1 || cores.last().unwrap().r1 != 1 {
            return Err(Error::ShapeMismatch("boundary ranks must be 1".into()));
        }
        for w in cores.windows(2) {
            if w[0].r1 != w[1].r0 {
                return Err(Error::ShapeMismatch(format!(
                    "adjacent core ranks {} != {}",
                    w[0].r1, w[1].r0
                )));
            }
        }
        Ok(TTTensor { cores, orth: Orthogonality::None })
    }

    pub fn cores(&self) -> &[Core] {
        &self.cores
    }

    pub fn core(&self, d: usize) -> &Core {
        &self.cores[d]
    }

    pub fn ndim(&self) -> usize {
        self.cores.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.cores.iter().map(|c| c.n).collect()
    }

    pub fn shape(&self) -> Shape {
        Shape::new(self.dims()).expect("valid dims")
    }

    /// Bond ranks r_0..r_D (boundaries always 1).
    pub fn ranks(&self) -> Vec<usize> {
        let mut r: Vec<usize> = self.cores.iter().map(|c| c.r0).collect();
        r.push(1);
        r
    }

    pub fn orthogonality(&self) -> Orthogonality {
        self.orth
    }

    pub fn param_count(&self) -> usize {
        self.cores.iter().map(|c| c.data.len()).sum()
    }

    /// Rank-1 TT from an outer product of vectors.
    pub fn rank_one(vectors: &[Vec<f64>]) -> Result<Self> {
        let cores = vectors
            .iter()
            .map(|v| Core::from_data(1, v.len(), 1, v.clone()))
            .collect::<Result<Vec<_>>>()?;
        TTTensor::new(cores)
    }

    /// All-zero tensor represented with rank-1 zero cores.
    pub fn zero(dims: &[usize]) -> Result<Self> {
        TTTensor::new(dims.iter().map(|&n| Core::zeros(1, n, 1)).collect())
    }

    /// Seeded random TT with the given interior ranks, entries uniform in [-1, 1].
    pub fn random(dims: &[usize], interior_ranks: &[usize], seed: u64) -> Result<Self> {
        if interior_ranks.len() + 1 != dims.len() && !(dims.len() == 1 && interior_ranks.is_empty())
        {
            return Err(Error::ShapeMismatch("need D-1 interior ranks".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ranks = vec![1usize];
        ranks.extend_from_slice(interior_ranks);
        ranks.push(1);
        let cores = dims
            .iter()
            .enumerate()
            .map(|(d, &n)| {
                let (r0, r1) = (ranks[d], ranks[d + 1]);
                let data = (0..r0 * n * r1).map(|_| rng.gen_range(-1.0..1.0)).collect();
                Core { r0, n, r1, data }
            })
            .collect();
        TTTensor::new(cores)
    }

    /// Entry evaluation: the indexed chain of matrix products.
    pub fn eval(&self, idx: &[usize]) -> f64 {
        debug_assert_eq!(idx.len(), self.cores.len());
        // row vector carried left to right
        let first = &self.cores[0];
        let mut v: Vec<f64> = (0..first.r1).map(|b| first.at(0, idx[0], b)).collect();
        for (d, core) in self.cores.iter().enumerate().skip(1) {
            let i = idx[d];
            let mut next = vec![0.0; core.r1];
            for (a, &va) in v.iter().enumerate() {
                if va == 0.0 {
                    continue;
                }
                for (b, nb) in next.iter_mut().enumerate() {
                    *nb += va * core.at(a, i, b);
                }
            }
            v = next;
        }
        v[0]
    }

    /// Materialize. Test oracle and decompression path; guarded by a cap.
    pub fn to_dense(&self, cap: usize) -> Result<DenseTensor> {
        let shape = self.shape();
        let count = shape.count();
        if count > cap {
            return Err(Error::SizeCap { count: count as u128, cap: cap as u128 });
        }
        // fold left: (prefix_count, r) x (r, n*r') -> (prefix_count*n, r')
        let mut m = self.cores[0].right_unfold(); // (1, n0*r1)
        let mut rows = self.cores[0].n;
        let mut r = self.cores[0].r1;
        m = DMatrix::from_row_slice(rows, r, &to_row_major(&m));
        for core in &self.cores[1..] {
            let prod = &m * core.right_unfold(); // (rows, n*r1)
            rows *= core.n;
            r = core.r1;
            m = DMatrix::from_row_slice(rows, r, &to_row_major(&prod));
        }
        DenseTensor::new(shape, to_row_major(&m))
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.cores[0].data {
            *v *= alpha;
        }
        self.orth = Orthogonality::None;
    }

    /// Frobenius norm, computed in TT format.
    pub fn norm(&self) -> f64 {
        tt_inner(self, self).max(0.0).sqrt()
    }
}

fn split_rank(s: &nalgebra::DVector<f64>, trunc: &Truncation, d: usize, threshold: f64) -> usize {
    let full = s.iter().filter(|&&v| v > 0.0).count().max(1);
    match trunc {
        Truncation::Ranks(rs) => rs[d].min(full).max(1),
        Truncation::MaxRank(r) => (*r).min(full).max(1),
        Truncation::Tol(_) => {
            // smallest r with root-sum-square tail <= threshold
            let mut tail = 0.0;
            let mut r = s.len();
            for i in (0..s.len()).rev() {
                tail += s[i] * s[i];
                if tail.sqrt() > threshold {
                    break;
                }
                r = i;
            }
            r.max(1).min(full)
        }
    }
}

fn tol_threshold(trunc: &Truncation, norm: f64, ndim: usize) -> f64 {
    match trunc {
        Truncation::Tol(eps) => {
            let denom = ((ndim.max(2) - 1) as f64).sqrt();
            eps * norm / denom
        }
        _ => 0.0,
    }
}

/// Sequential-unfolding SVD decomposition of a dense tensor.
pub fn tt_svd(t: &DenseTensor, trunc: &Truncation) -> Result<TTTensor> {
    let dims = t.shape().dims().to_vec();
    let ndim = dims.len();
    let threshold = tol_threshold(trunc, t.norm(), ndim);
    if ndim == 1 {
        return TTTensor::new(vec![Core::from_data(1, dims[0], 1, t.data().to_vec())?]);
    }
    let mut cores = Vec::with_capacity(ndim);
    let mut r_prev = 1usize;
    let mut rest: usize = dims.iter().product();
    let mut m = DMatrix::from_row_slice(dims[0], rest / dims[0], t.data());
    for (d, &n) in dims.iter().enumerate().take(ndim - 1) {
        // m has shape (r_prev * n, rest)
        rest = m.ncols();
        let (u, s, vt) = linalg::svd_fixed(&m)?;
        let r = split_rank(&s, trunc, d, threshold);
        let u_r = u.columns(0, r).into_owned();
        cores.push(Core::from_left_unfold(&u_r, r_prev, n));
        let mut sv = vt.rows(0, r).into_owned();
        for i in 0..r {
            for j in 0..sv.ncols() {
                sv[(i, j)] *= s[i];
            }
        }
        r_prev = r;
        if d + 1 < ndim - 1 {
            let n_next = dims[d + 1];
            m = DMatrix::from_row_slice(r_prev * n_next, rest / n_next, &to_row_major(&sv));
        } else {
            m = sv;
        }
    }
    cores.push(Core::from_right_unfold(&m, dims[ndim - 1], 1));
    let mut tt = TTTensor::new(cores)?;
    tt.orth = Orthogonality::Left;
    Ok(tt)
}

/// QR-sweep orthogonalization. The represented tensor is unchanged; the
/// triangular factor is absorbed into the neighboring core at each step.
pub fn tt_orthogonalize(t: &TTTensor, direction: Orthogonality) -> TTTensor {
    let mut cores = t.cores.to_vec();
    let ndim = cores.len();
    match direction {
        Orthogonality::Left => {
            for d in 0..ndim - 1 {
                let (q, r) = linalg::qr_pos(&cores[d].left_unfold());
                let (r0, n) = (cores[d].r0, cores[d].n);
                cores[d] = Core::from_left_unfold(&q, r0, n);
                let next = &cores[d + 1];
                let updated = &r * next.right_unfold();
                cores[d + 1] = Core::from_right_unfold(&updated, next.n, next.r1);
            }
        }
        Orthogonality::Right => {
            for d in (1..ndim).rev() {
                let (l, q) = linalg::lq_pos(&cores[d].right_unfold());
                let (n, r1) = (cores[d].n, cores[d].r1);
                cores[d] = Core::from_right_unfold(&q, n, r1);
                let prev = &cores[d - 1];
                let updated = prev.left_unfold() * &l;
                cores[d - 1] = Core::from_left_unfold(&updated, prev.r0, prev.n);
            }
        }
        Orthogonality::None => {}
    }
    TTTensor { cores, orth: direction }
}

/// Orthogonalize then SVD-truncate; same error guarantees as TT-SVD relative
/// to the input TT.
pub fn tt_round(t: &TTTensor, trunc: &Truncation) -> Result<TTTensor> {
    let ndim = t.ndim();
    if ndim == 1 {
        return Ok(t.clone());
    }
    let left = tt_orthogonalize(t, Orthogonality::Left);
    let norm = left.cores.last().unwrap().frob_norm();
    let threshold = tol_threshold(trunc, norm, ndim);
    let mut cores = left.cores;
    for d in (1..ndim).rev() {
        let m = cores[d].right_unfold();
        let (u, s, vt) = linalg::svd_fixed(&m)?;
        let r = split_rank(&s, trunc, d - 1, threshold);
        let (n, r1) = (cores[d].n, cores[d].r1);
        cores[d] = Core::from_right_unfold(&vt.rows(0, r).into_owned(), n, r1);
        let mut us = u.columns(0, r).into_owned();
        for j in 0..r {
            for i in 0..us.nrows() {
                us[(i, j)] *= s[j];
            }
        }
        let prev = &cores[d - 1];
        let updated = prev.left_unfold() * us;
        cores[d - 1] = Core::from_left_unfold(&updated, prev.r0, prev.n);
    }
    Ok(TTTensor { cores, orth: Orthogonality::Right })
}

/// alpha*a + beta*b, ranks adding blockwise.
pub fn tt_axpy(alpha: f64, a: &TTTensor, beta: f64, b: &TTTensor) -> Result<TTTensor> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!(
            "mode sizes {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let ndim = a.ndim();
    if ndim == 1 {
        let (ca, cb) = (&a.cores[0], &b.cores[0]);
        let data = ca
            .data
            .iter()
            .zip(&cb.data)
            .map(|(x, y)| alpha * x + beta * y)
            .collect();
        return TTTensor::new(vec![Core::from_data(1, ca.n, 1, data)?]);
    }
    let mut cores = Vec::with_capacity(ndim);
    for d in 0..ndim {
        let (ca, cb) = (&a.cores[d], &b.cores[d]);
        let n = ca.n;
        let (sa, sb) = if d == 0 { (alpha, beta) } else { (1.0, 1.0) };
        let core = if d == 0 {
            // horizontal concat: (1, n, ra1+rb1)
            let mut c = Core::zeros(1, n, ca.r1 + cb.r1);
            for i in 0..n {
                for bcol in 0..ca.r1 {
                    *c.at_mut(0, i, bcol) = sa * ca.at(0, i, bcol);
                }
                for bcol in 0..cb.r1 {
                    *c.at_mut(0, i, ca.r1 + bcol) = sb * cb.at(0, i, bcol);
                }
            }
            c
        } else if d == ndim - 1 {
            // vertical concat: (ra0+rb0, n, 1)
            let mut c = Core::zeros(ca.r0 + cb.r0, n, 1);
            for arow in 0..ca.r0 {
                for i in 0..n {
                    *c.at_mut(arow, i, 0) = ca.at(arow, i, 0);
                }
            }
            for arow in 0..cb.r0 {
                for i in 0..n {
                    *c.at_mut(ca.r0 + arow, i, 0) = cb.at(arow, i, 0);
                }
            }
            c
        } else {
            // block diagonal
            let mut c = Core::zeros(ca.r0 + cb.r0, n, ca.r1 + cb.r1);
            for arow in 0..ca.r0 {
                for i in 0..n {
                    for bcol in 0..ca.r1 {
                        *c.at_mut(arow, i, bcol) = ca.at(arow, i, bcol);
                    }
                }
            }
            for arow in 0..cb.r0 {
                for i in 0..n {
                    for bcol in 0..cb.r1 {
                        *c.at_mut(ca.r0 + arow, i, ca.r1 + bcol) = cb.at(arow, i, bcol);
                    }
                }
            }
            c
        };
        cores.push(core);
    }
    TTTensor::new(cores)
}

/// Frobenius inner product via left-to-right contraction of paired cores.
pub fn tt_inner(a: &TTTensor, b: &TTTensor) -> f64 {
    assert_eq!(a.dims(), b.dims(), "mode sizes must match");
    let mut m = DMatrix::from_element(1, 1, 1.0);
    for (ca, cb) in a.cores.iter().zip(&b.cores) {
        let mut next = DMatrix::zeros(ca.r1, cb.r1);
        for i in 0..ca.n {
            let ai = ca.slice(i);
            let bi = cb.slice(i);
            next += ai.transpose() * &m * bi;
        }
        m = next;
    }
    m[(0, 0)]
}

/// Gradient of tt_inner(a, b) with respect to the cores of `a`.
pub fn tt_inner_vjp(a: &TTTensor, b: &TTTensor) -> Vec<Core> {
    let ndim = a.ndim();
    // left partials: L[d] has shape (ra_d, rb_d)
    let mut lefts: Vec<DMatrix<f64>> = Vec::with_capacity(ndim + 1);
    lefts.push(DMatrix::from_element(1, 1, 1.0));
    for (ca, cb) in a.cores.iter().zip(&b.cores) {
        let prev = lefts.last().unwrap();
        let mut next = DMatrix::zeros(ca.r1, cb.r1);
        for i in 0..ca.n {
            next += ca.slice(i).transpose() * prev * cb.slice(i);
        }
        lefts.push(next);
    }
    let mut rights: Vec<DMatrix<f64>> = vec![DMatrix::from_element(1, 1, 1.0); ndim + 1];
    for d in (0..ndim).rev() {
        let (ca, cb) = (&a.cores[d], &b.cores[d]);
        let nextr = rights[d + 1].clone();
        let mut cur = DMatrix::zeros(ca.r0, cb.r0);
        for i in 0..ca.n {
            cur += ca.slice(i) * &nextr * cb.slice(i).transpose();
        }
        rights[d] = cur;
    }
    let mut grads = Vec::with_capacity(ndim);
    for d in 0..ndim {
        let (ca, cb) = (&a.cores[d], &b.cores[d]);
        let mut g = Core::zeros(ca.r0, ca.n, ca.r1);
        for i in 0..ca.n {
            let gi = &lefts[d] * cb.slice(i) * rights[d + 1].transpose();
            for a0 in 0..ca.r0 {
                for a1 in 0..ca.r1 {
                    *g.at_mut(a0, i, a1) = gi[(a0, a1)];
                }
            }
        }
        grads.push(g);
    }
    grads
}

/// Gauge transform: core d right-multiplied by R, core d+1 left-multiplied by
/// R^{-1}. The represented tensor is unchanged.
pub fn tt_gauge(t: &TTTensor, d: usize, r: &DMatrix<f64>) -> Result<TTTensor> {
    if d + 1 >= t.ndim() {
        return Err(Error::Precondition("gauge bond index out of range".into()));
    }
    if r.nrows() != t.cores[d].r1 || !r.is_square() {
        return Err(Error::ShapeMismatch("gauge matrix must be r_d x r_d".into()));
    }
    if linalg::condition_number(r) > 1e8 {
        return Err(Error::Numerical("gauge matrix too ill-conditioned".into()));
    }
    let rinv = r
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("singular gauge matrix".into()))?;
    let mut cores = t.cores.to_vec();
    let updated = cores[d].left_unfold() * r;
    cores[d] = Core::from_left_unfold(&updated, cores[d].r0, cores[d].n);
    let updated = rinv * cores[d + 1].right_unfold();
    cores[d + 1] = Core::from_right_unfold(&updated, cores[d + 1].n, cores[d + 1].r1);
    TTTensor::new(cores)
}

/// Stack K tensors with equal mode sizes along a new leading dimension.
/// Slice k of the result equals input k; interior bond ranks are the
/// blockwise unions (sums) of the per-instance ranks.
pub fn tt_stack(ts: &[TTTensor]) -> Result<TTTensor> {
    if ts.is_empty() {
        return Err(Error::Precondition("need at least one tensor to stack".into()));
    }
    let dims = ts[0].dims();
    for t in ts {
        if t.dims() != dims {
            return Err(Error::ShapeMismatch("stack inputs must share mode sizes".into()));
        }
    }
    let k = ts.len();
    let ndim = dims.len();
    // leading core: (1, K, K) selector
    let mut lead = Core::zeros(1, k, k);
    for j in 0..k {
        *lead.at_mut(0, j, j) = 1.0;
    }
    let mut cores = vec![lead];
    for d in 0..ndim {
        let r0: usize = ts.iter().map(|t| t.cores[d].r0).sum();
        let r1: usize = ts.iter().map(|t| t.cores[d].r1).sum();
        let last = d == ndim - 1;
        let mut c = Core::zeros(r0, dims[d], if last { 1 } else { r1 });
        let (mut off0, mut off1) = (0usize, 0usize);
        for t in ts {
            let src = &t.cores[d];
            for a in 0..src.r0 {
                for i in 0..src.n {
                    for b in 0..src.r1 {
                        let bcol = if last { 0 } else { off1 + b };
                        *c.at_mut(off0 + a, i, bcol) = src.at(a, i, b);
                    }
                }
            }
            off0 += src.r0;
            off1 += src.r1;
        }
        cores.push(c);
    }
    TTTensor::new(cores)
}

/// One slice of a stacked tensor along its leading dimension, as a TT over
/// the trailing modes.
pub fn tt_lead_slice(t: &TTTensor, k: usize) -> Result<TTTensor> {
    let lead = &t.cores[0];
    if lead.r0 != 1 || k >= lead.n {
        return Err(Error::Precondition("bad leading slice".into()));
    }
    let row = DMatrix::from_fn(1, lead.r1, |_, b| lead.at(0, k, b));
    let next = &t.cores[1];
    let updated = row * next.right_unfold();
    let mut cores = vec![Core::from_right_unfold(&updated, next.n, next.r1)];
    cores.extend_from_slice(&t.cores[2..]);
    TTTensor::new(cores)
}

/// Max column-orthonormality defect over the first D-1 left unfoldings.
pub fn left_orthogonality_defect(t: &TTTensor) -> f64 {
    let mut worst: f64 = 0.0;
    for core in &t.cores[..t.ndim() - 1] {
        let q = core.left_unfold();
        let gram = q.transpose() * &q;
        let defect = (gram - DMatrix::identity(core.r1, core.r1)).abs().max();
        worst = worst.max(defect);
    }
    worst
}

/// Max row-orthonormality defect over the last D-1 right unfoldings.
pub fn right_orthogonality_defect(t: &TTTensor) -> f64 {
    let mut worst: f64 = 0.0;
    for core in &t.cores[1..] {
        let q = core.right_unfold();
        let gram = &q * q.transpose();
        let defect = (gram - DMatrix::identity(core.r0, core.r0)).abs().max();
        worst = worst.max(defect);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    const CAP: usize = 1 << 24;

    fn random_dense(dims: &[usize], seed: u64) -> DenseTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = Shape::new(dims.to_vec()).unwrap();
        let data = (0..shape.count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        DenseTensor::new(shape, data).unwrap()
    }

    #[test]
    fn all_ones_rank_one_evals_to_one() {
        let t = TTTensor::rank_one(&[vec![1.0; 3], vec![1.0; 4], vec![1.0; 2]]).unwrap();
        assert_eq!(t.eval(&[2, 3, 1]), 1.0);
        assert_eq!(t.eval(&[0, 0, 0]), 1.0);
    }

    #[test]
    fn rank_one_is_outer_product() {
        let u = vec![1.0, -2.0, 0.5];
        let v = vec![3.0, 4.0];
        let t = TTTensor::rank_one(&[u.clone(), v.clone()]).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert!((t.eval(&[i, j]) - u[i] * v[j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn eval_matches_dense_at_random_indices() {
        let t = TTTensor::random(&[5, 5, 5, 5], &[3, 3, 3], 42).unwrap();
        let dense = t.to_dense(CAP).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let idx: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
            assert!((t.eval(&idx) - dense.get(&idx).unwrap()).abs() < 1e-13);
        }
    }

    #[test]
    fn single_core_densify_is_the_fiber() {
        let c = Core::from_data(1, 4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let t = TTTensor::new(vec![c]).unwrap();
        let d = t.to_dense(CAP).unwrap();
        assert_eq!(d.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn to_dense_matches_per_entry_eval() {
        let t = TTTensor::random(&[6, 6, 6], &[4, 4], 3).unwrap();
        let dense = t.to_dense(CAP).unwrap();
        for idx in t.shape().indices() {
            assert!((dense.get(&idx).unwrap() - t.eval(&idx)).abs() < 1e-13);
        }
    }

    #[test]
    fn to_dense_respects_cap() {
        let t = TTTensor::random(&[8, 8, 8], &[2, 2], 0).unwrap();
        assert!(matches!(t.to_dense(100), Err(Error::SizeCap { .. })));
    }

    #[test]
    fn tt_svd_separable_is_rank_one() {
        let u = vec![1.0, 2.0, 3.0];
        let v = vec![-1.0, 0.5, 2.0, 1.0];
        let shape = Shape::new(vec![3, 4]).unwrap();
        let dense = DenseTensor::from_fn(shape, |idx| u[idx[0]] * v[idx[1]]).unwrap();
        let tt = tt_svd(&dense, &Truncation::Tol(1e-12)).unwrap();
        assert_eq!(tt.ranks(), vec![1, 1, 1]);
        assert!(tt.to_dense(CAP).unwrap().rel_frobenius_diff(&dense) < 1e-12);
    }

    #[test]
    fn tt_svd_full_rank_is_exact() {
        let dense = random_dense(&[8, 8, 8], 11);
        let tt = tt_svd(&dense, &Truncation::MaxRank(64)).unwrap();
        assert!(tt.to_dense(CAP).unwrap().rel_frobenius_diff(&dense) < 1e-12);
        assert_eq!(tt.orthogonality(), Orthogonality::Left);
        assert!(left_orthogonality_defect(&tt) < 1e-12);
    }

    #[test]
    fn tt_svd_recovers_generated_ranks() {
        let src = TTTensor::random(&[5, 6, 7, 5], &[1, 3, 3], 17).unwrap();
        let dense = src.to_dense(CAP).unwrap();
        let tt = tt_svd(&dense, &Truncation::Tol(1e-10)).unwrap();
        let ranks = tt.ranks();
        assert!(ranks[1] <= 1 && ranks[2] <= 3 && ranks[3] <= 3, "ranks {ranks:?}");
        assert!(tt.to_dense(CAP).unwrap().rel_frobenius_diff(&dense) < 1e-9);
    }

    #[test]
    fn orthogonalize_preserves_tensor_and_gram() {
        let t = TTTensor::random(&[4, 4, 4, 4, 4], &[3, 4, 4, 3], 5).unwrap();
        let dense = t.to_dense(CAP).unwrap();
        let left = tt_orthogonalize(&t, Orthogonality::Left);
        assert!(left.to_dense(CAP).unwrap().rel_frobenius_diff(&dense) < 1e-12);
        assert!(left_orthogonality_defect(&left) < 1e-12);
        let right = tt_orthogonalize(&t, Orthogonality::Right);
        assert!(right.to_dense(CAP).unwrap().rel_frobenius_diff(&dense) < 1e-12);
        assert!(right_orthogonality_defect(&right) < 1e-12);
    }

    #[test]
    fn orthogonalize_is_idempotent_on_orthogonal_input() {
        let t = TTTensor::random(&[4, 4, 4], &[2, 2], 9).unwrap();
        let once = tt_orthogonalize(&t, Orthogonality::Left);
        let twice = tt_orthogonalize(&once, Orthogonality::Left);
        let d1 = once.to_dense(CAP).unwrap();
        let d2 = twice.to_dense(CAP).unwrap();
        assert!(d1.rel_frobenius_diff(&d2) < 1e-12);
        assert!(left_orthogonality_defect(&twice) < 1e-12);
    }

    #[test]
    fn round_at_full_rank_is_identity() {
        let t = TTTensor::random(&[4, 5, 4], &[3, 3], 23).unwrap();
        let r = tt_round(&t, &Truncation::MaxRank(16)).unwrap();
        let d0 = t.to_dense(CAP).unwrap();
        assert!(r.to_dense(CAP).unwrap().rel_frobenius_diff(&d0) < 1e-12);
    }

    #[test]
    fn round_restores_ranks_of_doubled_sum() {
        let t = TTTensor::random(&[4, 5, 4], &[3, 3], 29).unwrap();
        let sum = tt_axpy(1.0, &t, 1.0, &t).unwrap();
        assert_eq!(sum.ranks(), vec![1, 6, 6, 1]);
        let rounded = tt_round(&sum, &Truncation::Tol(1e-12)).unwrap();
        assert_eq!(rounded.ranks(), vec![1, 3, 3, 1]);
        let expect = {
            let mut x = t.clone();
            x.scale(2.0);
            x.to_dense(CAP).unwrap()
        };
        assert!(rounded.to_dense(CAP).unwrap().rel_frobenius_diff(&expect) < 1e-10);
    }

    #[test]
    fn rank_one_round_is_within_quasi_optimal_factor_of_best() {
        let t = TTTensor::random(&[6, 6], &[4], 31).unwrap();
        let dense = t.to_dense(CAP).unwrap();
        let rounded = tt_round(&t, &Truncation::MaxRank(1)).unwrap();
        let err = rounded.to_dense(CAP).unwrap().max_abs_diff(&dense);
        // best rank-1 error of the first unfolding from a dense SVD
        let m = DMatrix::from_row_slice(6, 6, dense.data());
        let s = m.singular_values();
        let best: f64 = (1..s.len()).map(|i| s[i] * s[i]).sum::<f64>().sqrt();
        let frob_err = {
            let r = rounded.to_dense(CAP).unwrap();
            dense
                .data()
                .iter()
                .zip(r.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };
        assert!(frob_err <= best * 1.0001 + 1e-12, "err {frob_err} vs best {best}");
        let _ = err;
    }

    #[test]
    fn axpy_with_zero_beta_is_identity() {
        let a = TTTensor::random(&[3, 4, 3], &[2, 2], 7).unwrap();
        let b = TTTensor::random(&[3, 4, 3], &[2, 2], 8).unwrap();
        let r = tt_axpy(1.0, &a, 0.0, &b).unwrap();
        let da = a.to_dense(CAP).unwrap();
        assert!(r.to_dense(CAP).unwrap().rel_frobenius_diff(&da) < 1e-13);
    }

    #[test]
    fn axpy_cancellation_rounds_to_near_zero() {
        let a = TTTensor::random(&[3, 4, 3], &[2, 2], 13).unwrap();
        let diff = tt_axpy(1.0, &a, -1.0, &a).unwrap();
        // The difference is exactly zero pointwise and tiny in norm.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let idx: Vec<usize> =
                vec![rng.gen_range(0..3), rng.gen_range(0..4), rng.gen_range(0..3)];
            assert!(diff.eval(&idx).abs() < 1e-12 * a.norm());
        }
        // Doubling and rounding recovers the original rank profile.
        let sum = tt_axpy(1.0, &a, 1.0, &a).unwrap();
        assert_eq!(sum.ranks(), vec![1, 4, 4, 1]);
        let rounded = tt_round(&sum, &Truncation::Tol(1e-10)).unwrap();
        assert_eq!(rounded.ranks(), vec![1, 2, 2, 1]);
        let mut half = rounded;
        half.scale(0.5);
        let expect = a.to_dense(CAP).unwrap();
        assert!(half.to_dense(CAP).unwrap().rel_frobenius_diff(&expect) < 1e-12);
    }

    #[test]
    fn axpy_pointwise_matches_oracle() {
        let a = TTTensor::random(&[4, 4, 4], &[3, 2], 19).unwrap();
        let b = TTTensor::random(&[4, 4, 4], &[2, 3], 20).unwrap();
        let r = tt_axpy(0.7, &a, -1.3, &b).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let idx: Vec<usize> = (0..3).map(|_| rng.gen_range(0..4)).collect();
            let want = 0.7 * a.eval(&idx) - 1.3 * b.eval(&idx);
            assert!((r.eval(&idx) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn axpy_shape_mismatch_errors() {
        let a = TTTensor::random(&[3, 4], &[2], 1).unwrap();
        let b = TTTensor::random(&[4, 3], &[2], 1).unwrap();
        assert!(tt_axpy(1.0, &a, 1.0, &b).is_err());
    }

    #[test]
    fn inner_of_self_is_squared_norm() {
        let a = TTTensor::random(&[4, 5, 4], &[3, 3], 37).unwrap();
        let dense = a.to_dense(CAP).unwrap();
        let n2 = dense.norm().powi(2);
        assert!((tt_inner(&a, &a) - n2).abs() / n2 < 1e-10);
    }

    #[test]
    fn inner_of_orthogonal_rank_ones_is_zero() {
        let a = TTTensor::rank_one(&[vec![1.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let b = TTTensor::rank_one(&[vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!(tt_inner(&a, &b).abs() < 1e-12);
    }

    #[test]
    fn inner_matches_exhaustive_sum() {
        let a = TTTensor::random(&[4, 4, 4], &[2, 3], 41).unwrap();
        let b = TTTensor::random(&[4, 4, 4], &[3, 2], 43).unwrap();
        let mut want = 0.0;
        for idx in a.shape().indices() {
            want += a.eval(&idx) * b.eval(&idx);
        }
        let got = tt_inner(&a, &b);
        assert!((got - want).abs() < 1e-10 * want.abs().max(1.0));
    }

    #[test]
    fn inner_vjp_matches_finite_differences() {
        let a = TTTensor::random(&[3, 4, 3], &[2, 2], 47).unwrap();
        let b = TTTensor::random(&[3, 4, 3], &[2, 2], 48).unwrap();
        let grads = tt_inner_vjp(&a, &b);
        let h = 1e-6;
        for d in 0..3 {
            for pos in 0..a.cores()[d].data.len() {
                let mut ap = a.clone();
                ap.cores[d].data[pos] += h;
                let mut am = a.clone();
                am.cores[d].data[pos] -= h;
                let fd = (tt_inner(&ap, &b) - tt_inner(&am, &b)) / (2.0 * h);
                assert!(
                    (grads[d].data[pos] - fd).abs() < 1e-6,
                    "core {d} pos {pos}: {} vs {}",
                    grads[d].data[pos],
                    fd
                );
            }
        }
    }

    #[test]
    fn gauge_identity_is_bitwise_noop() {
        let t = TTTensor::random(&[3, 4, 3], &[2, 2], 53).unwrap();
        let id = DMatrix::identity(2, 2);
        let g = tt_gauge(&t, 0, &id).unwrap();
        assert_eq!(g.cores()[0].data, t.cores()[0].data);
        assert_eq!(g.cores()[1].data, t.cores()[1].data);
    }

    #[test]
    fn scalar_gauge_scales_neighbors_inversely() {
        let t = TTTensor::random(&[3, 4, 3], &[2, 2], 59).unwrap();
        let two = DMatrix::identity(2, 2) * 2.0;
        let g = tt_gauge(&t, 0, &two).unwrap();
        for (x, y) in g.cores()[0].data.iter().zip(&t.cores()[0].data) {
            assert!((x - 2.0 * y).abs() < 1e-14);
        }
        for (x, y) in g.cores()[1].data.iter().zip(&t.cores()[1].data) {
            assert!((x - 0.5 * y).abs() < 1e-14);
        }
        let d0 = t.to_dense(CAP).unwrap();
        assert!(g.to_dense(CAP).unwrap().rel_frobenius_diff(&d0) < 1e-12);
    }

    #[test]
    fn random_gauge_preserves_tensor() {
        let t = TTTensor::random(&[3, 4, 5, 3], &[2, 3, 2], 61).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for d in 0..3 {
            let r = t.ranks()[d + 1];
            let m = DMatrix::from_fn(r, r, |_, _| rng.gen_range(-1.0..1.0))
                + DMatrix::identity(r, r) * 2.0;
            let g = tt_gauge(&t, d, &m).unwrap();
            let d0 = t.to_dense(CAP).unwrap();
            assert!(g.to_dense(CAP).unwrap().rel_frobenius_diff(&d0) < 1e-10);
        }
    }

    #[test]
    fn gauge_rejects_singular_matrix() {
        let t = TTTensor::random(&[3, 3], &[2], 67).unwrap();
        let z = DMatrix::zeros(2, 2);
        assert!(tt_gauge(&t, 0, &z).is_err());
    }

    #[test]
    fn stack_of_one_adds_leading_singleton() {
        let t = TTTensor::random(&[3, 4], &[2], 71).unwrap();
        let s = tt_stack(std::slice::from_ref(&t)).unwrap();
        assert_eq!(s.dims(), vec![1, 3, 4]);
        let slice = tt_lead_slice(&s, 0).unwrap();
        let d0 = t.to_dense(CAP).unwrap();
        assert!(slice.to_dense(CAP).unwrap().rel_frobenius_diff(&d0) < 1e-13);
    }

    #[test]
    fn stack_duplicates_match_both_slices() {
        let t = TTTensor::random(&[3, 4], &[2], 73).unwrap();
        let s = tt_stack(&[t.clone(), t.clone()]).unwrap();
        let d0 = t.to_dense(CAP).unwrap();
        for k in 0..2 {
            let slice = tt_lead_slice(&s, k).unwrap();
            assert!(slice.to_dense(CAP).unwrap().rel_frobenius_diff(&d0) < 1e-13);
        }
    }

    #[test]
    fn stack_slices_match_sources_with_mixed_ranks() {
        let ts: Vec<TTTensor> = (0..3)
            .map(|k| TTTensor::random(&[4, 4, 4], &[2, 2], 100 + k).unwrap())
            .collect();
        let s = tt_stack(&ts).unwrap();
        assert_eq!(s.ranks()[1], 3); // K instances of boundary rank 1
        assert_eq!(s.ranks()[2], 6); // blockwise union of interior ranks
        for (k, t) in ts.iter().enumerate() {
            let slice = tt_lead_slice(&s, k).unwrap();
            let d0 = t.to_dense(CAP).unwrap();
            assert!(slice.to_dense(CAP).unwrap().rel_frobenius_diff(&d0) < 1e-12);
        }
    }

    #[test]
    fn storage_cost_bound_holds() {
        let t = TTTensor::random(&[7, 7, 7, 7], &[3, 3, 3], 79).unwrap();
        let rmax = *t.ranks().iter().max().unwrap();
        assert!(t.param_count() <= 4 * rmax * rmax * 7);
    }

    #[test]
    fn rounding_error_monotone_in_rank_budget() {
        let t = TTTensor::random(&[6, 6, 6], &[4, 4], 83).unwrap();
        let dense = t.to_dense(CAP).unwrap();
        let mut prev = f64::INFINITY;
        for r in 1..=4 {
            let rounded = tt_round(&t, &Truncation::MaxRank(r)).unwrap();
            let err = rounded.to_dense(CAP).unwrap().rel_frobenius_diff(&dense);
            assert!(err <= prev + 1e-12, "rank {r}: {err} > {prev}");
            prev = err;
        }
    }
}
