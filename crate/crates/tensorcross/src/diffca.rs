//! Reverse-mode differentiation through cross-interpolation with frozen
//! index sets, plus the alternating training loop: reselect indices, then
//! run gradient steps on the oracle parameters while the indices stay fixed.
//! The discrete index selection itself is treated as non-differentiable.

use nalgebra::DMatrix;
use std::collections::BTreeMap;
use std::io::Write;

use crate::cross::{select_indices, CrossOptions, CrossState};
use crate::error::{Error, Result};
use crate::linalg;
use crate::oracle::TensorOracle;
use crate::shape::{MultiIndex, Shape};
use crate::tt::{Core, TTTensor};
use crate::util;

/// Partial derivatives of a scalar loss with respect to every oracle entry
/// sampled by the frozen cross, keyed by multi-index. Entries used in several
/// fiber or pivot matrices receive the sum of per-use adjoints.
pub type SampleGradient = BTreeMap<MultiIndex, f64>;

/// A cross-interpolation with its index sets frozen: the sampled fiber
/// matrices E_d, the pivot submatrices and their cached inverses, and the
/// forward TT they produce. Immutable after construction; re-freezing with a
/// new entry function reuses the same index sets.
#[derive(Debug, Clone)]
pub struct FrozenCross {
    dims: Vec<usize>,
    left: Vec<Vec<MultiIndex>>,
    right: Vec<Vec<MultiIndex>>,
    fibers: Vec<DMatrix<f64>>,
    pivots: Vec<DMatrix<f64>>,
    pivot_invs: Vec<DMatrix<f64>>,
    tt: TTTensor,
}

impl FrozenCross {
    /// Freeze the index sets of `state` (which must have completed at least
    /// one selection sweep) and interpolate the entries of `f`.
    pub fn freeze<F>(state: &CrossState, f: &F) -> Result<FrozenCross>
    where
        F: Fn(&[usize]) -> f64 + Sync,
    {
        Self::from_sets(state.dims(), state.left_sets(), state.right_sets(), f)
    }

    /// Freeze explicit index sets. `left[d]` holds prefixes of length d,
    /// `right[d]` suffixes of length D-1-d; |left[d+1]| must equal
    /// |right[d]| so the pivot matrices are square.
    pub fn from_sets<F>(
        dims: &[usize],
        left: &[Vec<MultiIndex>],
        right: &[Vec<MultiIndex>],
        f: &F,
    ) -> Result<FrozenCross>
    where
        F: Fn(&[usize]) -> f64 + Sync,
    {
        let d = dims.len();
        if left.len() != d || right.len() != d {
            return Err(Error::Precondition("need D left and D right index sets".into()));
        }
        for dim in 0..d {
            if left[dim].is_empty() || right[dim].is_empty() {
                return Err(Error::Precondition(format!(
                    "empty index set at dimension {dim}; run a selection sweep first"
                )));
            }
            if dim + 1 < d && left[dim + 1].len() != right[dim].len() {
                return Err(Error::Precondition(format!(
                    "pivot matrix at bond {} is {}x{}, not square",
                    dim,
                    left[dim + 1].len(),
                    right[dim].len()
                )));
            }
        }
        let mut fibers = Vec::with_capacity(d);
        let mut pivots = Vec::with_capacity(d.saturating_sub(1));
        let mut pivot_invs = Vec::with_capacity(d.saturating_sub(1));
        let mut cores = Vec::with_capacity(d);
        for dim in 0..d {
            let n = dims[dim];
            let (r0, r1) = (left[dim].len(), right[dim].len());
            let vals = util::map_collect(r0 * n * r1, |p| {
                let (a, rest) = (p / (n * r1), p % (n * r1));
                let (i, c) = (rest / r1, rest % r1);
                f(&entry_index(&left[dim][a], i, &right[dim][c]))
            });
            for (p, &v) in vals.iter().enumerate() {
                if !v.is_finite() {
                    let (a, rest) = (p / (n * r1), p % (n * r1));
                    let (i, c) = (rest / r1, rest % r1);
                    return Err(Error::NonFinite(entry_index(&left[dim][a], i, &right[dim][c])));
                }
            }
            let e = DMatrix::from_fn(r0 * n, r1, |row, c| vals[row * r1 + c]);
            if dim + 1 < d {
                let rows = &left[dim + 1];
                let cols = &right[dim];
                let piv = DMatrix::from_fn(rows.len(), cols.len(), |j, c| {
                    let mut idx = rows[j].clone();
                    idx.extend_from_slice(&cols[c]);
                    f(&idx)
                });
                let inv = linalg::stabilized_inverse(&piv).map_err(|e| {
                    Error::Numerical(format!("pivot inversion failed at dimension {dim}: {e}"))
                })?;
                cores.push(Core::from_left_unfold(&(&e * &inv), r0, n));
                pivots.push(piv);
                pivot_invs.push(inv);
            } else {
                cores.push(Core::from_left_unfold(&e, r0, n));
            }
            fibers.push(e);
        }
        let tt = TTTensor::new(cores)?;
        Ok(FrozenCross {
            dims: dims.to_vec(),
            left: left.to_vec(),
            right: right.to_vec(),
            fibers,
            pivots,
            pivot_invs,
            tt,
        })
    }

    /// Re-interpolate the same frozen indices against a new entry function.
    pub fn refreeze<F>(&self, f: &F) -> Result<FrozenCross>
    where
        F: Fn(&[usize]) -> f64 + Sync,
    {
        Self::from_sets(&self.dims, &self.left, &self.right, f)
    }

    pub fn tt(&self) -> &TTTensor {
        &self.tt
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Every distinct multi-index this cross samples (fiber and pivot
    /// entries combined), in lexicographic order.
    pub fn sampled_indices(&self) -> Vec<MultiIndex> {
        let mut set: std::collections::BTreeSet<MultiIndex> = std::collections::BTreeSet::new();
        let d = self.dims.len();
        for dim in 0..d {
            let n = self.dims[dim];
            for a in &self.left[dim] {
                for i in 0..n {
                    for c in &self.right[dim] {
                        set.insert(entry_index(a, i, c));
                    }
                }
            }
            if dim + 1 < d {
                for j in &self.left[dim + 1] {
                    for c in &self.right[dim] {
                        let mut idx = j.clone();
                        idx.extend_from_slice(c);
                        set.insert(idx);
                    }
                }
            }
        }
        set.into_iter().collect()
    }

    /// Total number of oracle evaluations one freeze performs.
    pub fn sample_count(&self) -> u64 {
        let mut total = 0u64;
        for (dim, e) in self.fibers.iter().enumerate() {
            total += e.len() as u64;
            if dim < self.pivots.len() {
                total += self.pivots[dim].len() as u64;
            }
        }
        total
    }
}

fn entry_index(prefix: &[usize], i: usize, suffix: &[usize]) -> MultiIndex {
    let mut idx = Vec::with_capacity(prefix.len() + 1 + suffix.len());
    idx.extend_from_slice(prefix);
    idx.push(i);
    idx.extend_from_slice(suffix);
    idx
}

/// Pull a scalar loss back through the frozen interpolation: given
/// dL/dQ_d for every core Q_d = reshape(E_d * pivot_d^{-1}), produce dL per
/// sampled oracle entry. With B = pivot^{-1}:
///   dL/dE_d   = G_d * B^T
///   dL/dpiv_d = -B^T * (E_d^T * G_d) * B^T
/// and the last core is the raw fiber matrix, so dL/dE_{D-1} = G_{D-1}.
pub fn cross_vjp(fc: &FrozenCross, core_adjoints: &[Core]) -> Result<SampleGradient> {
    let d = fc.dims.len();
    if core_adjoints.len() != d {
        return Err(Error::ShapeMismatch(format!(
            "{} adjoints for {} cores",
            core_adjoints.len(),
            d
        )));
    }
    for (dim, (adj, core)) in core_adjoints.iter().zip(fc.tt.cores()).enumerate() {
        if (adj.r0, adj.n, adj.r1) != (core.r0, core.n, core.r1) {
            return Err(Error::ShapeMismatch(format!(
                "adjoint {dim} has shape ({},{},{}), core ({},{},{})",
                adj.r0, adj.n, adj.r1, core.r0, core.n, core.r1
            )));
        }
    }
    let mut grad: SampleGradient = BTreeMap::new();
    for dim in 0..d {
        let n = fc.dims[dim];
        let g = core_adjoints[dim].left_unfold();
        let de = if dim + 1 < d {
            let b = &fc.pivot_invs[dim];
            let bt = b.transpose();
            let de = &g * &bt;
            let dpiv = -(&bt * (fc.fibers[dim].transpose() * &g) * &bt);
            for (j, row) in fc.left[dim + 1].iter().enumerate() {
                for (c, col) in fc.right[dim].iter().enumerate() {
                    let mut idx = row.clone();
                    idx.extend_from_slice(col);
                    *grad.entry(idx).or_insert(0.0) += dpiv[(j, c)];
                }
            }
            de
        } else {
            g
        };
        for (a, prefix) in fc.left[dim].iter().enumerate() {
            for i in 0..n {
                for (c, suffix) in fc.right[dim].iter().enumerate() {
                    *grad.entry(entry_index(prefix, i, suffix)).or_insert(0.0) +=
                        de[(a * n + i, c)];
                }
            }
        }
    }
    if let Some((idx, _)) = grad.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite(idx.clone()));
    }
    Ok(grad)
}

/// A scalar loss on the interpolated TT, with analytic core adjoints.
pub trait CoreLoss {
    fn value(&self, tt: &TTTensor) -> f64;
    /// dL/d(core entries), one adjoint per core, matching shapes.
    fn adjoints(&self, tt: &TTTensor) -> Vec<Core>;
}

/// Compare cross_vjp against central finite differences (h = 1e-6) over
/// every sampled entry; returns the worst relative deviation with
/// denominator max(|analytic|, |fd|, 1e-8).
pub fn gradcheck<F, L>(state: &CrossState, values: &F, loss: &L) -> Result<f64>
where
    F: Fn(&[usize]) -> f64 + Sync,
    L: CoreLoss,
{
    let fc = FrozenCross::freeze(state, values)?;
    let analytic = cross_vjp(&fc, &loss.adjoints(fc.tt()))?;
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (idx, &a) in &analytic {
        let bump = |sign: f64| {
            let shifted =
                |x: &[usize]| values(x) + if x == idx.as_slice() { sign * h } else { 0.0 };
            fc.refreeze(&shifted).map(|fz| loss.value(fz.tt()))
        };
        let fd = (bump(1.0)? - bump(-1.0)?) / (2.0 * h);
        let dev = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
        worst = worst.max(dev);
    }
    Ok(worst)
}

/// A family of tensors parameterized by a flat weight vector, with a VJP
/// into the weights for each entry.
pub trait ParamOracle: Sync {
    fn dims(&self) -> &[usize];
    fn param_count(&self) -> usize;
    fn entry(&self, theta: &[f64], idx: &[usize]) -> f64;
    /// Accumulate upstream * d(entry at idx)/d(theta) into `grad`.
    fn entry_vjp(&self, theta: &[f64], idx: &[usize], upstream: f64, grad: &mut [f64]);
}

/// Gradient-step rule applied once per inner step.
pub trait Optimizer {
    fn step(&mut self, theta: &mut [f64], grad: &[f64]);
}

/// Plain gradient descent.
pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        for (t, g) in theta.iter_mut().zip(grad) {
            *t -= self.lr * g;
        }
    }
}

/// Rectified Adam: adaptive moments with the variance-rectification term;
/// falls back to unadapted momentum steps while the rectification term is
/// undefined (rho_t <= 4).
pub struct RAdam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl RAdam {
    pub fn new(lr: f64) -> Self {
        RAdam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }
}

impl Default for RAdam {
    fn default() -> Self {
        RAdam::new(1e-3)
    }
}

impl Optimizer for RAdam {
    fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        if self.m.len() != theta.len() {
            self.m = vec![0.0; theta.len()];
            self.v = vec![0.0; theta.len()];
            self.t = 0;
        }
        self.t += 1;
        let t = self.t as f64;
        let (b1, b2) = (self.beta1, self.beta2);
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let b2t = b2.powf(t);
        let rho = rho_inf - 2.0 * t * b2t / (1.0 - b2t);
        let bias1 = 1.0 - b1.powf(t);
        for j in 0..theta.len() {
            self.m[j] = b1 * self.m[j] + (1.0 - b1) * grad[j];
            self.v[j] = b2 * self.v[j] + (1.0 - b2) * grad[j] * grad[j];
            let mhat = self.m[j] / bias1;
            if rho > 4.0 {
                let rect = (((rho - 4.0) * (rho - 2.0) * rho_inf)
                    / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho))
                    .sqrt();
                let vhat = (self.v[j] / (1.0 - b2t)).sqrt();
                theta[j] -= self.lr * rect * mhat / (vhat + self.eps);
            } else {
                theta[j] -= self.lr * mhat;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    /// Frozen-index gradient steps per epoch. 0 leaves theta untouched and
    /// records the per-epoch loss only.
    pub inner_steps: usize,
    /// Requested interior TT ranks of the cross.
    pub ranks: Vec<usize>,
    pub cross: CrossOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub samples_cumulative: u64,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub theta: Vec<f64>,
    pub trace: Vec<TraceRow>,
    /// Training hit a non-finite loss and stopped early.
    pub diverged: bool,
    /// First epoch whose index selection matched the previous one.
    pub fixed_point_epoch: Option<usize>,
    pub samples: u64,
    pub final_state: CrossState,
}

struct ThetaOracle<'a, O: ParamOracle> {
    inner: &'a O,
    theta: Vec<f64>,
    shape: Shape,
    count: std::sync::atomic::AtomicU64,
}

impl<O: ParamOracle> TensorOracle for ThetaOracle<'_, O> {
    fn shape(&self) -> &Shape {
        &self.shape
    }

    fn eval(&self, idx: &[usize]) -> f64 {
        self.count.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        self.inner.entry(&self.theta, idx)
    }

    fn samples(&self) -> u64 {
        self.count.load(std::sync::atomic::Ordering::Relaxed)
    }
}

/// The paper-style alternation: each epoch reselects the cross indices under
/// the current parameters, then runs `inner_steps` gradient updates with the
/// indices frozen, chaining loss -> core adjoints -> sampled-entry gradient
/// -> parameter gradient.
pub fn alternate_train<O, L, P>(
    oracle: &O,
    loss: &L,
    theta0: Vec<f64>,
    opt: &mut P,
    opts: &TrainOptions,
) -> Result<TrainResult>
where
    O: ParamOracle,
    L: CoreLoss,
    P: Optimizer,
{
    let dims = oracle.dims().to_vec();
    let mut theta = theta0;
    let mut state = CrossState::new(&dims, &opts.ranks, opts.cross.seed)?;
    let mut trace = Vec::new();
    let mut samples = 0u64;
    let mut step = 0usize;
    let mut fixed_point_epoch = None;
    let mut diverged = false;
    'outer: for epoch in 0..opts.epochs {
        let wrapped = ThetaOracle {
            inner: oracle,
            theta: theta.clone(),
            shape: Shape::new(dims.clone())?,
            count: std::sync::atomic::AtomicU64::new(0),
        };
        let before = state.clone();
        select_indices(&wrapped, &mut state, &opts.cross)?;
        samples += wrapped.samples();
        if fixed_point_epoch.is_none() && epoch > 0 && state.same_indices(&before) {
            fixed_point_epoch = Some(epoch);
        }
        if opts.inner_steps == 0 {
            let th = theta.clone();
            let fc = FrozenCross::freeze(&state, &|idx: &[usize]| oracle.entry(&th, idx))?;
            samples += fc.sample_count();
            trace.push(TraceRow {
                step,
                epoch,
                loss: loss.value(fc.tt()),
                samples_cumulative: samples,
            });
            step += 1;
            continue;
        }
        for _ in 0..opts.inner_steps {
            let th = theta.clone();
            let fc = FrozenCross::freeze(&state, &|idx: &[usize]| oracle.entry(&th, idx))?;
            samples += fc.sample_count();
            let value = loss.value(fc.tt());
            trace.push(TraceRow { step, epoch, loss: value, samples_cumulative: samples });
            step += 1;
            if !value.is_finite() {
                diverged = true;
                break 'outer;
            }
            let sample_grad = cross_vjp(&fc, &loss.adjoints(fc.tt()))?;
            let mut grad = vec![0.0; oracle.param_count()];
            for (idx, &g) in &sample_grad {
                oracle.entry_vjp(&theta, idx, g, &mut grad);
            }
            opt.step(&mut theta, &grad);
        }
    }
    Ok(TrainResult { theta, trace, diverged, fixed_point_epoch, samples, final_state: state })
}

/// Write a loss trace as CSV with columns step, epoch, loss,
/// samples_cumulative.
pub fn write_trace_csv<W: Write>(mut w: W, trace: &[TraceRow]) -> Result<()> {
    writeln!(w, "step,epoch,loss,samples_cumulative")?;
    for row in trace {
        writeln!(w, "{},{},{:.17e},{}", row.step, row.epoch, row.loss, row.samples_cumulative)?;
    }
    Ok(())
}

/// L = (tt[idx] - target)^2 / 2; adjoints via the inner product with the
/// indicator rank-1 tensor.
pub struct PointLoss {
    pub idx: MultiIndex,
    pub target: f64,
}

impl CoreLoss for PointLoss {
    fn value(&self, tt: &TTTensor) -> f64 {
        let r = tt.eval(&self.idx) - self.target;
        0.5 * r * r
    }

    fn adjoints(&self, tt: &TTTensor) -> Vec<Core> {
        let indicator = indicator_tt(&tt.dims(), &self.idx);
        let r = tt.eval(&self.idx) - self.target;
        let mut grads = crate::tt::tt_inner_vjp(tt, &indicator);
        for g in &mut grads {
            for v in &mut g.data {
                *v *= r;
            }
        }
        grads
    }
}

/// Mean squared error against fixed targets at fixed probe indices, with
/// analytic core adjoints.
pub struct ProbeLoss {
    pub probes: Vec<(MultiIndex, f64)>,
}

impl CoreLoss for ProbeLoss {
    fn value(&self, tt: &TTTensor) -> f64 {
        let n = self.probes.len().max(1) as f64;
        self.probes.iter().map(|(idx, y)| (tt.eval(idx) - y).powi(2)).sum::<f64>() / n
    }

    fn adjoints(&self, tt: &TTTensor) -> Vec<Core> {
        let n = self.probes.len().max(1) as f64;
        let dims = tt.dims();
        let mut total: Option<Vec<Core>> = None;
        for (idx, y) in &self.probes {
            let indicator = indicator_tt(&dims, idx);
            let scale = 2.0 * (tt.eval(idx) - y) / n;
            let grads = crate::tt::tt_inner_vjp(tt, &indicator);
            match &mut total {
                None => {
                    let mut grads = grads;
                    for g in &mut grads {
                        for v in &mut g.data {
                            *v *= scale;
                        }
                    }
                    total = Some(grads);
                }
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        for (av, gv) in a.data.iter_mut().zip(&g.data) {
                            *av += scale * gv;
                        }
                    }
                }
            }
        }
        total.unwrap_or_else(|| {
            tt.cores().iter().map(|c| Core::zeros(c.r0, c.n, c.r1)).collect()
        })
    }
}

fn indicator_tt(dims: &[usize], idx: &[usize]) -> TTTensor {
    let vectors: Vec<Vec<f64>> = dims
        .iter()
        .zip(idx)
        .map(|(&n, &i)| {
            let mut v = vec![0.0; n];
            v[i] = 1.0;
            v
        })
        .collect();
    TTTensor::rank_one(&vectors).expect("indicator is a valid rank-1 TT")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cross::cross_approximate;
    use crate::oracle::FnOracle;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Sum of all core entries: linear in every sampled value.
    struct SumLoss;

    impl CoreLoss for SumLoss {
        fn value(&self, tt: &TTTensor) -> f64 {
            tt.cores().iter().map(|c| c.data.iter().sum::<f64>()).sum()
        }

        fn adjoints(&self, tt: &TTTensor) -> Vec<Core> {
            tt.cores()
                .iter()
                .map(|c| Core::from_data(c.r0, c.n, c.r1, vec![1.0; c.data.len()]).unwrap())
                .collect()
        }
    }

    /// Half the squared Frobenius norm of the core entries.
    struct QuadLoss;

    impl CoreLoss for QuadLoss {
        fn value(&self, tt: &TTTensor) -> f64 {
            0.5 * tt.cores().iter().map(|c| c.data.iter().map(|v| v * v).sum::<f64>()).sum::<f64>()
        }

        fn adjoints(&self, tt: &TTTensor) -> Vec<Core> {
            tt.cores().to_vec()
        }
    }

    fn selected_state<F>(dims: &[usize], ranks: &[usize], seed: u64, f: F) -> CrossState
    where
        F: Fn(&[usize]) -> f64 + Sync,
    {
        let oracle = FnOracle::new(Shape::new(dims.to_vec()).unwrap(), f);
        let mut state = CrossState::new(dims, ranks, seed).unwrap();
        let opts = CrossOptions { seed, ..Default::default() };
        select_indices(&oracle, &mut state, &opts).unwrap();
        state
    }

    #[test]
    fn scalar_case_matches_quotient_rule() {
        // 2x2 rank-1 cross: Q_0(i) = e_i / pivot, last core raw.
        let vals = [[2.0, 3.0], [5.0, 7.0]];
        let f = |idx: &[usize]| vals[idx[0]][idx[1]];
        let left = vec![vec![vec![]], vec![vec![0usize]]];
        let right = vec![vec![vec![1usize]], vec![vec![]]];
        let fc = FrozenCross::from_sets(&[2, 2], &left, &right, &f).unwrap();
        // core 0 entries: e(i) / pivot with pivot = f(0,1) = 3
        assert!((fc.tt().cores()[0].at(0, 0, 0) - 3.0 / 3.0).abs() < 1e-15);
        assert!((fc.tt().cores()[0].at(0, 1, 0) - 7.0 / 3.0).abs() < 1e-15);
        // adjoint 1.0 on core0 entry i=1: dQ/de = 1/pivot, dQ/dpivot = -e/pivot^2
        let mut adj = vec![Core::zeros(1, 2, 1), Core::zeros(1, 2, 1)];
        *adj[0].at_mut(0, 1, 0) = 1.0;
        let grad = cross_vjp(&fc, &adj).unwrap();
        assert!((grad[&vec![1, 1]] - 1.0 / 3.0).abs() < 1e-15);
        assert!((grad[&vec![0, 1]] - (-7.0 / 9.0)).abs() < 1e-14);
    }

    #[test]
    fn zero_adjoints_give_zero_gradient() {
        let src = TTTensor::random(&[4, 4, 4], &[2, 2], 3).unwrap();
        let f = move |idx: &[usize]| src.eval(idx);
        let state = selected_state(&[4, 4, 4], &[2, 2], 5, &f);
        let fc = FrozenCross::freeze(&state, &f).unwrap();
        let adj: Vec<Core> =
            fc.tt().cores().iter().map(|c| Core::zeros(c.r0, c.n, c.r1)).collect();
        let grad = cross_vjp(&fc, &adj).unwrap();
        assert!(grad.values().all(|&v| v == 0.0));
        assert!(!grad.is_empty());
    }

    #[test]
    fn linear_loss_matches_fd_to_roundoff() {
        let src = TTTensor::random(&[3, 4, 3], &[2, 2], 11).unwrap();
        let f = move |idx: &[usize]| src.eval(idx);
        let state = selected_state(&[3, 4, 3], &[2, 2], 7, &f);
        let dev = gradcheck(&state, &f, &SumLoss).unwrap();
        assert!(dev < 1e-9, "deviation {dev}");
    }

    #[test]
    fn quadratic_loss_matches_fd() {
        let src = TTTensor::random(&[4, 3, 4], &[2, 2], 23).unwrap();
        let f = move |idx: &[usize]| src.eval(idx);
        let state = selected_state(&[4, 3, 4], &[2, 2], 9, &f);
        let dev = gradcheck(&state, &f, &QuadLoss).unwrap();
        assert!(dev < 1e-5, "deviation {dev}");
    }

    #[test]
    fn gradcheck_over_five_seeds() {
        for seed in 0..5u64 {
            let src = TTTensor::random(&[3, 3, 3], &[2, 2], 100 + seed).unwrap();
            let f = move |idx: &[usize]| src.eval(idx);
            let state = selected_state(&[3, 3, 3], &[2, 2], seed, &f);
            let dev = gradcheck(&state, &f, &QuadLoss).unwrap();
            assert!(dev < 1e-5, "seed {seed} deviation {dev}");
        }
    }

    #[test]
    fn overlapping_crosses_accumulate() {
        // rank-2 cross on a 3x3: pivot entries also appear as fiber entries,
        // so their gradient must be the sum of both uses; FD sees the sum.
        let m = [[1.0, 0.3, -0.2], [0.4, 2.0, 0.6], [-0.5, 0.1, 1.5]];
        let f = |idx: &[usize]| m[idx[0]][idx[1]];
        let left = vec![vec![vec![]], vec![vec![0usize], vec![1usize]]];
        let right = vec![vec![vec![0usize], vec![1usize]], vec![vec![]]];
        let fc = FrozenCross::from_sets(&[3, 3], &left, &right, &f).unwrap();
        let adj = SumLoss.adjoints(fc.tt());
        let grad = cross_vjp(&fc, &adj).unwrap();
        let h = 1e-6;
        for (idx, &a) in &grad {
            let shifted = |s: f64| {
                let g = |x: &[usize]| f(x) + if x == idx.as_slice() { s } else { 0.0 };
                SumLoss.value(FrozenCross::from_sets(&[3, 3], &left, &right, &g).unwrap().tt())
            };
            let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
            assert!(
                (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8) < 1e-6,
                "idx {idx:?}: analytic {a} vs fd {fd}"
            );
        }
    }

    #[test]
    fn frozen_forward_is_bitwise_pure() {
        let src = TTTensor::random(&[4, 4, 4], &[2, 2], 77).unwrap();
        let f = move |idx: &[usize]| src.eval(idx);
        let state = selected_state(&[4, 4, 4], &[2, 2], 3, &f);
        let a = FrozenCross::freeze(&state, &f).unwrap();
        let b = FrozenCross::freeze(&state, &f).unwrap();
        for (ca, cb) in a.tt().cores().iter().zip(b.tt().cores()) {
            assert_eq!(ca.data, cb.data);
        }
    }

    struct ScaledField {
        dims: Vec<usize>,
    }

    impl ParamOracle for ScaledField {
        fn dims(&self) -> &[usize] {
            &self.dims
        }
        fn param_count(&self) -> usize {
            1
        }
        fn entry(&self, theta: &[f64], idx: &[usize]) -> f64 {
            theta[0]
                * idx.iter().zip(&self.dims).fold(1.0, |acc, (&i, &n)| {
                    acc * (1.0 + i as f64 / n as f64)
                })
        }
        fn entry_vjp(&self, _theta: &[f64], idx: &[usize], upstream: f64, grad: &mut [f64]) {
            grad[0] += upstream
                * idx.iter().zip(&self.dims).fold(1.0, |acc, (&i, &n)| {
                    acc * (1.0 + i as f64 / n as f64)
                });
        }
    }

    #[test]
    fn global_scale_reaches_closed_form_optimum() {
        // entry = theta * g(idx) with g rank-1; loss = (tt[idx0] - y)^2 / 2.
        // The interpolation is exact for rank-1 fields, so the optimum is
        // theta* = y / g(idx0).
        let oracle = ScaledField { dims: vec![4, 4, 4] };
        let idx0 = vec![1usize, 2, 3];
        let g0 = oracle.entry(&[1.0], &idx0);
        let y = 2.5;
        let loss = PointLoss { idx: idx0.clone(), target: y };
        let opts = TrainOptions {
            epochs: 40,
            inner_steps: 5,
            ranks: vec![1, 1],
            cross: CrossOptions { seed: 13, ..Default::default() },
        };
        let mut opt = Sgd { lr: 0.05 };
        let result = alternate_train(&oracle, &loss, vec![0.2], &mut opt, &opts).unwrap();
        assert!(!result.diverged);
        let theta_star = y / g0;
        assert!(
            (result.theta[0] - theta_star).abs() < 1e-6,
            "theta {} vs optimum {theta_star}",
            result.theta[0]
        );
        assert!(result.trace.len() <= 200);
        assert!(result.fixed_point_epoch.is_some());
    }

    #[test]
    fn zero_inner_steps_is_a_no_op() {
        let oracle = ScaledField { dims: vec![4, 4] };
        let loss = PointLoss { idx: vec![0, 0], target: 1.0 };
        let opts = TrainOptions {
            epochs: 3,
            inner_steps: 0,
            ranks: vec![1],
            cross: CrossOptions { seed: 1, ..Default::default() },
        };
        let mut opt = Sgd { lr: 0.1 };
        let result = alternate_train(&oracle, &loss, vec![0.7], &mut opt, &opts).unwrap();
        assert_eq!(result.theta, vec![0.7]);
        let losses: Vec<f64> = result.trace.iter().map(|r| r.loss).collect();
        assert!(losses.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(result.trace.len(), 3);
    }

    #[test]
    fn trace_csv_has_expected_layout() {
        let trace = vec![
            TraceRow { step: 0, epoch: 0, loss: 1.5, samples_cumulative: 10 },
            TraceRow { step: 1, epoch: 0, loss: 0.5, samples_cumulative: 20 },
        ];
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &trace).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "step,epoch,loss,samples_cumulative");
        assert!(lines.next().unwrap().starts_with("0,0,1.5"));
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn probe_loss_adjoints_match_fd() {
        let src = TTTensor::random(&[3, 3, 3], &[2, 2], 55).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let probes: Vec<(MultiIndex, f64)> = (0..5)
            .map(|_| {
                let idx: MultiIndex = (0..3).map(|_| rng.gen_range(0..3)).collect();
                (idx, rng.gen_range(-1.0..1.0))
            })
            .collect();
        let loss = ProbeLoss { probes };
        let f = move |idx: &[usize]| src.eval(idx);
        let state = selected_state(&[3, 3, 3], &[2, 2], 6, &f);
        let dev = gradcheck(&state, &f, &loss).unwrap();
        assert!(dev < 1e-5, "deviation {dev}");
    }

    #[test]
    fn theta_independent_oracle_reaches_fixed_point() {
        // exact-rank field: selection must stabilize and report the epoch
        let dims = vec![6, 6, 6];
        let src = TTTensor::random(&dims, &[2, 2], 42).unwrap();
        let shape = Shape::new(dims.clone()).unwrap();
        let oracle = FnOracle::new(shape, move |idx| src.eval(idx));
        let (_, report) = cross_approximate(&oracle, &[2, 2], &CrossOptions::default()).unwrap();
        assert!(report.converged);
    }
}
