//! TT-domain PCA: stack training instances along a new leading dimension,
//! right-orthogonalize the trailing chain so the leading core carries all the
//! scale, then SVD-truncate it into per-instance feature vectors and a shared
//! right-orthogonal basis. New instances project onto the basis with TT inner
//! products only.

use nalgebra::DMatrix;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::io::{read_cpt1, write_cpt1};
use crate::linalg;
use crate::tt::{tt_inner, tt_orthogonalize, tt_stack, Core, Orthogonality, TTTensor};

/// Deterministic SVD sign rule used throughout: the entry of largest
/// magnitude in each left singular vector is made positive.
pub const SIGN_CONVENTION: &str = "largest-entry-positive";

/// Shared right-orthogonal basis spanning the dominant rank-r subspace of a
/// set of stacked instances. Basis vector j is the trailing TT chain with the
/// leading bond pinned to slot j.
#[derive(Debug, Clone)]
pub struct FeatureBasis {
    /// Trailing cores; the first has r0 = achieved rank.
    cores: Vec<Core>,
    /// Requested feature dimension.
    pub r: usize,
    /// Numerically achieved rank (= r unless the stack was degenerate).
    pub achieved: usize,
    /// True when the stack's numerical rank fell short of r and feature
    /// columns were zero-padded.
    pub degenerate: bool,
}

/// K x r matrix of per-instance feature vectors, rows ordered as the
/// instances were supplied. Carries singular-value scaling (U*Sigma), so row
/// k reproduces the inner products of instance k with the basis vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub data: DMatrix<f64>,
}

impl FeatureMatrix {
    pub fn nrows(&self) -> usize {
        self.data.nrows()
    }

    pub fn row(&self, k: usize) -> Vec<f64> {
        (0..self.data.ncols()).map(|j| self.data[(k, j)]).collect()
    }

    /// CSV export, one instance per line, 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        for k in 0..self.data.nrows() {
            let line: Vec<String> =
                (0..self.data.ncols()).map(|j| format!("{:.17e}", self.data[(k, j)])).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }
}

impl FeatureBasis {
    pub fn dims(&self) -> Vec<usize> {
        self.cores.iter().map(|c| c.n).collect()
    }

    /// Basis vector j as a boundary-rank-1 TT over the trailing modes.
    pub fn basis_vector(&self, j: usize) -> Result<TTTensor> {
        if j >= self.achieved {
            return Err(Error::Precondition(format!(
                "basis vector {j} of {}",
                self.achieved
            )));
        }
        let first = &self.cores[0];
        let mut row = Core::zeros(1, first.n, first.r1);
        for i in 0..first.n {
            for b in 0..first.r1 {
                *row.at_mut(0, i, b) = first.at(j, i, b);
            }
        }
        let mut cores = vec![row];
        cores.extend_from_slice(&self.cores[1..]);
        TTTensor::new(cores)
    }

    /// Header (magic, r, achieved, sign tag) followed by a CPT1 archive of
    /// the basis chain with a selector core prepended to restore boundary
    /// rank 1.
    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(b"FPB1")?;
        w.write_all(&(self.r as u32).to_le_bytes())?;
        w.write_all(&(self.achieved as u32).to_le_bytes())?;
        w.write_all(&[self.degenerate as u8])?;
        let tag = SIGN_CONVENTION.as_bytes();
        w.write_all(&(tag.len() as u32).to_le_bytes())?;
        w.write_all(tag)?;
        let mut lead = Core::zeros(1, self.achieved, self.achieved);
        for j in 0..self.achieved {
            *lead.at_mut(0, j, j) = 1.0;
        }
        let mut cores = vec![lead];
        cores.extend_from_slice(&self.cores);
        write_cpt1(w, &TTTensor::new(cores)?)
    }

    pub fn read<R: Read>(r: &mut R) -> Result<FeatureBasis> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"FPB1" {
            return Err(Error::Format("bad feature-basis magic".into()));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf)?;
        let rank = u32::from_le_bytes(u32buf) as usize;
        r.read_exact(&mut u32buf)?;
        let achieved = u32::from_le_bytes(u32buf) as usize;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        r.read_exact(&mut u32buf)?;
        let tag_len = u32::from_le_bytes(u32buf) as usize;
        let mut tag = vec![0u8; tag_len];
        r.read_exact(&mut tag)?;
        if tag != SIGN_CONVENTION.as_bytes() {
            return Err(Error::Format("unknown sign convention tag".into()));
        }
        let tt = read_cpt1(r)?;
        let cores = tt.cores()[1..].to_vec();
        Ok(FeatureBasis { cores, r: rank, achieved, degenerate: flag[0] != 0 })
    }
}

/// Stack K instances, orthogonalize, and truncate to r principal directions.
/// Features carry singular-value scaling; the basis is right-orthogonal.
pub fn fit_projection(instances: &[TTTensor], r: usize) -> Result<(FeatureBasis, FeatureMatrix)> {
    let k = instances.len();
    if k < r {
        return Err(Error::Precondition(format!("need at least r={r} instances, got {k}")));
    }
    if r == 0 {
        return Err(Error::Precondition("feature dimension must be positive".into()));
    }
    let stacked = tt_stack(instances)?;
    let orth = tt_orthogonalize(&stacked, Orthogonality::Right);
    // leading core is (1, K, j1): the U-hat matrix holding all the scale
    let lead = &orth.cores()[0];
    let uhat = DMatrix::from_fn(lead.n, lead.r1, |i, b| lead.at(0, i, b));
    let (u, s, vt) = linalg::svd_fixed(&uhat)?;
    let smax = s.iter().cloned().fold(0.0f64, f64::max);
    let numerical = s.iter().filter(|&&x| x > 1e-12 * smax.max(f64::MIN_POSITIVE)).count();
    let achieved = numerical.min(r).max(1);
    let degenerate = achieved < r;
    let mut features = DMatrix::zeros(k, r);
    for row in 0..k {
        for j in 0..achieved {
            features[(row, j)] = u[(row, j)] * s[j];
        }
    }
    // absorb the kept right singular directions into the first trailing core
    let vr = vt.rows(0, achieved).into_owned();
    let first = &orth.cores()[1];
    let updated = &vr * first.right_unfold();
    let mut cores = vec![Core::from_right_unfold(&updated, first.n, first.r1)];
    cores.extend_from_slice(&orth.cores()[2..]);
    Ok((FeatureBasis { cores, r, achieved, degenerate }, FeatureMatrix { data: features }))
}

/// Feature vector of one instance: inner products with the basis vectors,
/// zero-padded past the achieved rank.
pub fn project(basis: &FeatureBasis, instance: &TTTensor) -> Result<Vec<f64>> {
    if instance.dims() != basis.dims() {
        return Err(Error::ShapeMismatch(format!(
            "instance modes {:?} vs basis {:?}",
            instance.dims(),
            basis.dims()
        )));
    }
    let mut f = vec![0.0; basis.r];
    for (j, slot) in f.iter_mut().enumerate().take(basis.achieved) {
        *slot = tt_inner(instance, &basis.basis_vector(j)?);
    }
    Ok(f)
}

/// Incremental fit over a stream of batches: each refit appends the running
/// basis vectors, weighted by their singular values, to the next batch, so
/// the final basis spans the dominant subspace of the union. The returned
/// feature matrix projects every instance (in stream order) onto the final
/// basis.
pub fn fit_projection_batched(
    batches: &[Vec<TTTensor>],
    r: usize,
) -> Result<(FeatureBasis, FeatureMatrix)> {
    if batches.is_empty() {
        return Err(Error::Precondition("need at least one batch".into()));
    }
    let mut running: Option<(FeatureBasis, Vec<f64>)> = None;
    for batch in batches {
        if batch.len() < r {
            return Err(Error::Precondition(format!(
                "each batch must hold at least r={r} instances, got {}",
                batch.len()
            )));
        }
        let mut work = batch.clone();
        if let Some((basis, sigmas)) = &running {
            for j in 0..basis.achieved {
                let mut v = basis.basis_vector(j)?;
                v.scale(sigmas[j]);
                work.push(v);
            }
        }
        let (basis, feats) = fit_projection(&work, r)?;
        // column norms of U*Sigma are the singular values of the stack
        let sigmas: Vec<f64> = (0..r)
            .map(|j| (0..feats.data.nrows()).map(|i| feats.data[(i, j)].powi(2)).sum::<f64>().sqrt())
            .collect();
        running = Some((basis, sigmas));
    }
    let (basis, _) = running.expect("at least one batch fitted");
    let total: usize = batches.iter().map(|b| b.len()).sum();
    let mut features = DMatrix::zeros(total, r);
    let mut row = 0;
    for batch in batches {
        for inst in batch {
            let f = project(&basis, inst)?;
            for (j, &v) in f.iter().enumerate() {
                features[(row, j)] = v;
            }
            row += 1;
        }
    }
    Ok((basis, FeatureMatrix { data: features }))
}
