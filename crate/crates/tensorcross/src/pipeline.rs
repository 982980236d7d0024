//! Desk-scale synthetic end-to-end pipeline: a small pointwise encoder maps a
//! volumetric input field into a multi-channel encoding, cross-approximation
//! compresses the encoding into TT form from oracle access only, TT-domain
//! PCA projects instances onto shared features, and a linear regression head
//! predicts per-instance targets. Training alternates index selection with
//! frozen-index analytic gradient steps through the interpolation.

use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cross::{select_indices_with_stats, CrossOptions, CrossState};
use crate::diffca::{cross_vjp, FrozenCross, Optimizer, ParamOracle, RAdam, TraceRow};
use crate::error::{Error, Result};
use crate::oracle::{FnOracle, TensorOracle};
use crate::projection::{fit_projection, project, FeatureBasis};
use crate::shape::Shape;
use crate::tt::{tt_inner_vjp, Core, TTTensor};

/// Quantile levels predicted by the quantile regression head.
pub const QUANTILES: [f64; 3] = [0.2, 0.5, 0.8];

/// Lower clip applied to the predicted scale in [`mlll`].
pub const MLLL_SIGMA_FLOOR: f64 = 70.0;
/// Upper clip applied to the absolute error in [`mlll`].
pub const MLLL_DELTA_CAP: f64 = 1000.0;

/// Sum of pinball losses at the levels in [`QUANTILES`].
pub fn pinball_loss(preds: &[f64; 3], target: f64) -> f64 {
    QUANTILES
        .iter()
        .zip(preds)
        .map(|(&q, &p)| {
            let d = target - p;
            (q * d).max((q - 1.0) * d)
        })
        .sum()
}

/// Modified Laplace log-likelihood: `-sqrt(2)*delta/sigma - ln(sqrt(2)*sigma)`
/// with `sigma` clipped below at [`MLLL_SIGMA_FLOOR`] and `delta` clipped
/// above at [`MLLL_DELTA_CAP`]. A non-positive `sigma` is a domain error.
pub fn mlll(pred: f64, sigma: f64, truth: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Precondition(format!("mlll requires sigma > 0, got {sigma}")));
    }
    let s = sigma.max(MLLL_SIGMA_FLOOR);
    let delta = (pred - truth).abs().min(MLLL_DELTA_CAP);
    let sqrt2 = std::f64::consts::SQRT_2;
    Ok(-sqrt2 * delta / s - (sqrt2 * s).ln())
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

/// Two-layer pointwise encoder: an `s^D` voxel neighborhood feeds a tanh
/// hidden layer and a sigmoid output layer, one output per channel, so every
/// encoded value lies in (0, 1).
#[derive(Debug, Clone)]
pub struct Encoder {
    /// Side length of the cubic input neighborhood.
    pub s: usize,
    /// Number of spatial dimensions of the volume.
    pub spatial: usize,
    pub hidden: usize,
    /// Output channels; the channel index is the trailing TT mode.
    pub n_channels: usize,
}

impl Encoder {
    pub fn input_len(&self) -> usize {
        self.s.pow(self.spatial as u32)
    }

    /// Flat parameter count: W1 (hidden x s^D), b1, W2 (channels x hidden), b2.
    pub fn param_count(&self) -> usize {
        let ni = self.input_len();
        self.hidden * ni + self.hidden + self.n_channels * self.hidden + self.n_channels
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let ni = self.input_len();
        let ob1 = self.hidden * ni;
        let ow2 = ob1 + self.hidden;
        let ob2 = ow2 + self.n_channels * self.hidden;
        (ob1, ow2, ob2)
    }

    /// Seeded uniform initialization scaled by input fan-in.
    pub fn init(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe4c0_de11);
        let (ob1, ow2, ob2) = self.offsets();
        let n = self.param_count();
        let fan1 = (self.input_len() as f64).sqrt();
        let fan2 = (self.hidden as f64).sqrt();
        (0..n)
            .map(|p| {
                let u: f64 = rng.gen_range(-1.0..1.0);
                if p < ob1 {
                    u / fan1
                } else if p < ow2 {
                    0.0
                } else if p < ob2 {
                    u / fan2
                } else {
                    0.0
                }
            })
            .collect()
    }

    fn hidden_acts(&self, theta: &[f64], x: &[f64]) -> Vec<f64> {
        let ni = self.input_len();
        let (ob1, _, _) = self.offsets();
        (0..self.hidden)
            .map(|j| {
                let mut a = theta[ob1 + j];
                for (i, &xi) in x.iter().enumerate() {
                    a += theta[j * ni + i] * xi;
                }
                a.tanh()
            })
            .collect()
    }

    /// Value of output channel `c` for neighborhood values `x`.
    pub fn channel(&self, theta: &[f64], x: &[f64], c: usize) -> f64 {
        let h = self.hidden_acts(theta, x);
        let (_, ow2, ob2) = self.offsets();
        let mut z = theta[ob2 + c];
        for (j, &hj) in h.iter().enumerate() {
            z += theta[ow2 + c * self.hidden + j] * hj;
        }
        sigmoid(z)
    }

    /// All channel outputs at once.
    pub fn forward(&self, theta: &[f64], x: &[f64]) -> Vec<f64> {
        let h = self.hidden_acts(theta, x);
        let (_, ow2, ob2) = self.offsets();
        (0..self.n_channels)
            .map(|c| {
                let mut z = theta[ob2 + c];
                for (j, &hj) in h.iter().enumerate() {
                    z += theta[ow2 + c * self.hidden + j] * hj;
                }
                sigmoid(z)
            })
            .collect()
    }

    /// Accumulate `upstream * d channel(theta, x, c) / d theta` into `grad`.
    pub fn channel_vjp(&self, theta: &[f64], x: &[f64], c: usize, upstream: f64, grad: &mut [f64]) {
        let ni = self.input_len();
        let (ob1, ow2, ob2) = self.offsets();
        let h = self.hidden_acts(theta, x);
        let mut z = theta[ob2 + c];
        for (j, &hj) in h.iter().enumerate() {
            z += theta[ow2 + c * self.hidden + j] * hj;
        }
        let y = sigmoid(z);
        let gz = upstream * y * (1.0 - y);
        grad[ob2 + c] += gz;
        for (j, &hj) in h.iter().enumerate() {
            grad[ow2 + c * self.hidden + j] += gz * hj;
            let ga = gz * theta[ow2 + c * self.hidden + j] * (1.0 - hj * hj);
            grad[ob1 + j] += ga;
            for (i, &xi) in x.iter().enumerate() {
                grad[j * ni + i] += ga * xi;
            }
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// Synthetic task
// ---------------------------------------------------------------------------

/// A family of synthetic volumetric instances. Each instance is a low-rank
/// field pushed through a fixed strictly increasing pointwise nonlinearity;
/// per-instance targets derive from the low-rank mixing weights, so they are
/// recoverable from the volume but not from any single voxel. Inputs are
/// exposed oracle-style; the pipeline never densifies a volume.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub spatial: Vec<usize>,
    pub latent_rank: usize,
    /// factors[m][d][i]: factor m, spatial dimension d, grid index i.
    factors: Vec<Vec<Vec<f64>>>,
    /// Per-instance mixing weights over the shared factors.
    pub weights: Vec<Vec<f64>>,
    /// Targets in [0, 1], derived from the mixing weights.
    pub targets: Vec<f64>,
    /// Optional auxiliary covariate per instance, in [0, 1].
    pub covariates: Vec<f64>,
    /// The first `k_train` instances are the training split.
    pub k_train: usize,
}

impl SyntheticTask {
    pub fn generate(
        spatial: &[usize],
        latent_rank: usize,
        k_train: usize,
        k_val: usize,
        seed: u64,
    ) -> Result<SyntheticTask> {
        Shape::new(spatial.to_vec())?;
        if latent_rank == 0 || k_train == 0 {
            return Err(Error::Precondition("latent rank and train split must be positive".into()));
        }
        let k = k_train + k_val;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e_7a5c);
        // Smooth bounded factors: low-frequency cosines with random phase.
        let factors: Vec<Vec<Vec<f64>>> = (0..latent_rank)
            .map(|_| {
                spatial
                    .iter()
                    .map(|&n| {
                        let freq = rng.gen_range(1..=2) as f64;
                        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                        (0..n)
                            .map(|i| {
                                let t = (i as f64 + 0.5) / n as f64;
                                (std::f64::consts::TAU * freq * t + phase).cos()
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let weights: Vec<Vec<f64>> =
            (0..k).map(|_| (0..latent_rank).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        // Targets: a fixed linear functional of the weights, min-max
        // normalized over the whole family into [0, 1].
        let combo: Vec<f64> = (0..latent_rank).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let raw: Vec<f64> =
            weights.iter().map(|w| w.iter().zip(&combo).map(|(a, b)| a * b).sum()).collect();
        let targets = minmax_unit(&raw);
        let combo2: Vec<f64> = (0..latent_rank).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let raw2: Vec<f64> =
            weights.iter().map(|w| w.iter().zip(&combo2).map(|(a, b)| a * b).sum()).collect();
        let covariates = minmax_unit(&raw2);
        Ok(SyntheticTask {
            spatial: spatial.to_vec(),
            latent_rank,
            factors,
            weights,
            targets,
            covariates,
            k_train,
        })
    }

    pub fn instances(&self) -> usize {
        self.weights.len()
    }

    /// Latent low-rank field of instance `k` at a spatial index.
    pub fn latent(&self, k: usize, idx: &[usize]) -> f64 {
        let mut acc = 0.0;
        for (m, fac) in self.factors.iter().enumerate() {
            let mut p = self.weights[k][m];
            for (d, &i) in idx.iter().enumerate() {
                p *= fac[d][i];
            }
            acc += p;
        }
        acc
    }

    /// Fixed strictly increasing pointwise nonlinearity applied to the latent
    /// field before observation.
    pub fn warp(x: f64) -> f64 {
        x + 0.25 * x * x * x
    }

    /// Observed input volume of instance `k` (what the encoder sees).
    pub fn input(&self, k: usize, idx: &[usize]) -> f64 {
        Self::warp(self.latent(k, idx))
    }
}

fn minmax_unit(raw: &[f64]) -> Vec<f64> {
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return vec![0.5; raw.len()];
    }
    raw.iter().map(|&v| (v - lo) / (hi - lo)).collect()
}

/// One instance's encoded volume as a parametric oracle over the modes
/// `spatial ++ [channels]`. Entries are encoder outputs over the clamped
/// `s^D` neighborhood of the addressed voxel.
pub struct EncodedInstance<'a> {
    task: &'a SyntheticTask,
    pub k: usize,
    enc: &'a Encoder,
    dims: Vec<usize>,
    /// Total flat parameter length (encoder prefix + any trailing params).
    theta_len: usize,
}

impl<'a> EncodedInstance<'a> {
    pub fn new(task: &'a SyntheticTask, enc: &'a Encoder, k: usize, theta_len: usize) -> Self {
        let mut dims = task.spatial.clone();
        dims.push(enc.n_channels);
        EncodedInstance { task, k, enc, dims, theta_len }
    }

    /// Clamped neighborhood values around a spatial index, offset-major.
    pub fn neighborhood(&self, center: &[usize]) -> Vec<f64> {
        let s = self.enc.s;
        let d = self.task.spatial.len();
        let mut vals = Vec::with_capacity(s.pow(d as u32));
        let mut off = vec![0usize; d];
        loop {
            let idx: Vec<usize> = (0..d)
                .map(|a| {
                    let p = center[a] as isize + off[a] as isize - (s / 2) as isize;
                    p.clamp(0, self.task.spatial[a] as isize - 1) as usize
                })
                .collect();
            vals.push(self.task.input(self.k, &idx));
            // odometer over the s^d offsets
            let mut a = d;
            loop {
                if a == 0 {
                    return vals;
                }
                a -= 1;
                off[a] += 1;
                if off[a] < s {
                    break;
                }
                off[a] = 0;
            }
        }
    }
}

impl ParamOracle for EncodedInstance<'_> {
    fn dims(&self) -> &[usize] {
        &self.dims
    }

    fn param_count(&self) -> usize {
        self.theta_len
    }

    fn entry(&self, theta: &[f64], idx: &[usize]) -> f64 {
        let d = self.task.spatial.len();
        let x = self.neighborhood(&idx[..d]);
        self.enc.channel(theta, &x, idx[d])
    }

    fn entry_vjp(&self, theta: &[f64], idx: &[usize], upstream: f64, grad: &mut [f64]) {
        let d = self.task.spatial.len();
        let x = self.neighborhood(&idx[..d]);
        self.enc.channel_vjp(theta, &x, idx[d], upstream, grad);
    }
}

// ---------------------------------------------------------------------------
// Regression head
// ---------------------------------------------------------------------------

/// Output layout of the regression head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Single point prediction, trained with mean squared error.
    Scalar,
    /// Three quantile predictions at [`QUANTILES`], trained with pinball
    /// loss; inference applies a monotonicity repair (sorting).
    Quantile,
}

impl HeadKind {
    pub fn outputs(self) -> usize {
        match self {
            HeadKind::Scalar => 1,
            HeadKind::Quantile => 3,
        }
    }
}

/// Linear head over `in_len` inputs (features plus optional covariate);
/// parameters are `outputs` rows of `in_len` weights followed by a bias.
#[derive(Debug, Clone, Copy)]
struct Head {
    kind: HeadKind,
    in_len: usize,
}

impl Head {
    fn param_count(&self) -> usize {
        self.kind.outputs() * (self.in_len + 1)
    }

    fn predict_raw(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        (0..self.kind.outputs())
            .map(|o| {
                let row = &params[o * (self.in_len + 1)..];
                let mut z = row[self.in_len];
                for (j, &xj) in x.iter().enumerate() {
                    z += row[j] * xj;
                }
                z
            })
            .collect()
    }

    /// Point prediction after monotonicity repair.
    fn predict(&self, params: &[f64], x: &[f64]) -> f64 {
        let raw = self.predict_raw(params, x);
        match self.kind {
            HeadKind::Scalar => raw[0],
            HeadKind::Quantile => {
                let [_, med, _] = repair(&raw);
                med
            }
        }
    }

    /// Predicted scale for the likelihood metric: the repaired interquantile
    /// spread for quantile heads, the clip floor otherwise.
    fn predict_sigma(&self, params: &[f64], x: &[f64]) -> f64 {
        match self.kind {
            HeadKind::Scalar => MLLL_SIGMA_FLOOR,
            HeadKind::Quantile => {
                let raw = self.predict_raw(params, x);
                let [lo, _, hi] = repair(&raw);
                (hi - lo).max(f64::MIN_POSITIVE)
            }
        }
    }

    /// Training loss and its gradient with respect to the raw outputs.
    fn loss_and_output_grad(&self, raw: &[f64], target: f64) -> (f64, Vec<f64>) {
        match self.kind {
            HeadKind::Scalar => {
                let e = raw[0] - target;
                (e * e, vec![2.0 * e])
            }
            HeadKind::Quantile => {
                let preds = [raw[0], raw[1], raw[2]];
                let loss = pinball_loss(&preds, target);
                let grad = QUANTILES
                    .iter()
                    .zip(&preds)
                    .map(|(&q, &p)| if target - p > 0.0 { -q } else { 1.0 - q })
                    .collect();
                (loss, grad)
            }
        }
    }

    /// Accumulate gradients of `sum_o gout[o] * raw[o]` into head parameter
    /// and input slots.
    fn vjp(&self, params: &[f64], x: &[f64], gout: &[f64], gparams: &mut [f64], gx: &mut [f64]) {
        for (o, &g) in gout.iter().enumerate() {
            let base = o * (self.in_len + 1);
            gparams[base + self.in_len] += g;
            for (j, &xj) in x.iter().enumerate() {
                gparams[base + j] += g * xj;
                gx[j] += g * params[base + j];
            }
        }
    }
}

/// Sort three quantile outputs into non-decreasing order.
fn repair(raw: &[f64]) -> [f64; 3] {
    let mut v = [raw[0], raw[1], raw[2]];
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v
}

// ---------------------------------------------------------------------------
// Experiment driver
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    /// Interior TT ranks over the `D+1` encoding modes.
    pub ranks: Vec<usize>,
    pub n_channels: usize,
    /// Neighborhood side length `s`.
    pub neighborhood: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub inner_steps: usize,
    /// Number of PCA features `r`; requires `k_train >= r`.
    pub feature_rank: usize,
    pub head: HeadKind,
    pub use_covariate: bool,
    pub lr: f64,
    pub seed: u64,
    pub cross: CrossOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            ranks: Vec::new(),
            n_channels: 2,
            neighborhood: 3,
            hidden: 8,
            epochs: 4,
            inner_steps: 8,
            feature_rank: 2,
            head: HeadKind::Scalar,
            use_covariate: false,
            lr: 0.05,
            seed: 0,
            cross: CrossOptions::default(),
        }
    }
}

/// Prediction quality on the train/validation split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitMetrics {
    pub train_rmse: f64,
    pub val_rmse: f64,
    /// Mean modified Laplace log-likelihood on the validation split.
    pub val_mlll: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub trace: Vec<TraceRow>,
    pub untrained: SplitMetrics,
    pub trained: SplitMetrics,
    /// Total encoded-entry oracle evaluations across the whole run.
    pub samples: u64,
    /// Largest encoded-entry count evaluated by any single selection sweep
    /// or interpolation freeze.
    pub max_step_samples: u64,
    /// Largest fiber matrix held resident at any point, in entries.
    pub peak_resident: usize,
    pub epochs_run: usize,
}

impl ExperimentReport {
    /// Per-step training trace (same layout as the optimizer trace CSV).
    pub fn write_trace_csv<W: Write>(&self, w: W) -> Result<()> {
        crate::diffca::write_trace_csv(w, &self.trace)
    }

    /// Final metrics, one row per metric, untrained vs trained.
    pub fn write_metrics_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "metric,untrained,trained")?;
        writeln!(
            w,
            "train_rmse,{:.17e},{:.17e}",
            self.untrained.train_rmse, self.trained.train_rmse
        )?;
        writeln!(w, "val_rmse,{:.17e},{:.17e}", self.untrained.val_rmse, self.trained.val_rmse)?;
        writeln!(w, "val_mlll,{:.17e},{:.17e}", self.untrained.val_mlll, self.trained.val_mlll)?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("epochs run:        {}\n", self.epochs_run));
        s.push_str(&format!("gradient steps:    {}\n", self.trace.len()));
        s.push_str(&format!("oracle samples:    {}\n", self.samples));
        s.push_str(&format!("max step samples:  {}\n", self.max_step_samples));
        s.push_str(&format!("peak resident:     {}\n", self.peak_resident));
        s.push_str(&format!(
            "train rmse:        {:.6} -> {:.6}\n",
            self.untrained.train_rmse, self.trained.train_rmse
        ));
        s.push_str(&format!(
            "val rmse:          {:.6} -> {:.6}\n",
            self.untrained.val_rmse, self.trained.val_rmse
        ));
        s.push_str(&format!(
            "val mlll:          {:.6} -> {:.6}\n",
            self.untrained.val_mlll, self.trained.val_mlll
        ));
        s
    }
}

/// Internal bookkeeping shared by selection/freeze calls.
#[derive(Default)]
struct Meter {
    samples: u64,
    max_step: u64,
    peak_resident: usize,
}

impl Meter {
    fn step(&mut self, n: u64) {
        self.samples += n;
        self.max_step = self.max_step.max(n);
    }
}

/// Per-column mean and standard deviation of the training-split feature
/// matrix. Applied as a frozen (stop-gradient) affine rescaling so head
/// inputs stay O(1) regardless of instance norms.
fn feature_stats(feats: &[Vec<f64>], r: usize) -> (Vec<f64>, Vec<f64>) {
    let n = feats.len().max(1) as f64;
    let mut mean = vec![0.0; r];
    let mut std = vec![0.0; r];
    for f in feats {
        for j in 0..r {
            mean[j] += f[j] / n;
        }
    }
    for f in feats {
        for j in 0..r {
            std[j] += (f[j] - mean[j]) * (f[j] - mean[j]) / n;
        }
    }
    for s in &mut std {
        *s = s.sqrt().max(1e-12);
    }
    (mean, std)
}

fn head_input(features: &[f64], stats: &(Vec<f64>, Vec<f64>), covariate: Option<f64>) -> Vec<f64> {
    let mut x: Vec<f64> = features
        .iter()
        .zip(stats.0.iter().zip(&stats.1))
        .map(|(&f, (&m, &s))| (f - m) / s)
        .collect();
    if let Some(c) = covariate {
        x.push(c);
    }
    x
}

/// Select interpolation indices for one instance with the current parameters,
/// counting oracle traffic.
fn select_for(
    inst: &EncodedInstance<'_>,
    theta: &[f64],
    state: &mut CrossState,
    opts: &CrossOptions,
    meter: &mut Meter,
) -> Result<()> {
    let shape = Shape::new(inst.dims().to_vec())?;
    let oracle = FnOracle::new(shape, |idx: &[usize]| inst.entry(theta, idx));
    let peak = select_indices_with_stats(&oracle, state, opts)?;
    meter.peak_resident = meter.peak_resident.max(peak);
    meter.step(oracle.samples());
    Ok(())
}

/// Freeze one instance's interpolation at the current parameters.
fn freeze_for(
    inst: &EncodedInstance<'_>,
    theta: &[f64],
    state: &CrossState,
    meter: &mut Meter,
) -> Result<FrozenCross> {
    let fc = FrozenCross::freeze(state, &|idx: &[usize]| inst.entry(theta, idx))?;
    meter.step(fc.sample_count());
    let ranks = state.ranks();
    let dims = state.dims();
    let mut peak = 0usize;
    for d in 0..dims.len() {
        peak = peak.max(ranks[d] * dims[d] * ranks[d + 1]);
    }
    meter.peak_resident = meter.peak_resident.max(peak);
    Ok(fc)
}

/// Evaluate the full inference path (selection, interpolation, projection,
/// head) at fixed parameters and report split metrics.
fn evaluate(
    task: &SyntheticTask,
    cfg: &PipelineConfig,
    enc: &Encoder,
    head: &Head,
    theta: &[f64],
    head_off: usize,
    meter: &mut Meter,
) -> Result<SplitMetrics> {
    let k_all = task.instances();
    let mut tts: Vec<TTTensor> = Vec::with_capacity(k_all);
    for k in 0..k_all {
        let inst = EncodedInstance::new(task, enc, k, theta.len());
        let mut state = CrossState::new(inst.dims(), &cfg.ranks, cfg.seed ^ fold(k))?;
        let mut opts = cfg.cross.clone();
        opts.seed = cfg.seed ^ fold(k) ^ 0xe7a1;
        // two sweep passes so the index sets settle
        select_for(&inst, theta, &mut state, &opts, meter)?;
        select_for(&inst, theta, &mut state, &opts, meter)?;
        let fc = freeze_for(&inst, theta, &state, meter)?;
        tts.push(fc.tt().clone());
    }
    let (basis, _) = fit_projection(&tts[..task.k_train], cfg.feature_rank)?;
    let feats: Vec<Vec<f64>> =
        tts.iter().map(|t| project(&basis, t)).collect::<Result<_>>()?;
    let stats = feature_stats(&feats[..task.k_train], cfg.feature_rank);
    let hp = &theta[head_off..];
    let mut sq_train = 0.0;
    let mut sq_val = 0.0;
    let mut mlll_val = 0.0;
    let n_val = (k_all - task.k_train).max(1);
    for k in 0..k_all {
        let cov = cfg.use_covariate.then(|| task.covariates[k]);
        let x = head_input(&feats[k], &stats, cov);
        let pred = head.predict(hp, &x);
        let e = pred - task.targets[k];
        if k < task.k_train {
            sq_train += e * e;
        } else {
            sq_val += e * e;
            mlll_val += mlll(pred, head.predict_sigma(hp, &x), task.targets[k])?;
        }
    }
    Ok(SplitMetrics {
        train_rmse: (sq_train / task.k_train as f64).sqrt(),
        val_rmse: (sq_val / n_val as f64).sqrt(),
        val_mlll: mlll_val / n_val as f64,
    })
}

fn fold(k: usize) -> u64 {
    (k as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Run the end-to-end experiment: baseline evaluation with the initial
/// parameters, alternating training (index selection per epoch, frozen-index
/// analytic gradient steps within), then final evaluation. With zero epochs
/// the trained metrics equal the untrained baseline exactly.
pub fn run_experiment(task: &SyntheticTask, cfg: &PipelineConfig) -> Result<ExperimentReport> {
    let d = task.spatial.len();
    if cfg.ranks.len() != d {
        return Err(Error::Precondition(format!(
            "need {} interior ranks for {} encoding modes",
            d,
            d + 1
        )));
    }
    if task.k_train < cfg.feature_rank {
        return Err(Error::Precondition(format!(
            "feature rank {} exceeds training instances {}",
            cfg.feature_rank, task.k_train
        )));
    }
    if task.instances() <= task.k_train {
        return Err(Error::Precondition("need at least one validation instance".into()));
    }
    let enc = Encoder {
        s: cfg.neighborhood,
        spatial: d,
        hidden: cfg.hidden,
        n_channels: cfg.n_channels,
    };
    let head =
        Head { kind: cfg.head, in_len: cfg.feature_rank + usize::from(cfg.use_covariate) };
    let head_off = enc.param_count();
    let theta_len = head_off + head.param_count();

    let mut theta = enc.init(cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4ead_1e55);
    theta.extend((0..head.param_count()).map(|_| rng.gen_range(-0.1..0.1)));
    debug_assert_eq!(theta.len(), theta_len);

    let mut meter = Meter::default();
    let untrained = evaluate(task, cfg, &enc, &head, &theta, head_off, &mut meter)?;

    let mut trace: Vec<TraceRow> = Vec::new();
    let mut opt = RAdam::new(cfg.lr);
    let k_train = task.k_train;
    let insts: Vec<EncodedInstance<'_>> =
        (0..k_train).map(|k| EncodedInstance::new(task, &enc, k, theta_len)).collect();
    let mut states: Vec<CrossState> = (0..k_train)
        .map(|k| CrossState::new(insts[k].dims(), &cfg.ranks, cfg.seed ^ fold(k)))
        .collect::<Result<_>>()?;

    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        // alternation phase 1: re-select interpolation indices at current
        // parameters; index sets stay frozen for the whole epoch
        for k in 0..k_train {
            let mut opts = cfg.cross.clone();
            opts.seed = cfg.seed ^ fold(k);
            select_for(&insts[k], &theta, &mut states[k], &opts, &mut meter)?;
        }
        // alternation phase 2: analytic gradient steps through the frozen
        // interpolation; the PCA basis is recomputed each step but treated
        // as a constant of the backward pass
        for _ in 0..cfg.inner_steps.max(1) {
            let mut frozen: Vec<FrozenCross> = Vec::with_capacity(k_train);
            for k in 0..k_train {
                frozen.push(freeze_for(&insts[k], &theta, &states[k], &mut meter)?);
            }
            let tts: Vec<TTTensor> = frozen.iter().map(|f| f.tt().clone()).collect();
            let (basis, _) = fit_projection(&tts, cfg.feature_rank)?;
            let feats: Vec<Vec<f64>> =
                tts.iter().map(|t| project(&basis, t)).collect::<Result<_>>()?;
            let stats = feature_stats(&feats, cfg.feature_rank);
            let hp = &theta[head_off..];
            let mut loss = 0.0;
            let mut grad = vec![0.0; theta_len];
            for k in 0..k_train {
                let cov = cfg.use_covariate.then(|| task.covariates[k]);
                let x = head_input(&feats[k], &stats, cov);
                let raw = head.predict_raw(hp, &x);
                let (lk, mut gout) = head.loss_and_output_grad(&raw, task.targets[k]);
                loss += lk / k_train as f64;
                for g in &mut gout {
                    *g /= k_train as f64;
                }
                let mut gx = vec![0.0; x.len()];
                head.vjp(hp, &x, &gout, &mut grad[head_off..], &mut gx);
                // chain through the frozen rescale: d x_j / d f_j = 1 / std_j
                for j in 0..cfg.feature_rank {
                    gx[j] /= stats.1[j];
                }
                let adj = feature_adjoints(&tts[k], &basis, &gx[..cfg.feature_rank])?;
                let sg = cross_vjp(&frozen[k], &adj)?;
                for (idx, g) in &sg {
                    insts[k].entry_vjp(&theta, idx, *g, &mut grad);
                }
            }
            trace.push(TraceRow { step, epoch, loss, samples_cumulative: meter.samples });
            step += 1;
            if !loss.is_finite() {
                break;
            }
            if cfg.inner_steps > 0 {
                opt.step(&mut theta, &grad);
            }
        }
    }

    let trained = if cfg.epochs == 0 {
        untrained
    } else {
        evaluate(task, cfg, &enc, &head, &theta, head_off, &mut meter)?
    };
    Ok(ExperimentReport {
        trace,
        untrained,
        trained,
        samples: meter.samples,
        max_step_samples: meter.max_step,
        peak_resident: meter.peak_resident,
        epochs_run: cfg.epochs,
    })
}

/// Adjoints of `sum_j gf[j] * <tt, basis_j>` with respect to the TT cores.
fn feature_adjoints(tt: &TTTensor, basis: &FeatureBasis, gf: &[f64]) -> Result<Vec<Core>> {
    let mut adj: Vec<Core> =
        tt.cores().iter().map(|c| Core::zeros(c.r0, c.n, c.r1)).collect();
    for (j, &g) in gf.iter().enumerate() {
        if g == 0.0 || j >= basis.achieved {
            continue;
        }
        let bj = basis.basis_vector(j)?;
        let vjp = tt_inner_vjp(tt, &bj);
        for (a, v) in adj.iter_mut().zip(&vjp) {
            for (slot, &val) in a.data.iter_mut().zip(&v.data) {
                *slot += g * val;
            }
        }
    }
    Ok(adj)
}
