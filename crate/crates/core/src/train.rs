//! End-to-end training of the unrolled solver: CNN denoiser weights plus,
//! optionally, `rho` and `lambda` (kept positive through a log
//! reparameterization).
//!
//! Gradients are exact reverse-mode derivatives of the unrolled computation
//! with one deliberate exception, mirroring the forward definition: the WLLS
//! weights `W` are treated as constants (they are refreshed from the latest
//! iterate but not differentiated through). Per stage, the reverse sweep
//! undoes the multiplier update, walks the auxiliary fixed-point iterations
//! backwards through the denoiser, and pulls the fitting-block adjoint
//! through the same 7x7 Cholesky solve the forward used. Denoiser activation
//! tapes are rebuilt on the fly during the sweep instead of being held for
//! the whole forward pass.

use crate::denoiser::DnCnn;
use crate::dti::{DwiStack, GradientScheme, ParamField, PARAM_CHANNELS};
use crate::estimators::{fit_field, FitMethod, FitOptions, LOG_CLAMP_FLOOR};
use crate::fmath;
use crate::linalg;
use crate::sim::{
    add_rician_noise, make_phantom, mix64, normalize_p99, synthesize_dwi, NoiseKind, NoiseSpec,
    SimError,
};
use crate::unroll::{
    adaptive_lambda, fitting_block, init_state, multiplier_block, to_solver_scale, UnrollConfig,
    UnrollError, UnrollProblem,
};
use crate::volume::{num_voxels, Dims, Field, Mask};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Noise levels cycled through when building a training set.
pub const TRAIN_NOISE_GRID: [f64; 16] = [
    0.005, 0.007666666666666667, 0.010333333333333333, 0.013, 0.015666666666666666,
    0.018333333333333333, 0.021, 0.023666666666666666, 0.02633333333333333, 0.029,
    0.03166666666666667, 0.03433333333333333, 0.037, 0.039666666666666666, 0.042333333333333334,
    0.045,
];

pub const VALIDATION_NOISE_LEVELS: [f64; 4] = [0.01, 0.02, 0.03, 0.04];

#[derive(Clone, Debug, PartialEq)]
pub enum TrainError {
    BadConfig(&'static str),
    EmptyTrainingSet,
    /// A per-voxel solve failed during the forward pass; the reverse sweep
    /// would be inconsistent, so training aborts instead of skipping voxels.
    FitFailure { stage: usize, voxel: usize },
    NonFiniteLoss,
    Unroll(UnrollError),
    Sim(SimError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::BadConfig(msg) => write!(f, "bad training configuration: {msg}"),
            TrainError::EmptyTrainingSet => write!(f, "training set is empty"),
            TrainError::FitFailure { stage, voxel } => {
                write!(f, "voxel {voxel} failed to solve in stage {stage}")
            }
            TrainError::NonFiniteLoss => write!(f, "loss or gradient became non-finite"),
            TrainError::Unroll(e) => write!(f, "{e}"),
            TrainError::Sim(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for TrainError {}

impl From<UnrollError> for TrainError {
    fn from(e: UnrollError) -> Self {
        TrainError::Unroll(e)
    }
}
impl From<SimError> for TrainError {
    fn from(e: SimError) -> Self {
        TrainError::Sim(e)
    }
}

/// Everything the unrolled solver learns.
#[derive(Clone)]
pub struct ModelParams {
    pub net: DnCnn,
    /// `rho = exp(u_rho)`.
    pub u_rho: f64,
    /// `lambda = exp(u_lambda)`.
    pub u_lambda: f64,
}

impl ModelParams {
    pub fn init(width: usize, seed: u64, rho: f64, lambda: f64) -> Self {
        assert!(rho > 0.0 && lambda > 0.0);
        ModelParams {
            net: DnCnn::init(width, seed),
            u_rho: fmath::ln(rho),
            u_lambda: fmath::ln(lambda),
        }
    }

    pub fn rho(&self) -> f64 {
        fmath::exp(self.u_rho)
    }

    pub fn lambda(&self) -> f64 {
        fmath::exp(self.u_lambda)
    }

    /// Network parameters first, then `u_rho`, `u_lambda`.
    pub fn n_params(&self) -> usize {
        self.net.n_params() + 2
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.net.flatten();
        out.push(self.u_rho);
        out.push(self.u_lambda);
        out
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) {
        let nn = self.net.n_params();
        assert_eq!(flat.len(), nn + 2);
        self.net.set_from_flat(&flat[..nn]);
        self.u_rho = flat[nn];
        self.u_lambda = flat[nn + 1];
    }

    /// Inference configuration carrying the learned scalars.
    pub fn unroll_config(&self, ns: usize, nt: usize) -> UnrollConfig {
        UnrollConfig {
            rho: self.rho(),
            lambda: self.lambda(),
            ns,
            nt,
            train_rho_lambda: true,
        }
    }
}

/// One training example: a noisy normalized stack and its noise-free
/// generating parameters (physical units; the mask rides along in `gt`).
#[derive(Clone)]
pub struct TrainSample {
    pub stack: DwiStack,
    pub gt: ParamField,
    pub noise_level: f64,
}

/// Phantom-based training samples, noise levels cycling through
/// [`TRAIN_NOISE_GRID`].
pub fn make_training_set(
    n: usize,
    dims: Dims,
    scheme: &GradientScheme,
    seed: u64,
) -> Result<Vec<TrainSample>, SimError> {
    build_samples(n, dims, scheme, seed, &TRAIN_NOISE_GRID, 0x7A00)
}

/// Held-out samples on the standard validation noise levels.
pub fn make_validation_set(
    n: usize,
    dims: Dims,
    scheme: &GradientScheme,
    seed: u64,
) -> Result<Vec<TrainSample>, SimError> {
    build_samples(n, dims, scheme, seed, &VALIDATION_NOISE_LEVELS, 0x7B00)
}

fn build_samples(
    n: usize,
    dims: Dims,
    scheme: &GradientScheme,
    seed: u64,
    levels: &[f64],
    stream: u64,
) -> Result<Vec<TrainSample>, SimError> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let phantom = make_phantom(dims, mix64(seed, stream + i as u64))?;
        let clean = synthesize_dwi(&phantom.params, scheme);
        let (normalized, _) = normalize_p99(&clean)?;
        let sigma = levels[i % levels.len()];
        let noisy = add_rician_noise(
            &normalized,
            &NoiseSpec {
                kind: NoiseKind::Stationary { sigma },
                seed: mix64(seed, stream + 0x100 + i as u64),
            },
        );
        out.push(TrainSample {
            stack: noisy,
            gt: phantom.params,
            noise_level: sigma,
        });
    }
    Ok(out)
}

/// Axis-aligned crop of a sample (stack, ground truth, and mask together).
pub fn crop_sample(sample: &TrainSample, origin: Dims, size: Dims) -> TrainSample {
    let dims = sample.stack.dims;
    for k in 0..3 {
        assert!(origin[k] + size[k] <= dims[k]);
    }
    let m = sample.stack.n_meas();
    let mut stack = DwiStack::zeros(size, sample.stack.scheme.clone());
    let mut mask_data = vec![false; num_voxels(size)];
    let mut gt = ParamField::zeros(size, Mask::from_vec(size, mask_data.clone()));
    for i0 in 0..size[0] {
        for i1 in 0..size[1] {
            for i2 in 0..size[2] {
                let src = crate::volume::voxel_index(
                    dims,
                    origin[0] + i0,
                    origin[1] + i1,
                    origin[2] + i2,
                );
                let dst = crate::volume::voxel_index(size, i0, i1, i2);
                stack.data[dst * m..(dst + 1) * m]
                    .copy_from_slice(&sample.stack.data[src * m..(src + 1) * m]);
                mask_data[dst] = sample.gt.mask.get(src);
                gt.field
                    .voxel_mut(dst)
                    .copy_from_slice(sample.gt.field.voxel(src));
            }
        }
    }
    gt.mask = Mask::from_vec(size, mask_data);
    TrainSample {
        stack,
        gt,
        noise_level: sample.noise_level,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate is halved every this many epochs; 0 disables the decay.
    pub lr_halve_every: usize,
    /// Cubic crop edge used for training patches (the full volume if the
    /// sample is smaller).
    pub block: usize,
    pub seed: u64,
    pub width: usize,
    pub ns: usize,
    pub nt: usize,
    pub init_rho: f64,
    pub init_lambda: f64,
    pub train_rho_lambda: bool,
    /// Supervised warm-up epochs before the unrolled phase: the denoiser
    /// alone is trained to map each sample's WLLS fit onto the ground truth
    /// (mean squared error over the full block, no cropping). Far cheaper
    /// per step than the unrolled loss, so most of the denoiser's progress
    /// happens here; 0 skips the phase.
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 250,
            batch_size: 4,
            lr: 1e-4,
            lr_halve_every: 100,
            block: 32,
            seed: 0,
            width: crate::denoiser::DEFAULT_WIDTH,
            ns: 8,
            nt: 1,
            init_rho: 1e-3,
            init_lambda: 0.1,
            train_rho_lambda: true,
            pretrain_epochs: 0,
            pretrain_lr: 3e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::BadConfig("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(TrainError::BadConfig("batch size must be at least 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(TrainError::BadConfig("learning rate must be positive"));
        }
        if self.block < 3 {
            return Err(TrainError::BadConfig("block must be at least 3"));
        }
        if self.width == 0 {
            return Err(TrainError::BadConfig("width must be at least 1"));
        }
        if self.ns == 0 || self.nt == 0 {
            return Err(TrainError::BadConfig("ns and nt must be at least 1"));
        }
        if !(self.init_rho > 0.0) || !(self.init_lambda > 0.0) {
            return Err(TrainError::BadConfig(
                "initial rho and lambda must be positive",
            ));
        }
        if self.pretrain_epochs > 0 && (!(self.pretrain_lr > 0.0) || !self.pretrain_lr.is_finite())
        {
            return Err(TrainError::BadConfig(
                "pretrain learning rate must be positive",
            ));
        }
        Ok(())
    }
}

// ---- recorded forward pass ----

struct StageRecord {
    x: Field,
    /// Denoiser inputs, one per inner iteration.
    z_inners: Vec<Field>,
    /// Denoiser outputs, one per inner iteration.
    d_outs: Vec<Field>,
    z: Field,
}

struct ForwardRecord {
    x0: Field,
    stages: Vec<StageRecord>,
    beta_final: Field,
}

/// Unrolled forward identical to the inference path (same update
/// expressions, so results agree bit for bit), keeping what the reverse
/// sweep needs. Any voxel-solve failure aborts.
fn forward_record(
    p: &UnrollProblem,
    model: &ModelParams,
    ns: usize,
    nt: usize,
) -> Result<ForwardRecord, TrainError> {
    let rho = model.rho();
    let lambda = model.lambda();
    let (mut state, init_failures) = init_state(p);
    if let Some((v, _)) = init_failures.first() {
        return Err(TrainError::FitFailure { stage: 0, voxel: *v });
    }
    let x0 = state.x.clone();
    let n = num_voxels(p.dims);
    let denom = 1.0 / (rho + lambda);
    let mut stages = Vec::with_capacity(ns);
    for stage in 1..=ns {
        let failures = fitting_block(p, &mut state, rho);
        if let Some((v, _)) = failures.first() {
            return Err(TrainError::FitFailure { stage, voxel: *v });
        }
        let mut z_inners = Vec::with_capacity(nt);
        let mut d_outs = Vec::with_capacity(nt);
        for _t in 0..nt {
            z_inners.push(state.z.clone());
            let mut d = model.net.forward(&state.z);
            d.apply_mask(&p.mask);
            for v in 0..n {
                if !p.mask.get(v) {
                    continue;
                }
                let xv = state.x.voxel(v);
                let bv = state.beta.voxel(v);
                let dv = d.voxel(v);
                let upd: [f64; PARAM_CHANNELS] =
                    core::array::from_fn(|j| (rho * (xv[j] + bv[j]) + lambda * dv[j]) * denom);
                state.z.voxel_mut(v).copy_from_slice(&upd);
            }
            d_outs.push(d);
        }
        multiplier_block(&mut state);
        stages.push(StageRecord {
            x: state.x.clone(),
            z_inners,
            d_outs,
            z: state.z.clone(),
        });
    }
    Ok(ForwardRecord {
        x0,
        stages,
        beta_final: state.beta,
    })
}

/// Mean absolute error over masked voxels, all channels.
fn mae_masked(f: &Field, gt: &Field, mask: &Mask, norm: f64) -> f64 {
    let mut sum = 0.0;
    for (v, &inside) in mask.data.iter().enumerate() {
        if !inside {
            continue;
        }
        let a = f.voxel(v);
        let b = gt.voxel(v);
        for j in 0..PARAM_CHANNELS {
            sum += (a[j] - b[j]).abs();
        }
    }
    sum * norm
}

/// `acc += scale * sign(f - gt)` on masked voxels; `sign(0) = 0`.
fn add_sign_scaled(acc: &mut Field, f: &Field, gt: &Field, mask: &Mask, scale: f64) {
    for (v, &inside) in mask.data.iter().enumerate() {
        if !inside {
            continue;
        }
        let a = f.voxel(v);
        let b = gt.voxel(v);
        let out = acc.voxel_mut(v);
        for j in 0..PARAM_CHANNELS {
            let d = a[j] - b[j];
            if d > 0.0 {
                out[j] += scale;
            } else if d < 0.0 {
                out[j] -= scale;
            }
        }
    }
}

/// Stage-weighted compound loss: stages count `n / ns`, and each stage sums
/// the mean absolute error of the fitted parameters, the first denoiser
/// output, and the auxiliary field against the scaled ground truth.
fn record_loss(rec: &ForwardRecord, gt_scaled: &Field, mask: &Mask) -> f64 {
    let ns = rec.stages.len();
    let norm = 1.0 / (mask.count() as f64 * PARAM_CHANNELS as f64);
    let mut loss = 0.0;
    for (i, st) in rec.stages.iter().enumerate() {
        let wn = (i + 1) as f64 / ns as f64;
        loss += wn
            * (mae_masked(&st.x, gt_scaled, mask, norm)
                + mae_masked(&st.d_outs[0], gt_scaled, mask, norm)
                + mae_masked(&st.z, gt_scaled, mask, norm));
    }
    loss
}

/// Loss of one sample under the current model (no gradients).
pub fn sample_loss(
    model: &ModelParams,
    sample: &TrainSample,
    ns: usize,
    nt: usize,
) -> Result<f64, TrainError> {
    let p = UnrollProblem::new(&sample.stack, Some(sample.gt.mask.clone()), LOG_CLAMP_FLOOR)?;
    let rec = forward_record(&p, model, ns, nt)?;
    let gt_scaled = to_solver_scale(&sample.gt);
    let loss = record_loss(&rec, &gt_scaled, &p.mask);
    if !loss.is_finite() {
        return Err(TrainError::NonFiniteLoss);
    }
    Ok(loss)
}

/// Loss and the full parameter gradient (network first, then `u_rho`,
/// `u_lambda`) for one sample.
pub fn sample_loss_and_grad(
    model: &ModelParams,
    sample: &TrainSample,
    ns: usize,
    nt: usize,
) -> Result<(f64, Vec<f64>), TrainError> {
    let p = UnrollProblem::new(&sample.stack, Some(sample.gt.mask.clone()), LOG_CLAMP_FLOOR)?;
    let rec = forward_record(&p, model, ns, nt)?;
    let gt_scaled = to_solver_scale(&sample.gt);
    let loss = record_loss(&rec, &gt_scaled, &p.mask);
    if !loss.is_finite() {
        return Err(TrainError::NonFiniteLoss);
    }

    let rho = model.rho();
    let lambda = model.lambda();
    let denom = rho + lambda;
    let mask = &p.mask;
    let n = num_voxels(p.dims);
    let nn = model.net.n_params();
    let mut grad = vec![0.0; nn + 2];
    let mut rho_bar = 0.0;
    let mut lambda_bar = 0.0;
    let norm = 1.0 / (mask.count() as f64 * PARAM_CHANNELS as f64);

    // Adjoints carried across stages (of z^{n} and beta^{n}).
    let mut zbar = Field::zeros(p.dims, PARAM_CHANNELS);
    let mut bbar = Field::zeros(p.dims, PARAM_CHANNELS);
    // beta^{n} is reconstructed backwards from the final value.
    let mut beta = rec.beta_final.clone();

    for si in (0..rec.stages.len()).rev() {
        let st = &rec.stages[si];
        let wn = (si + 1) as f64 / rec.stages.len() as f64;
        let x_prev = if si == 0 { &rec.x0 } else { &rec.stages[si - 1].x };

        // beta^{n-1} = beta^n - x^n + z^n; the X and Z blocks of this stage
        // saw the pre-update multiplier.
        for v in 0..n {
            if !mask.get(v) {
                continue;
            }
            let xv = st.x.voxel(v);
            let zv = st.z.voxel(v);
            let bv = beta.voxel_mut(v);
            for j in 0..PARAM_CHANNELS {
                bv[j] -= xv[j] - zv[j];
            }
        }

        // Loss terms at this stage.
        let mut xbar = Field::zeros(p.dims, PARAM_CHANNELS);
        add_sign_scaled(&mut xbar, &st.x, &gt_scaled, mask, wn * norm);
        add_sign_scaled(&mut zbar, &st.z, &gt_scaled, mask, wn * norm);

        // Reverse multiplier update: beta^n = beta^{n-1} + x^n - z^n.
        for v in 0..n {
            if !mask.get(v) {
                continue;
            }
            let bb = bbar.voxel(v);
            let bb: [f64; PARAM_CHANNELS] = core::array::from_fn(|j| bb[j]);
            let xb = xbar.voxel_mut(v);
            for j in 0..PARAM_CHANNELS {
                xb[j] += bb[j];
            }
            let zb = zbar.voxel_mut(v);
            for j in 0..PARAM_CHANNELS {
                zb[j] -= bb[j];
            }
        }

        // Reverse the auxiliary fixed-point iterations. `zbar` enters as the
        // adjoint of z_{t+1} and leaves as the adjoint of z_t.
        for t in (0..nt).rev() {
            let z_t = &st.z_inners[t];
            let d_t = &st.d_outs[t];
            let mut dbar = Field::zeros(p.dims, PARAM_CHANNELS);
            for v in 0..n {
                if !mask.get(v) {
                    continue;
                }
                let zb = zbar.voxel(v);
                let xv = st.x.voxel(v);
                let bv = beta.voxel(v);
                let dv = d_t.voxel(v);
                let xb = xbar.voxel_mut(v);
                for j in 0..PARAM_CHANNELS {
                    let u = xv[j] + bv[j];
                    let g = zb[j];
                    xb[j] += g * rho / denom;
                    rho_bar += g * lambda * (u - dv[j]) / (denom * denom);
                    lambda_bar += g * rho * (dv[j] - u) / (denom * denom);
                    dbar.voxel_mut(v)[j] = g * lambda / denom;
                }
                let bb = bbar.voxel_mut(v);
                let zb: [f64; PARAM_CHANNELS] = core::array::from_fn(|j| zbar.voxel(v)[j]);
                for j in 0..PARAM_CHANNELS {
                    bb[j] += zb[j] * rho / denom;
                }
            }
            if t == 0 {
                add_sign_scaled(&mut dbar, d_t, &gt_scaled, mask, wn * norm);
            }
            // Through the denoiser: rebuild the tape at the recorded input.
            let (_, tape) = model.net.forward_tape(z_t);
            let (net_grads, mut g_in) = model.net.backward(&tape, &dbar);
            net_grads.accumulate_flat(&mut grad[..nn], 1.0);
            g_in.apply_mask(mask);
            zbar = g_in;
        }

        // Reverse the fitting block: x^n = (H + rho I)^{-1} (A^T W^2 y +
        // rho (z^{n-1} - beta^{n-1})), with W from x^{n-1} held constant.
        let m = p.m;
        let mut w = vec![0.0; m];
        for v in 0..n {
            if !mask.get(v) {
                continue;
            }
            crate::unroll::voxel_weights(&p.rows, x_prev.voxel(v), &mut w);
            let y = &p.y[v * m..(v + 1) * m];
            let (mut h, _) = crate::unroll::voxel_normal(&p.rows, y, &w);
            for j in 0..PARAM_CHANNELS {
                h[j][j] += rho;
            }
            let xb = xbar.voxel(v);
            let xb7: [f64; PARAM_CHANNELS] = core::array::from_fn(|j| xb[j]);
            let s = linalg::cholesky_solve7(&h, &xb7)
                .map_err(|_| TrainError::FitFailure { stage: si + 1, voxel: v })?;
            let zv_prev: [f64; PARAM_CHANNELS] = if si == 0 {
                // z^0 = x^0 from the initialization.
                core::array::from_fn(|j| rec.x0.voxel(v)[j])
            } else {
                core::array::from_fn(|j| rec.stages[si - 1].z.voxel(v)[j])
            };
            let bv = beta.voxel(v);
            let xv = st.x.voxel(v);
            let zb = zbar.voxel_mut(v);
            for j in 0..PARAM_CHANNELS {
                zb[j] += rho * s[j];
                rho_bar += s[j] * (zv_prev[j] - bv[j] - xv[j]);
            }
            let bb = bbar.voxel_mut(v);
            for j in 0..PARAM_CHANNELS {
                bb[j] -= rho * s[j];
            }
        }
        // Adjoints leaving this stage now refer to z^{n-1} and beta^{n-1};
        // at si == 0 they land on data-derived initial values and are dropped.
    }

    grad[nn] = rho_bar * rho;
    grad[nn + 1] = lambda_bar * lambda;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteLoss);
    }
    Ok((loss, grad))
}

// ---- optimizer and loop ----

/// Adam with bias correction.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    b1t: f64,
    b2t: f64,
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            b1t: 1.0,
            b2t: 1.0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.b1t *= ADAM_B1;
        self.b2t *= ADAM_B2;
        let c1 = 1.0 / (1.0 - self.b1t);
        let c2 = 1.0 / (1.0 - self.b2t);
        for i in 0..params.len() {
            self.m[i] = ADAM_B1 * self.m[i] + (1.0 - ADAM_B1) * grad[i];
            self.v[i] = ADAM_B2 * self.v[i] + (1.0 - ADAM_B2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] * c1) / (fmath::sqrt(self.v[i] * c2) + ADAM_EPS);
        }
    }
}

#[derive(Clone, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    /// NaN when no validation set was provided.
    pub val_loss: f64,
    pub rho: f64,
    pub lambda: f64,
    pub lr: f64,
}

pub struct TrainOutcome {
    pub model: ModelParams,
    pub history: Vec<EpochStats>,
}

/// WLLS fit and ground truth of each sample as solver-scale fields, the
/// supervised pair the warm-up phase trains on.
fn supervised_pairs(samples: &[TrainSample]) -> Result<Vec<(Field, Field, Mask)>, TrainError> {
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let opts = FitOptions {
            mask: Some(s.gt.mask.clone()),
            ..FitOptions::default()
        };
        let (wlls, report) = fit_field(&s.stack, FitMethod::Wlls { iters: 2 }, &opts)
            .map_err(|e| TrainError::Unroll(UnrollError::from(e)))?;
        if let Some((v, _)) = report.failures.first() {
            return Err(TrainError::FitFailure { stage: 0, voxel: *v });
        }
        out.push((
            to_solver_scale(&wlls),
            to_solver_scale(&s.gt),
            s.gt.mask.clone(),
        ));
    }
    Ok(out)
}

/// Masked mean squared error of `net(input)` against `target`.
fn supervised_loss(net: &DnCnn, input: &Field, target: &Field, mask: &Mask) -> f64 {
    let out = net.forward(input);
    let nrm = 1.0 / (mask.count() as f64 * PARAM_CHANNELS as f64);
    let mut loss = 0.0;
    for v in 0..num_voxels(input.dims) {
        if !mask.get(v) {
            continue;
        }
        for c in 0..PARAM_CHANNELS {
            let d = out.voxel(v)[c] - target.voxel(v)[c];
            loss += d * d * nrm;
        }
    }
    loss
}

fn supervised_loss_and_grad(
    net: &DnCnn,
    input: &Field,
    target: &Field,
    mask: &Mask,
) -> (f64, Vec<f64>) {
    let (out, tape) = net.forward_tape(input);
    let nrm = 1.0 / (mask.count() as f64 * PARAM_CHANNELS as f64);
    let mut loss = 0.0;
    let mut g_out = Field::zeros(input.dims, PARAM_CHANNELS);
    for v in 0..num_voxels(input.dims) {
        if !mask.get(v) {
            continue;
        }
        for c in 0..PARAM_CHANNELS {
            let d = out.voxel(v)[c] - target.voxel(v)[c];
            loss += d * d * nrm;
            g_out.voxel_mut(v)[c] = 2.0 * d * nrm;
        }
    }
    let (grads, _) = net.backward(&tape, &g_out);
    let mut flat = Vec::with_capacity(net.n_params());
    for g in grads.hidden.iter().chain(grads.heads.iter()) {
        flat.extend_from_slice(&g.w);
        flat.extend_from_slice(&g.b);
    }
    (loss, flat)
}

/// Model with the prior strength rescaled for one sample's noise level; the
/// gradient with respect to the shared log-lambda is unchanged by the
/// rescaling (the chain rule factor is multiplicative in lambda), so the
/// returned gradients apply to the base parameters as-is.
fn for_sample(model: &ModelParams, noise_level: f64) -> ModelParams {
    let mut m = model.clone();
    m.u_lambda = fmath::ln(adaptive_lambda(model.lambda(), noise_level));
    m
}

/// Random crop origin for one (epoch, sample) pair; retries a few times to
/// land a patch that contains masked voxels.
fn crop_for(sample: &TrainSample, block: usize, rng: &mut ChaCha8Rng) -> Option<TrainSample> {
    let dims = sample.stack.dims;
    if dims.iter().all(|&d| d <= block) {
        return Some(sample.clone());
    }
    let size: Dims = core::array::from_fn(|k| dims[k].min(block));
    for _ in 0..16 {
        let origin: Dims = core::array::from_fn(|k| {
            if dims[k] == size[k] {
                0
            } else {
                rng.gen_range(0..=dims[k] - size[k])
            }
        });
        let cropped = crop_sample(sample, origin, size);
        if cropped.gt.mask.count() > 0 {
            return Some(cropped);
        }
    }
    None
}

/// Train the unrolled model with Adam on batch-mean gradients.
///
/// Samples are visited in a seeded shuffled order each epoch and cropped to
/// `block`-sized patches. The observer runs after every epoch with the stats
/// and the current model (logging, periodic snapshots); training is
/// deterministic for a fixed configuration.
pub fn train<F: FnMut(&EpochStats, &ModelParams)>(
    train_set: &[TrainSample],
    val_set: &[TrainSample],
    cfg: &TrainConfig,
    mut observer: F,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let mut model = ModelParams::init(
        cfg.width,
        mix64(cfg.seed, 0xC0),
        cfg.init_rho,
        cfg.init_lambda,
    );
    let mut history = Vec::with_capacity(cfg.pretrain_epochs + cfg.epochs);

    if cfg.pretrain_epochs > 0 {
        let pairs = supervised_pairs(train_set)?;
        let val_pairs = supervised_pairs(val_set)?;
        let mut net_params = model.net.flatten();
        let mut adam = Adam::new(net_params.len());
        for pe in 0..cfg.pretrain_epochs {
            let mut order: Vec<usize> = (0..pairs.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(mix64(cfg.seed, 0xF100 + pe as u64));
            for i in (1..order.len()).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            let mut epoch_loss = 0.0;
            for &i in &order {
                let (inp, tgt, msk) = &pairs[i];
                let (loss, g) = supervised_loss_and_grad(&model.net, inp, tgt, msk);
                if !loss.is_finite() || g.iter().any(|x| !x.is_finite()) {
                    return Err(TrainError::NonFiniteLoss);
                }
                adam.step(&mut net_params, &g, cfg.pretrain_lr);
                model.net.set_from_flat(&net_params);
                epoch_loss += loss;
            }
            let val_loss = if val_pairs.is_empty() {
                f64::NAN
            } else {
                let mut s = 0.0;
                for (inp, tgt, msk) in &val_pairs {
                    s += supervised_loss(&model.net, inp, tgt, msk);
                }
                s / val_pairs.len() as f64
            };
            let stats = EpochStats {
                epoch: pe,
                train_loss: epoch_loss / pairs.len() as f64,
                val_loss,
                rho: model.rho(),
                lambda: model.lambda(),
                lr: cfg.pretrain_lr,
            };
            observer(&stats, &model);
            history.push(stats);
        }
    }

    let nn = model.net.n_params();
    let mut params = model.flatten();
    let mut adam = Adam::new(params.len());

    for epoch in 0..cfg.epochs {
        let lr = if cfg.lr_halve_every == 0 {
            cfg.lr
        } else {
            let halvings = (epoch / cfg.lr_halve_every) as i32;
            cfg.lr * fmath::powf(0.5, halvings as f64)
        };
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(cfg.seed, 0xE000 + epoch as u64));
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0;
        let mut n_seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = vec![0.0; params.len()];
            let mut batch_loss = 0.0;
            let mut n_used = 0usize;
            for &i in batch {
                let Some(cropped) = crop_for(&train_set[i], cfg.block, &mut rng) else {
                    continue;
                };
                let m = for_sample(&model, cropped.noise_level);
                let (loss, g) = sample_loss_and_grad(&m, &cropped, cfg.ns, cfg.nt)?;
                for (a, &b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
                batch_loss += loss;
                n_used += 1;
            }
            if n_used == 0 {
                continue;
            }
            let inv = 1.0 / n_used as f64;
            for g in &mut grad {
                *g *= inv;
            }
            if !cfg.train_rho_lambda {
                grad[nn] = 0.0;
                grad[nn + 1] = 0.0;
            }
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFiniteLoss);
            }
            adam.step(&mut params, &grad, lr);
            model.set_from_flat(&params);
            epoch_loss += batch_loss;
            n_seen += n_used;
        }
        if n_seen == 0 {
            return Err(TrainError::EmptyTrainingSet);
        }

        let val_loss = if val_set.is_empty() {
            f64::NAN
        } else {
            let mut s = 0.0;
            for sample in val_set {
                let m = for_sample(&model, sample.noise_level);
                s += sample_loss(&m, sample, cfg.ns, cfg.nt)?;
            }
            s / val_set.len() as f64
        };
        let stats = EpochStats {
            epoch: cfg.pretrain_epochs + epoch,
            train_loss: epoch_loss / n_seen as f64,
            val_loss,
            rho: model.rho(),
            lambda: model.lambda(),
            lr,
        };
        observer(&stats, &model);
        history.push(stats);
    }
    Ok(TrainOutcome { model, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::CnnDenoiser;
    use crate::dti::{build_design_matrix, predict_signals, GradientEntry};
    use crate::sim::{make_scheme, SchemeKind};
    use crate::unroll::{run_unroll, UnrollOptions};
    use rand_distr::StandardNormal;

    fn small_scheme() -> GradientScheme {
        let s = core::f64::consts::FRAC_1_SQRT_2;
        let dirs = [
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [s, s, 0.0],
            [0.0, s, s],
            [s, 0.0, s],
        ];
        let mut entries = alloc::vec![GradientEntry {
            b: 0.0,
            g: [0.0, 0.0, 0.0],
        }];
        for d in dirs {
            entries.push(GradientEntry { b: 1000.0, g: d });
        }
        GradientScheme::new(entries).unwrap()
    }

    /// Tiny hand-rolled sample for gradient math tests (phantoms have a
    /// minimum size, which would make finite differences slow).
    fn tiny_sample(dims: Dims, sigma: f64, seed: u64) -> TrainSample {
        let scheme = small_scheme();
        let a = build_design_matrix(&scheme);
        let mask = Mask::full(dims);
        let mut gt = ParamField::zeros(dims, mask);
        let mut stack = DwiStack::zeros(dims, scheme);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in 0..num_voxels(dims) {
            let l1 = rng.gen_range(0.9e-3..1.8e-3);
            let l2 = rng.gen_range(0.3e-3..0.9e-3f64);
            let x = [
                rng.gen_range(-0.05..0.05),
                l1,
                l2,
                l2,
                rng.gen_range(-1e-4..1e-4),
                0.0,
                0.0,
            ];
            gt.set_voxel(v, &x);
            let clean = predict_signals(&x, &a);
            for (s, c) in stack.voxel_signals_mut(v).iter_mut().zip(clean) {
                let n1: f64 = rng.sample(StandardNormal);
                let n2: f64 = rng.sample(StandardNormal);
                let re = c + sigma * n1;
                let im = sigma * n2;
                *s = (re * re + im * im).sqrt();
            }
        }
        TrainSample {
            stack,
            gt,
            noise_level: sigma,
        }
    }

    #[test]
    fn recorded_forward_matches_inference_bitwise() {
        let sample = tiny_sample([5, 4, 4], 0.03, 21);
        let model = ModelParams::init(4, 99, 0.05, 0.4);
        let ns = 3;
        let nt = 2;
        let p =
            UnrollProblem::new(&sample.stack, Some(sample.gt.mask.clone()), LOG_CLAMP_FLOOR)
                .unwrap();
        let rec = forward_record(&p, &model, ns, nt).unwrap();

        let den = CnnDenoiser {
            net: model.net.clone(),
        };
        let run = run_unroll(
            &sample.stack,
            &model.unroll_config(ns, nt),
            &den,
            &UnrollOptions {
                mask: Some(sample.gt.mask.clone()),
                want_trace: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(run.trace.len(), ns);
        for (st, tr) in rec.stages.iter().zip(&run.trace) {
            assert_eq!(st.x.data, tr.x.data);
            assert_eq!(st.z.data, tr.z.data);
            assert_eq!(st.d_outs[0].data, tr.denoised.data);
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let sample = tiny_sample([4, 4, 3], 0.03, 7);
        let model = {
            // Break the heads' zero init so their output path carries signal.
            let mut m = ModelParams::init(4, 5, 0.05, 0.4);
            let mut rng = ChaCha8Rng::seed_from_u64(13);
            let mut flat = m.flatten();
            let nn = m.net.n_params();
            for x in flat[..nn].iter_mut() {
                if *x == 0.0 {
                    *x = 0.02 * rng.sample::<f64, _>(StandardNormal);
                }
            }
            m.set_from_flat(&flat);
            m
        };
        let ns = 2;
        let nt = 2;
        let (loss0, grad) = sample_loss_and_grad(&model, &sample, ns, nt).unwrap();
        assert!(loss0.is_finite() && loss0 > 0.0);

        let flat = model.flatten();
        let nn = model.net.n_params();
        // Sample parameters across every layer, plus u_rho and u_lambda.
        let mut idxs = alloc::vec![nn, nn + 1];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..24 {
            idxs.push(rng.gen_range(0..nn));
        }
        let h = 1e-5;
        let mut worst = 0.0f64;
        for &i in &idxs {
            let mut up = flat.clone();
            up[i] += h;
            let mut down = flat.clone();
            down[i] -= h;
            let mut mu = model.clone();
            mu.set_from_flat(&up);
            let mut md = model.clone();
            md.set_from_flat(&down);
            let lu = sample_loss(&mu, &sample, ns, nt).unwrap();
            let ld = sample_loss(&md, &sample, ns, nt).unwrap();
            let fd = (lu - ld) / (2.0 * h);
            let diff = (grad[i] - fd).abs();
            let tol = 1e-6 + 2e-2 * grad[i].abs().max(fd.abs());
            assert!(
                diff < tol,
                "param {i}: analytic {} vs fd {} (diff {diff})",
                grad[i],
                fd
            );
            let rel = diff / (1e-9 + grad[i].abs().max(fd.abs()));
            if grad[i].abs().max(fd.abs()) > 1e-6 {
                worst = worst.max(rel);
            }
        }
        // The bulk of the sampled coordinates should agree tightly, not just
        // inside the per-coordinate tolerance.
        assert!(worst < 0.05, "worst relative mismatch {worst}");
    }

    #[test]
    fn gradient_zero_iff_perfect_prediction_is_not_assumed() {
        // Sanity: gradient is nonzero for a noisy sample.
        let sample = tiny_sample([4, 3, 3], 0.04, 2);
        let model = ModelParams::init(4, 1, 0.05, 0.4);
        let (_, grad) = sample_loss_and_grad(&model, &sample, 2, 1).unwrap();
        assert!(grad.iter().any(|&g| g != 0.0));
        // Heads are zero at init, so hidden-layer kernels receive no
        // gradient through the (zero) head weights in layer-6 -> head path;
        // but head weights themselves must get gradient.
        let nn = sample_head_span(&model);
        assert!(grad[nn.0..nn.1].iter().any(|&g| g != 0.0));
    }

    fn sample_head_span(model: &ModelParams) -> (usize, usize) {
        let hidden: usize = model.net.hidden.iter().map(|c| c.n_params()).sum();
        (hidden, model.net.n_params())
    }

    #[test]
    fn training_set_is_deterministic_and_cycles_noise() {
        let scheme = make_scheme(&SchemeKind::Dsm6, 6, 1, 1000.0, 0.0).unwrap();
        let a = make_training_set(5, [16, 16, 16], &scheme, 42).unwrap();
        let b = make_training_set(5, [16, 16, 16], &scheme, 42).unwrap();
        assert_eq!(a.len(), 5);
        for (s, t) in a.iter().zip(&b) {
            assert_eq!(s.stack.data, t.stack.data);
            assert_eq!(s.noise_level, t.noise_level);
        }
        for (i, s) in a.iter().enumerate() {
            assert_eq!(s.noise_level, TRAIN_NOISE_GRID[i % 16]);
        }
        // Different phantoms across samples.
        assert_ne!(a[0].gt.field.data, a[1].gt.field.data);
        let v = make_validation_set(4, [16, 16, 16], &scheme, 42).unwrap();
        assert_eq!(v[2].noise_level, VALIDATION_NOISE_LEVELS[2]);
    }

    #[test]
    fn cropping_preserves_content() {
        let scheme = make_scheme(&SchemeKind::Dsm6, 6, 1, 1000.0, 0.0).unwrap();
        let samples = make_training_set(1, [18, 16, 16], &scheme, 9).unwrap();
        let s = &samples[0];
        let c = crop_sample(s, [2, 3, 4], [8, 8, 8]);
        assert_eq!(c.stack.dims, [8, 8, 8]);
        let src = crate::volume::voxel_index([18, 16, 16], 6, 7, 8);
        let dst = crate::volume::voxel_index([8, 8, 8], 4, 4, 4);
        assert_eq!(s.stack.voxel_signals(src), c.stack.voxel_signals(dst));
        assert_eq!(s.gt.field.voxel(src), c.gt.field.voxel(dst));
        assert_eq!(s.gt.mask.get(src), c.gt.mask.get(dst));
    }

    #[test]
    fn short_training_run_reduces_loss() {
        // Deterministic setup: one fixed patch, full-batch steps, so the
        // loss trajectory is comparable epoch to epoch. The heads start at
        // zero (identity denoiser), so early steps only move the heads;
        // give the run enough epochs to settle below the starting loss.
        let scheme = make_scheme(&SchemeKind::Dsm6, 6, 1, 1000.0, 0.0).unwrap();
        let full = make_training_set(1, [16, 16, 16], &scheme, 31).unwrap();
        let patch = crop_sample(&full[0], [2, 2, 2], [12, 12, 12]);
        assert!(patch.gt.mask.count() > 200);
        let cfg = TrainConfig {
            epochs: 25,
            batch_size: 1,
            lr: 2e-3,
            lr_halve_every: 0,
            block: 12,
            seed: 1,
            width: 4,
            ns: 3,
            nt: 1,
            init_rho: 0.05,
            init_lambda: 0.4,
            train_rho_lambda: true,
            pretrain_epochs: 0,
            pretrain_lr: 3e-4,
        };
        let out = train(&[patch], &[], &cfg, |s, _| {
            std::eprintln!(
                "epoch {} loss {:.6} rho {:.5} lambda {:.5}",
                s.epoch,
                s.train_loss,
                s.rho,
                s.lambda
            );
        })
        .unwrap();
        let first = out.history.first().unwrap().train_loss;
        let tail: f64 = out.history[out.history.len() - 3..]
            .iter()
            .map(|h| h.train_loss)
            .sum::<f64>()
            / 3.0;
        assert!(
            tail < first,
            "loss did not drop: first {first}, last-3 mean {tail}"
        );
        // The learned scalars moved.
        assert!((out.model.rho() - 0.05).abs() > 1e-6);
        assert!(out.model.rho() > 0.0 && out.model.lambda() > 0.0);
        assert!(out.history.iter().all(|h| h.val_loss.is_nan()));
    }

    #[test]
    fn frozen_rho_lambda_stay_put() {
        let scheme = make_scheme(&SchemeKind::Dsm6, 6, 1, 1000.0, 0.0).unwrap();
        let train_set = make_training_set(1, [16, 16, 16], &scheme, 8).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 1,
            lr: 1e-3,
            lr_halve_every: 0,
            block: 8,
            seed: 2,
            width: 4,
            ns: 2,
            nt: 1,
            init_rho: 0.07,
            init_lambda: 0.3,
            train_rho_lambda: false,
            pretrain_epochs: 0,
            pretrain_lr: 3e-4,
        };
        let out = train(&train_set, &[], &cfg, |_, _| {}).unwrap();
        assert!((out.model.rho() - 0.07).abs() < 1e-15);
        assert!((out.model.lambda() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn lr_schedule_halves() {
        let scheme = make_scheme(&SchemeKind::Dsm6, 6, 1, 1000.0, 0.0).unwrap();
        let train_set = make_training_set(1, [16, 16, 16], &scheme, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 4,
            batch_size: 1,
            lr: 1e-3,
            lr_halve_every: 2,
            block: 8,
            seed: 0,
            width: 2,
            ns: 1,
            nt: 1,
            init_rho: 0.05,
            init_lambda: 0.4,
            train_rho_lambda: true,
            pretrain_epochs: 0,
            pretrain_lr: 3e-4,
        };
        let out = train(&train_set, &[], &cfg, |_, _| {}).unwrap();
        assert_eq!(out.history[0].lr, 1e-3);
        assert_eq!(out.history[1].lr, 1e-3);
        assert_eq!(out.history[2].lr, 5e-4);
        assert_eq!(out.history[3].lr, 5e-4);
    }

    #[test]
    fn validation_loss_is_reported() {
        let scheme = make_scheme(&SchemeKind::Dsm6, 6, 1, 1000.0, 0.0).unwrap();
        let train_set = make_training_set(1, [16, 16, 16], &scheme, 4).unwrap();
        let val_set = make_validation_set(1, [16, 16, 16], &scheme, 5).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 1,
            lr: 1e-4,
            lr_halve_every: 0,
            block: 8,
            seed: 0,
            width: 2,
            ns: 1,
            nt: 1,
            init_rho: 0.05,
            init_lambda: 0.4,
            train_rho_lambda: true,
            pretrain_epochs: 0,
            pretrain_lr: 3e-4,
        };
        let out = train(&train_set, &val_set, &cfg, |_, _| {}).unwrap();
        assert!(out.history[0].val_loss.is_finite());
    }
}
