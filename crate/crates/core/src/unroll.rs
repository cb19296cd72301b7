//! Unrolled ADMM tensor estimation.
//!
//! Each stage alternates three blocks over the splitting `X = Z`:
//!
//! * fitting block — per-voxel weighted least squares with a proximal tie to
//!   the auxiliary field: `X = (A^T W^2 A + rho I)^-1 (A^T W^2 y + rho (Z - B))`,
//!   after which the weights are refreshed from the new prediction;
//! * auxiliary block — fixed-point steps `Z <- (rho (X + B) + lambda D(Z)) / (rho + lambda)`
//!   where `D` is a plug-in denoiser (regularization-by-denoising flavor);
//! * multiplier block — `B <- B + X - Z`.
//!
//! Internally the tensor channels are rescaled by [`TENSOR_SCALE`] so that
//! all seven parameters are O(1): with b ~ 1000 s/mm^2 and diffusivities
//! ~ 1e-3 mm^2/s the raw normal matrix would dwarf any workable `rho`, and a
//! denoiser would see channels six orders of magnitude apart. The public
//! interface stays in mm^2/s; conversion happens on entry and exit.

use crate::denoiser::Denoiser;
use crate::dti::{design_row, DtiError, DwiStack, ParamField, PARAM_CHANNELS};
use crate::estimators::{log_signals, FitError, FitReport, LOG_CLAMP_FLOOR};
use crate::fmath;
use crate::linalg;
use crate::volume::{num_voxels, Dims, Field, Mask};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

/// Internal scaling of the six tensor channels (mm^2/s -> um^2/ms).
pub const TENSOR_SCALE: f64 = 1.0e3;

/// Reference noise level that a trained prior strength is expressed at.
pub const NOISE_REF: f64 = 0.03;

/// Prior strength rescaled for the noise actually present. The weighted
/// log-residuals of the fitting block have variance ~ sigma^2 while the
/// prior term does not scale with the data, so a balanced lambda follows
/// sigma^2 relative to [`NOISE_REF`]. The factor is clamped to [0.01, 16].
pub fn adaptive_lambda(base: f64, sigma: f64) -> f64 {
    let s = (sigma / NOISE_REF) * (sigma / NOISE_REF);
    base * s.clamp(0.01, 16.0)
}

/// Weight exponents are clamped to this magnitude so a wild intermediate
/// iterate cannot poison the normal matrix with infinities.
const MAX_WEIGHT_EXPONENT: f64 = 50.0;

#[derive(Clone, Debug, PartialEq)]
pub enum UnrollError {
    BadConfig(&'static str),
    Dti(DtiError),
}

impl fmt::Display for UnrollError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UnrollError::BadConfig(msg) => write!(f, "bad solver configuration: {msg}"),
            UnrollError::Dti(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for UnrollError {}

impl From<DtiError> for UnrollError {
    fn from(e: DtiError) -> Self {
        UnrollError::Dti(e)
    }
}

/// Stage-shared solver hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct UnrollConfig {
    /// Quadratic coupling between the data-fidelity and auxiliary variables.
    pub rho: f64,
    /// Strength of the denoiser prior in the auxiliary update.
    pub lambda: f64,
    /// Number of unrolled stages.
    pub ns: usize,
    /// Fixed-point iterations of the auxiliary update per stage.
    pub nt: usize,
    /// Whether training should treat `rho` and `lambda` as learnable.
    pub train_rho_lambda: bool,
}

impl Default for UnrollConfig {
    fn default() -> Self {
        UnrollConfig {
            rho: 1e-3,
            lambda: 0.1,
            ns: 8,
            nt: 1,
            train_rho_lambda: true,
        }
    }
}

impl UnrollConfig {
    pub fn validate(&self) -> Result<(), UnrollError> {
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            return Err(UnrollError::BadConfig("rho must be finite and >= 0"));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(UnrollError::BadConfig("lambda must be finite and >= 0"));
        }
        if self.rho + self.lambda <= 0.0 {
            return Err(UnrollError::BadConfig("rho + lambda must be positive"));
        }
        if self.ns == 0 {
            return Err(UnrollError::BadConfig("ns must be at least 1"));
        }
        if self.nt == 0 {
            return Err(UnrollError::BadConfig("nt must be at least 1"));
        }
        Ok(())
    }
}

/// Everything fixed across stages: scaled design rows, log-signals, mask.
pub struct UnrollProblem {
    pub dims: Dims,
    pub mask: Mask,
    pub m: usize,
    /// Design rows with the tensor columns divided by [`TENSOR_SCALE`].
    pub rows: Vec<[f64; PARAM_CHANNELS]>,
    /// Clamped log-signals, measurement-fastest, all voxels.
    pub y: Vec<f64>,
}

impl UnrollProblem {
    pub fn new(
        stack: &DwiStack,
        mask: Option<Mask>,
        log_floor: f64,
    ) -> Result<Self, UnrollError> {
        stack.scheme.validate_for_fitting()?;
        let mask = match mask {
            Some(m) => {
                if m.dims != stack.dims {
                    return Err(UnrollError::Dti(DtiError::ShapeMismatch));
                }
                m
            }
            None => crate::estimators::default_mask(
                stack,
                crate::estimators::DEFAULT_MASK_B0_THRESHOLD,
            ),
        };
        let rows: Vec<[f64; PARAM_CHANNELS]> = stack
            .scheme
            .entries()
            .iter()
            .map(|e| {
                let mut r = design_row(e.b, e.g);
                for j in 1..PARAM_CHANNELS {
                    r[j] /= TENSOR_SCALE;
                }
                r
            })
            .collect();
        let n = num_voxels(stack.dims);
        let m = rows.len();
        let mut y = vec![0.0; n * m];
        for v in 0..n {
            if !mask.get(v) {
                continue;
            }
            let logs = log_signals(stack.voxel_signals(v), log_floor);
            y[v * m..(v + 1) * m].copy_from_slice(&logs);
        }
        Ok(UnrollProblem {
            dims: stack.dims,
            mask,
            m,
            rows,
            y,
        })
    }
}

/// Solver state in the scaled parameter space.
pub struct UnrollState {
    pub x: Field,
    pub z: Field,
    pub beta: Field,
    /// Current WLLS weights, measurement-fastest, all voxels.
    pub w: Vec<f64>,
}

/// `w_r = exp(a_r . x)` with a clamped exponent.
pub(crate) fn voxel_weights(rows: &[[f64; PARAM_CHANNELS]], x: &[f64], w: &mut [f64]) {
    for (r, wr) in rows.iter().zip(w.iter_mut()) {
        let mut e = 0.0;
        for j in 0..PARAM_CHANNELS {
            e += r[j] * x[j];
        }
        if e > MAX_WEIGHT_EXPONENT {
            e = MAX_WEIGHT_EXPONENT;
        } else if e < -MAX_WEIGHT_EXPONENT {
            e = -MAX_WEIGHT_EXPONENT;
        }
        *wr = fmath::exp(e);
    }
}

/// Normal matrix `A^T W^2 A` and right-hand side `A^T W^2 y` for one voxel.
pub(crate) fn voxel_normal(
    rows: &[[f64; PARAM_CHANNELS]],
    y: &[f64],
    w: &[f64],
) -> ([[f64; PARAM_CHANNELS]; PARAM_CHANNELS], [f64; PARAM_CHANNELS]) {
    let mut h = [[0.0f64; PARAM_CHANNELS]; PARAM_CHANNELS];
    let mut rhs = [0.0f64; PARAM_CHANNELS];
    for (r, (&wr, &yr)) in rows.iter().zip(w.iter().zip(y.iter())) {
        let w2 = wr * wr;
        for i in 0..PARAM_CHANNELS {
            let wi = w2 * r[i];
            rhs[i] += wi * yr;
            for j in i..PARAM_CHANNELS {
                h[i][j] += wi * r[j];
            }
        }
    }
    for i in 0..PARAM_CHANNELS {
        for j in 0..i {
            h[i][j] = h[j][i];
        }
    }
    (h, rhs)
}

/// LLS initialization in the scaled space; `Z = X`, `B = 0`, weights from
/// the initial prediction.
pub fn init_state(p: &UnrollProblem) -> (UnrollState, Vec<(usize, FitError)>) {
    let n = num_voxels(p.dims);
    let m = p.m;
    let mut x = Field::zeros(p.dims, PARAM_CHANNELS);
    let mut w = vec![1.0; n * m];
    let flat: Vec<f64> = {
        let mut f = Vec::with_capacity(m * PARAM_CHANNELS);
        for r in &p.rows {
            f.extend_from_slice(r);
        }
        f
    };

    let solve_one = |v: usize, xc: &mut [f64], wc: &mut [f64]| -> Option<(usize, FitError)> {
        let y = &p.y[v * m..(v + 1) * m];
        match linalg::lstsq(&flat, m, PARAM_CHANNELS, y) {
            Ok(sol) => {
                if sol.iter().any(|s| !s.is_finite()) {
                    return Some((v, FitError::NonFiniteResult));
                }
                xc.copy_from_slice(&sol);
                voxel_weights(&p.rows, xc, wc);
                None
            }
            Err(e) => Some((v, e.into())),
        }
    };

    #[cfg(feature = "rayon")]
    let failures: Vec<(usize, FitError)> = {
        use rayon::prelude::*;
        x.data
            .par_chunks_mut(PARAM_CHANNELS)
            .zip(w.par_chunks_mut(m))
            .enumerate()
            .filter(|(v, _)| p.mask.get(*v))
            .filter_map(|(v, (xc, wc))| solve_one(v, xc, wc))
            .collect()
    };
    #[cfg(not(feature = "rayon"))]
    let failures: Vec<(usize, FitError)> = {
        let mut fails = Vec::new();
        for (v, (xc, wc)) in x
            .data
            .chunks_mut(PARAM_CHANNELS)
            .zip(w.chunks_mut(m))
            .enumerate()
        {
            if !p.mask.get(v) {
                continue;
            }
            if let Some(f) = solve_one(v, xc, wc) {
                fails.push(f);
            }
        }
        fails
    };
    let mut failures = failures;
    failures.sort_by_key(|(v, _)| *v);

    let z = x.clone();
    let beta = Field::zeros(p.dims, PARAM_CHANNELS);
    (UnrollState { x, z, beta, w }, failures)
}

/// X-update plus weight refresh. Voxels whose solve fails keep their
/// previous value and are reported.
pub fn fitting_block(
    p: &UnrollProblem,
    state: &mut UnrollState,
    rho: f64,
) -> Vec<(usize, FitError)> {
    let m = p.m;
    let z = &state.z;
    let beta = &state.beta;

    let solve_one = |v: usize, xc: &mut [f64], wc: &mut [f64]| -> Option<(usize, FitError)> {
        let y = &p.y[v * m..(v + 1) * m];
        let (mut h, mut rhs) = voxel_normal(&p.rows, y, wc);
        let zv = z.voxel(v);
        let bv = beta.voxel(v);
        for j in 0..PARAM_CHANNELS {
            h[j][j] += rho;
            rhs[j] += rho * (zv[j] - bv[j]);
        }
        match linalg::cholesky_solve7(&h, &rhs) {
            Ok(sol) => {
                if sol.iter().any(|s| !s.is_finite()) {
                    return Some((v, FitError::NonFiniteResult));
                }
                xc.copy_from_slice(&sol);
                voxel_weights(&p.rows, xc, wc);
                None
            }
            Err(e) => Some((v, e.into())),
        }
    };

    #[cfg(feature = "rayon")]
    let failures: Vec<(usize, FitError)> = {
        use rayon::prelude::*;
        state
            .x
            .data
            .par_chunks_mut(PARAM_CHANNELS)
            .zip(state.w.par_chunks_mut(m))
            .enumerate()
            .filter(|(v, _)| p.mask.get(*v))
            .filter_map(|(v, (xc, wc))| solve_one(v, xc, wc))
            .collect()
    };
    #[cfg(not(feature = "rayon"))]
    let failures: Vec<(usize, FitError)> = {
        let mut fails = Vec::new();
        for (v, (xc, wc)) in state
            .x
            .data
            .chunks_mut(PARAM_CHANNELS)
            .zip(state.w.chunks_mut(m))
            .enumerate()
        {
            if !p.mask.get(v) {
                continue;
            }
            if let Some(f) = solve_one(v, xc, wc) {
                fails.push(f);
            }
        }
        fails
    };
    let mut failures = failures;
    failures.sort_by_key(|(v, _)| *v);
    failures
}

/// Z-update. With `lambda == 0` the denoiser is bypassed and `Z = X + B`
/// exactly; the returned field is then the pre-update `Z`. Otherwise runs
/// `nt` fixed-point steps seeded with the previous `Z` and returns the first
/// denoiser output (for traces and the training loss).
pub fn aux_block(
    p: &UnrollProblem,
    state: &mut UnrollState,
    rho: f64,
    lambda: f64,
    nt: usize,
    den: &dyn Denoiser,
) -> Field {
    if lambda == 0.0 {
        let prev = state.z.clone();
        for v in 0..num_voxels(p.dims) {
            if !p.mask.get(v) {
                continue;
            }
            let xv = state.x.voxel(v);
            let bv = state.beta.voxel(v);
            let sum: [f64; PARAM_CHANNELS] = core::array::from_fn(|j| xv[j] + bv[j]);
            state.z.voxel_mut(v).copy_from_slice(&sum);
        }
        return prev;
    }
    let denom = 1.0 / (rho + lambda);
    let mut first_denoised: Option<Field> = None;
    for _t in 0..nt {
        let d = den.apply(&state.z, &p.mask);
        for v in 0..num_voxels(p.dims) {
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
        if first_denoised.is_none() {
            first_denoised = Some(d);
        }
    }
    first_denoised.unwrap()
}

/// Multiplier update `B <- B + X - Z`.
pub fn multiplier_block(state: &mut UnrollState) {
    for ((b, &x), &z) in state
        .beta
        .data
        .iter_mut()
        .zip(&state.x.data)
        .zip(&state.z.data)
    {
        *b += x - z;
    }
}

/// One stage's intermediates, in the scaled parameter space.
#[derive(Clone, Debug)]
pub struct StageTrace {
    pub x: Field,
    pub denoised: Field,
    pub z: Field,
}

pub struct UnrollRun {
    pub params: ParamField,
    /// Per-stage intermediates (scaled space); empty unless requested.
    pub trace: Vec<StageTrace>,
    pub report: FitReport,
}

#[derive(Clone, Debug)]
pub struct UnrollOptions {
    pub mask: Option<Mask>,
    pub log_floor: f64,
    pub want_trace: bool,
}

impl Default for UnrollOptions {
    fn default() -> Self {
        UnrollOptions {
            mask: None,
            log_floor: LOG_CLAMP_FLOOR,
            want_trace: false,
        }
    }
}

/// Convert a scaled solver field back to physical units.
pub fn from_solver_scale(f: &Field, mask: &Mask) -> ParamField {
    assert_eq!(f.channels, PARAM_CHANNELS);
    let mut out = f.clone();
    for v in 0..num_voxels(f.dims) {
        let row = out.voxel_mut(v);
        for j in 1..PARAM_CHANNELS {
            row[j] /= TENSOR_SCALE;
        }
    }
    let mut pf = ParamField::new(out, mask.clone());
    pf.field.apply_mask(mask);
    pf
}

/// Convert physical-unit parameters into the scaled solver space.
pub fn to_solver_scale(p: &ParamField) -> Field {
    let mut out = p.field.clone();
    for v in 0..num_voxels(out.dims) {
        let row = out.voxel_mut(v);
        for j in 1..PARAM_CHANNELS {
            row[j] *= TENSOR_SCALE;
        }
    }
    out
}

/// Run the full unrolled solver.
pub fn run_unroll(
    stack: &DwiStack,
    cfg: &UnrollConfig,
    den: &dyn Denoiser,
    opts: &UnrollOptions,
) -> Result<UnrollRun, UnrollError> {
    cfg.validate()?;
    let p = UnrollProblem::new(stack, opts.mask.clone(), opts.log_floor)?;
    let (mut state, init_failures) = init_state(&p);
    let mut trace = Vec::new();
    let mut failures = init_failures;
    for _stage in 0..cfg.ns {
        let stage_failures = fitting_block(&p, &mut state, cfg.rho);
        failures.extend(stage_failures);
        let denoised = aux_block(&p, &mut state, cfg.rho, cfg.lambda, cfg.nt, den);
        multiplier_block(&mut state);
        if opts.want_trace {
            trace.push(StageTrace {
                x: state.x.clone(),
                denoised,
                z: state.z.clone(),
            });
        }
    }
    let params = from_solver_scale(&state.x, &p.mask);
    let n_fitted = p.mask.count()
        - failures
            .iter()
            .map(|(v, _)| *v)
            .collect::<alloc::collections::BTreeSet<_>>()
            .len();
    Ok(UnrollRun {
        params,
        trace,
        report: FitReport { n_fitted, failures },
    })
}
