//! Log-linear tensor estimators: LLS, WLLS, and iterated WLLS.
//!
//! The weighted fit follows the rationale of Salvador et al. 2005 and
//! Veraart et al. 2013: heteroscedasticity of log-transformed signals is
//! undone by weighting each row with the predicted (not observed) signal,
//! and the weights are re-estimated from the previous fit.

use crate::dti::{
    build_design_matrix, DesignMatrix, DtiError, DwiStack, ParamField, ParamVector, PARAM_CHANNELS,
};
use crate::fmath;
use crate::linalg::{self, LinalgError};
use crate::volume::{num_voxels, Mask};
use alloc::vec::Vec;
use core::fmt;

/// Signals at or below this are clamped before the log transform.
pub const LOG_CLAMP_FLOOR: f64 = 1e-8;

/// Default brain-mask threshold on the mean b=0 signal (normalized units).
pub const DEFAULT_MASK_B0_THRESHOLD: f64 = 0.05;

/// Default number of reweighting iterations for the iterated WLLS.
pub const IWLLS_DEFAULT_ITERS: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub enum FitError {
    RankDeficient,
    NotPositiveDefinite,
    NonFiniteInput,
    NonFiniteResult,
    BadWeights,
}

impl fmt::Display for FitError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FitError::RankDeficient => write!(f, "weighted design matrix is rank deficient"),
            FitError::NotPositiveDefinite => write!(f, "normal matrix is not positive definite"),
            FitError::NonFiniteInput => write!(f, "signals contain non-finite values"),
            FitError::NonFiniteResult => write!(f, "fit produced non-finite parameters"),
            FitError::BadWeights => write!(f, "weights must be positive and finite"),
        }
    }
}

impl core::error::Error for FitError {}

impl From<LinalgError> for FitError {
    fn from(e: LinalgError) -> Self {
        match e {
            LinalgError::RankDeficient { .. } => FitError::RankDeficient,
            LinalgError::NotPositiveDefinite { .. } => FitError::NotPositiveDefinite,
            LinalgError::BadShape => FitError::RankDeficient,
        }
    }
}

/// `ln(max(s, floor))` for each signal.
pub fn log_signals(signals: &[f64], floor: f64) -> Vec<f64> {
    signals
        .iter()
        .map(|&s| {
            if s.is_nan() {
                // Let corrupted inputs surface as fit failures instead of
                // being silently clamped into plausible-looking values.
                f64::NAN
            } else {
                fmath::ln(if s > floor { s } else { floor })
            }
        })
        .collect()
}

/// Ordinary least squares on the log-signals.
pub fn lls_fit(y: &[f64], a: &DesignMatrix) -> Result<ParamVector, FitError> {
    debug_assert_eq!(y.len(), a.m());
    if y.iter().any(|v| !v.is_finite()) {
        return Err(FitError::NonFiniteInput);
    }
    let x = linalg::lstsq(&a.flat(), a.m(), PARAM_CHANNELS, y)?;
    to_params(&x)
}

/// Weights for one voxel from the model prediction: `w_i = exp(a_i . x)`.
pub fn reweight(x: &ParamVector, a: &DesignMatrix) -> Vec<f64> {
    a.rows
        .iter()
        .map(|row| {
            let mut s = 0.0;
            for j in 0..PARAM_CHANNELS {
                s += row[j] * x[j];
            }
            fmath::exp(s)
        })
        .collect()
}

/// Weighted least squares: minimizes `|| W (A x - y) ||^2` by QR on the
/// weighted rows (never forms the normal equations).
pub fn wlls_fit(y: &[f64], a: &DesignMatrix, w: &[f64]) -> Result<ParamVector, FitError> {
    let m = a.m();
    debug_assert_eq!(y.len(), m);
    if w.len() != m || w.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
        return Err(FitError::BadWeights);
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(FitError::NonFiniteInput);
    }
    let mut wa = Vec::with_capacity(m * PARAM_CHANNELS);
    let mut wy = Vec::with_capacity(m);
    for i in 0..m {
        for j in 0..PARAM_CHANNELS {
            wa.push(w[i] * a.rows[i][j]);
        }
        wy.push(w[i] * y[i]);
    }
    let x = linalg::lstsq(&wa, m, PARAM_CHANNELS, &wy)?;
    to_params(&x)
}

/// Iterated WLLS: LLS start, then `iters` rounds of predict-reweight-refit.
pub fn iwlls_fit(y: &[f64], a: &DesignMatrix, iters: usize) -> Result<ParamVector, FitError> {
    let mut x = lls_fit(y, a)?;
    for _ in 0..iters {
        let w = reweight(&x, a);
        x = wlls_fit(y, a, &w)?;
    }
    Ok(x)
}

fn to_params(x: &[f64]) -> Result<ParamVector, FitError> {
    let mut p: ParamVector = [0.0; PARAM_CHANNELS];
    for j in 0..PARAM_CHANNELS {
        if !x[j].is_finite() {
            return Err(FitError::NonFiniteResult);
        }
        p[j] = x[j];
    }
    Ok(p)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FitMethod {
    Lls,
    /// Iterated weighted fit with the given number of reweighting rounds.
    Wlls { iters: usize },
}

impl Default for FitMethod {
    fn default() -> Self {
        FitMethod::Wlls {
            iters: IWLLS_DEFAULT_ITERS,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitOptions {
    /// Fitting mask; `None` derives one via [`default_mask`].
    pub mask: Option<Mask>,
    pub log_floor: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            mask: None,
            log_floor: LOG_CLAMP_FLOOR,
        }
    }
}

/// Voxels whose fit failed are zero in the output and listed here.
#[derive(Clone, Debug, Default)]
pub struct FitReport {
    pub n_fitted: usize,
    pub failures: Vec<(usize, FitError)>,
}

/// Mask of voxels whose mean b=0 signal exceeds `threshold`.
pub fn default_mask(stack: &DwiStack, threshold: f64) -> Mask {
    let n = num_voxels(stack.dims);
    let mut data = Vec::with_capacity(n);
    for v in 0..n {
        data.push(stack.b0_mean(v) > threshold);
    }
    Mask::from_vec(stack.dims, data)
}

/// Per-voxel tensor fit over a masked volume.
pub fn fit_field(
    stack: &DwiStack,
    method: FitMethod,
    opts: &FitOptions,
) -> Result<(ParamField, FitReport), DtiError> {
    stack.scheme.validate_for_fitting()?;
    let mask = match &opts.mask {
        Some(m) => {
            if m.dims != stack.dims {
                return Err(DtiError::ShapeMismatch);
            }
            m.clone()
        }
        None => default_mask(stack, DEFAULT_MASK_B0_THRESHOLD),
    };
    let a = build_design_matrix(&stack.scheme);
    let n = num_voxels(stack.dims);
    let mut out = ParamField::zeros(stack.dims, mask);
    let floor = opts.log_floor;

    let fit_one = |v: usize, dst: &mut [f64]| -> Option<(usize, FitError)> {
        let y = log_signals(stack.voxel_signals(v), floor);
        let r = match method {
            FitMethod::Lls => lls_fit(&y, &a),
            FitMethod::Wlls { iters } => iwlls_fit(&y, &a, iters),
        };
        match r {
            Ok(x) => {
                dst.copy_from_slice(&x);
                None
            }
            Err(e) => Some((v, e)),
        }
    };

    let mask_ref = &out.mask;
    #[cfg(feature = "rayon")]
    let failures: Vec<(usize, FitError)> = {
        use rayon::prelude::*;
        out.field
            .data
            .par_chunks_mut(PARAM_CHANNELS)
            .enumerate()
            .filter(|(v, _)| mask_ref.get(*v))
            .filter_map(|(v, dst)| fit_one(v, dst))
            .collect()
    };
    #[cfg(not(feature = "rayon"))]
    let failures: Vec<(usize, FitError)> = {
        let mut fails = Vec::new();
        for v in 0..n {
            if !mask_ref.get(v) {
                continue;
            }
            let dst_range = v * PARAM_CHANNELS..(v + 1) * PARAM_CHANNELS;
            let mut buf = [0.0; PARAM_CHANNELS];
            if let Some(f) = fit_one(v, &mut buf) {
                fails.push(f);
            } else {
                out.field.data[dst_range].copy_from_slice(&buf);
            }
        }
        fails
    };

    let mut failures = failures;
    failures.sort_by_key(|(v, _)| *v);
    let n_in_mask = out.mask.count();
    let _ = n;
    Ok((
        out,
        FitReport {
            n_fitted: n_in_mask - failures.len(),
            failures,
        },
    ))
}

/// Noise level of a DWI stack from second-difference pseudo-residuals.
///
/// For every interior voxel whose six neighbours are all inside the mask,
/// the deviation from the neighbourhood mean is (6/7)^-1/2 times a draw of
/// the noise when the underlying signal is locally smooth. A median-absolute
/// -deviation estimate per measurement channel (robust against edges), then
/// the median across channels, gives sigma in the units of the data. Smooth
/// but curved signal inflates the estimate slightly at very low noise.
///
/// `None` when fewer than 32 such interior voxels exist in any channel.
pub fn estimate_noise_sigma(stack: &DwiStack, mask: &Mask) -> Option<f64> {
    if mask.dims != stack.dims {
        return None;
    }
    let dims = stack.dims;
    if dims.iter().any(|&d| d < 3) {
        return None;
    }
    let m = stack.scheme.len();
    let idx = |x: usize, y: usize, z: usize| (z * dims[1] + y) * dims[0] + x;
    let median = |v: &mut Vec<f64>| -> f64 {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    let mut per_chan = Vec::with_capacity(m);
    for c in 0..m {
        let mut absd = Vec::new();
        for z in 1..dims[2] - 1 {
            for y in 1..dims[1] - 1 {
                for x in 1..dims[0] - 1 {
                    let v = idx(x, y, z);
                    let nbs = [
                        idx(x - 1, y, z),
                        idx(x + 1, y, z),
                        idx(x, y - 1, z),
                        idx(x, y + 1, z),
                        idx(x, y, z - 1),
                        idx(x, y, z + 1),
                    ];
                    if !mask.get(v) || nbs.iter().any(|&n| !mask.get(n)) {
                        continue;
                    }
                    let mut nb_mean = 0.0;
                    for &n in &nbs {
                        nb_mean += stack.data[n * m + c];
                    }
                    nb_mean /= 6.0;
                    let d = stack.data[v * m + c] - nb_mean;
                    absd.push(if d < 0.0 { -d } else { d });
                }
            }
        }
        if absd.len() < 32 {
            return None;
        }
        // |N(0,1)| has median 0.6745; the difference variance is 7/6 sigma^2.
        per_chan.push(median(&mut absd) / 0.6745 * fmath::sqrt(6.0 / 7.0));
    }
    if per_chan.is_empty() {
        return None;
    }
    Some(median(&mut per_chan))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dti::{predict_signals, GradientEntry, GradientScheme};
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn test_scheme() -> GradientScheme {
        let s = core::f64::consts::FRAC_1_SQRT_2;
        let dirs = [
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
            [s, s, 0.0],
            [0.0, s, s],
            [s, 0.0, s],
        ];
        let mut entries = vec![GradientEntry {
            b: 0.0,
            g: [0.0, 0.0, 0.0],
        }];
        for d in dirs {
            entries.push(GradientEntry { b: 1000.0, g: d });
        }
        GradientScheme::new(entries).unwrap()
    }

    fn rician(s: f64, sigma: f64, rng: &mut ChaCha8Rng) -> f64 {
        let n1: f64 = rng.sample(StandardNormal);
        let n2: f64 = rng.sample(StandardNormal);
        let re = s + sigma * n1;
        let im = sigma * n2;
        (re * re + im * im).sqrt()
    }

    // Oracle: closed-form WLLS through the normal equations,
    // (A^T W^2 A)^-1 A^T W^2 y, solved by Gauss-Jordan.
    fn wlls_oracle(y: &[f64], a: &DesignMatrix, w: &[f64]) -> ParamVector {
        let m = a.m();
        let n = PARAM_CHANNELS;
        let mut g = vec![0.0; n * (n + 1)];
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for r in 0..m {
                    s += w[r] * w[r] * a.rows[r][i] * a.rows[r][j];
                }
                g[i * (n + 1) + j] = s;
            }
            let mut s = 0.0;
            for r in 0..m {
                s += w[r] * w[r] * a.rows[r][i] * y[r];
            }
            g[i * (n + 1) + n] = s;
        }
        for col in 0..n {
            let mut p = col;
            for r in (col + 1)..n {
                if g[r * (n + 1) + col].abs() > g[p * (n + 1) + col].abs() {
                    p = r;
                }
            }
            for j in 0..=n {
                g.swap(col * (n + 1) + j, p * (n + 1) + j);
            }
            let piv = g[col * (n + 1) + col];
            for r in 0..n {
                if r != col {
                    let f = g[r * (n + 1) + col] / piv;
                    for j in col..=n {
                        g[r * (n + 1) + j] -= f * g[col * (n + 1) + j];
                    }
                }
            }
        }
        core::array::from_fn(|i| g[i * (n + 1) + n] / g[i * (n + 1) + i])
    }

    #[test]
    fn lls_recovers_noise_free_params() {
        let scheme = test_scheme();
        let a = build_design_matrix(&scheme);
        let x: ParamVector = [-0.05, 1.7e-3, 0.2e-3, 0.2e-3, 0.0, 0.1e-3, -0.05e-3];
        let sigs = predict_signals(&x, &a);
        let y = log_signals(&sigs, LOG_CLAMP_FLOOR);
        let xr = lls_fit(&y, &a).unwrap();
        for j in 0..7 {
            assert!((xr[j] - x[j]).abs() < 1e-12, "param {j}");
        }
    }

    #[test]
    fn wlls_matches_normal_equation_oracle() {
        let scheme = test_scheme();
        let a = build_design_matrix(&scheme);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..30 {
            let y: Vec<f64> = (0..a.m()).map(|_| rng.gen_range(-2.0..0.2)).collect();
            let w: Vec<f64> = (0..a.m()).map(|_| rng.gen_range(0.05..1.0)).collect();
            let x = wlls_fit(&y, &a, &w).unwrap();
            let x_ref = wlls_oracle(&y, &a, &w);
            for j in 0..7 {
                assert!(
                    (x[j] - x_ref[j]).abs() < 1e-8,
                    "param {j}: {} vs {}",
                    x[j],
                    x_ref[j]
                );
            }
        }
    }

    #[test]
    fn unit_weights_reduce_wlls_to_lls() {
        let scheme = test_scheme();
        let a = build_design_matrix(&scheme);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y: Vec<f64> = (0..a.m()).map(|_| rng.gen_range(-2.0..0.2)).collect();
        let w = vec![1.0; a.m()];
        let xa = lls_fit(&y, &a).unwrap();
        let xb = wlls_fit(&y, &a, &w).unwrap();
        for j in 0..7 {
            assert!((xa[j] - xb[j]).abs() < 1e-11);
        }
    }

    #[test]
    fn wlls_beats_lls_under_rician_noise() {
        // Monte-Carlo: mean |MD error| of the iterated WLLS must come in
        // below plain LLS. The advantage comes from the log-domain
        // heteroscedasticity, so the margin only opens up at moderate SNR.
        let scheme = test_scheme();
        let a = build_design_matrix(&scheme);
        let x: ParamVector = [0.0, 1.7e-3, 0.2e-3, 0.2e-3, 0.0, 0.0, 0.0];
        let md_true = (1.7e-3 + 0.2e-3 + 0.2e-3) / 3.0;
        let clean = predict_signals(&x, &a);
        let mut rng = ChaCha8Rng::seed_from_u64(12345);
        let (mut err_lls, mut err_wlls) = (0.0, 0.0);
        let trials = 3000;
        for _ in 0..trials {
            let noisy: Vec<f64> = clean.iter().map(|&s| rician(s, 0.05, &mut rng)).collect();
            let y = log_signals(&noisy, LOG_CLAMP_FLOOR);
            let xl = lls_fit(&y, &a).unwrap();
            let xw = iwlls_fit(&y, &a, IWLLS_DEFAULT_ITERS).unwrap();
            let md_l = (xl[1] + xl[2] + xl[3]) / 3.0;
            let md_w = (xw[1] + xw[2] + xw[3]) / 3.0;
            err_lls += (md_l - md_true).abs();
            err_wlls += (md_w - md_true).abs();
        }
        err_lls /= trials as f64;
        err_wlls /= trials as f64;
        assert!(
            err_wlls < err_lls,
            "wlls {err_wlls:.6e} not below lls {err_lls:.6e}"
        );
    }

    #[test]
    fn log_clamp_handles_nonpositive_signals() {
        let y = log_signals(&[1.0, 0.0, -0.3, 1e-12, f64::NAN], LOG_CLAMP_FLOOR);
        assert_eq!(y[0], 0.0);
        let floor_log = LOG_CLAMP_FLOOR.ln();
        assert_eq!(y[1], floor_log);
        assert_eq!(y[2], floor_log);
        assert_eq!(y[3], floor_log);
        assert!(y[4].is_nan());
    }

    #[test]
    fn iwlls_extra_iterations_converge() {
        let scheme = test_scheme();
        let a = build_design_matrix(&scheme);
        let x: ParamVector = [0.0, 1.5e-3, 0.4e-3, 0.3e-3, 0.1e-3, 0.0, 0.0];
        let clean = predict_signals(&x, &a);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let noisy: Vec<f64> = clean.iter().map(|&s| rician(s, 0.03, &mut rng)).collect();
        let y = log_signals(&noisy, LOG_CLAMP_FLOOR);
        let x20 = iwlls_fit(&y, &a, 20).unwrap();
        let x21 = iwlls_fit(&y, &a, 21).unwrap();
        for j in 0..7 {
            assert!((x20[j] - x21[j]).abs() < 1e-10, "fixed point drift at {j}");
        }
    }

    fn synthetic_stack(dims: [usize; 3]) -> DwiStack {
        let scheme = test_scheme();
        let a = build_design_matrix(&scheme);
        let mut stack = DwiStack::zeros(dims, scheme);
        let n = num_voxels(dims);
        let x: ParamVector = [0.0, 1.0e-3, 0.8e-3, 0.6e-3, 0.0, 0.0, 0.1e-3];
        for v in 0..n / 2 {
            let sigs = predict_signals(&x, &a);
            stack.voxel_signals_mut(v).copy_from_slice(&sigs);
        }
        // Remaining voxels stay zero: background.
        stack
    }

    #[test]
    fn default_mask_thresholds_b0() {
        let stack = synthetic_stack([4, 4, 2]);
        let mask = default_mask(&stack, DEFAULT_MASK_B0_THRESHOLD);
        assert_eq!(mask.count(), num_voxels(stack.dims) / 2);
    }

    #[test]
    fn fit_field_masks_and_reports() {
        let mut stack = synthetic_stack([4, 4, 2]);
        // Poison one in-mask voxel.
        stack.voxel_signals_mut(3)[2] = f64::NAN;
        let (pf, report) = fit_field(&stack, FitMethod::default(), &FitOptions::default()).unwrap();
        assert_eq!(report.failures.len(), 1);
        assert_eq!(report.failures[0].0, 3);
        // Failed voxel zeroed.
        assert!(pf.voxel(3).iter().all(|&v| v == 0.0));
        // Background voxels outside mask are zero.
        let n = num_voxels(stack.dims);
        for v in n / 2..n {
            assert!(!pf.mask.get(v));
            assert!(pf.voxel(v).iter().all(|&v| v == 0.0));
        }
        // A good voxel recovers the tensor.
        let x = pf.voxel(0);
        assert!((x[1] - 1.0e-3).abs() < 1e-10);
        assert_eq!(report.n_fitted, pf.mask.count() - 1);
    }

    #[test]
    fn fit_field_is_reproducible() {
        let stack = synthetic_stack([6, 5, 4]);
        let (a, _) = fit_field(&stack, FitMethod::default(), &FitOptions::default()).unwrap();
        let (b, _) = fit_field(&stack, FitMethod::default(), &FitOptions::default()).unwrap();
        assert_eq!(a.field.data, b.field.data);
    }

    #[test]
    fn noise_estimate_recovers_sigma_on_flat_signal() {
        // Constant signal: the pseudo-residuals are pure noise, so the
        // estimate should land within a few percent of the truth.
        let dims = [14, 14, 14];
        let scheme = test_scheme();
        let m = scheme.len();
        let n = num_voxels(dims);
        let mask = Mask::from_vec(dims, vec![true; n]);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for sigma in [0.01, 0.03] {
            let mut stack = DwiStack::zeros(dims, scheme.clone());
            for i in 0..n * m {
                let e: f64 = rng.sample(StandardNormal);
                stack.data[i] = 0.8 + sigma * e;
            }
            let est = estimate_noise_sigma(&stack, &mask).unwrap();
            assert!(
                (est / sigma - 1.0).abs() < 0.08,
                "sigma {sigma}: estimated {est}"
            );
        }
    }

    #[test]
    fn noise_estimate_needs_interior_voxels() {
        let dims = [4, 4, 4];
        let scheme = test_scheme();
        let stack = DwiStack::zeros(dims, scheme);
        // Too few six-neighbour interior voxels under this mask.
        let mask = Mask::from_vec(dims, vec![false; num_voxels(dims)]);
        assert!(estimate_noise_sigma(&stack, &mask).is_none());
    }
}
