//! Masked volume comparison metrics: NRMSE, SSIM over 3-D windows, R^2.

use crate::fmath;
use crate::linalg::kahan_sum;
use crate::volume::{num_voxels, Field, Mask, Volume};
use alloc::vec::Vec;
use core::fmt;

pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const SSIM_SIGMA: f64 = 1.5;
/// 11^3 window: radius 5 around the center voxel.
pub const SSIM_RADIUS: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MetricsError {
    ShapeMismatch,
    EmptyMask,
    /// Reference has zero RMS inside the mask; NRMSE undefined.
    ZeroReference,
    /// Reference has zero variance inside the mask; R^2 undefined.
    ZeroVariance,
    /// Reference is constant inside the mask; SSIM undefined.
    ZeroDynamicRange,
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::ShapeMismatch => write!(f, "volume shapes do not match"),
            MetricsError::EmptyMask => write!(f, "mask selects no voxels"),
            MetricsError::ZeroReference => write!(f, "reference is zero inside the mask"),
            MetricsError::ZeroVariance => write!(f, "reference has no variance inside the mask"),
            MetricsError::ZeroDynamicRange => {
                write!(f, "reference is constant inside the mask")
            }
        }
    }
}

impl core::error::Error for MetricsError {}

fn check_shapes(est: &Volume, reference: &Volume, mask: &Mask) -> Result<(), MetricsError> {
    if est.dims != reference.dims || est.dims != mask.dims {
        return Err(MetricsError::ShapeMismatch);
    }
    if mask.count() == 0 {
        return Err(MetricsError::EmptyMask);
    }
    Ok(())
}

/// Root-mean-square error normalized by the RMS of the reference, both over
/// the mask.
pub fn nrmse(est: &Volume, reference: &Volume, mask: &Mask) -> Result<f64, MetricsError> {
    check_shapes(est, reference, mask)?;
    let sq_err = kahan_sum(mask.data.iter().enumerate().filter(|(_, &m)| m).map(|(v, _)| {
        let d = est.data[v] - reference.data[v];
        d * d
    }));
    let sq_ref = kahan_sum(
        mask.data
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(v, _)| reference.data[v] * reference.data[v]),
    );
    if sq_ref <= 0.0 {
        return Err(MetricsError::ZeroReference);
    }
    Ok(fmath::sqrt(sq_err / sq_ref))
}

/// Coefficient of determination of `est` against `reference` over the mask.
pub fn r_squared(est: &Volume, reference: &Volume, mask: &Mask) -> Result<f64, MetricsError> {
    check_shapes(est, reference, mask)?;
    let n = mask.count() as f64;
    let mean_ref = kahan_sum(
        mask.data
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(v, _)| reference.data[v]),
    ) / n;
    let ss_res = kahan_sum(mask.data.iter().enumerate().filter(|(_, &m)| m).map(|(v, _)| {
        let d = est.data[v] - reference.data[v];
        d * d
    }));
    let ss_tot = kahan_sum(mask.data.iter().enumerate().filter(|(_, &m)| m).map(|(v, _)| {
        let d = reference.data[v] - mean_ref;
        d * d
    }));
    if ss_tot <= 0.0 {
        return Err(MetricsError::ZeroVariance);
    }
    Ok(1.0 - ss_res / ss_tot)
}

fn ssim_kernel() -> Vec<f64> {
    let mut k = Vec::with_capacity(2 * SSIM_RADIUS + 1);
    let inv = 1.0 / (2.0 * SSIM_SIGMA * SSIM_SIGMA);
    for i in -(SSIM_RADIUS as i32)..=(SSIM_RADIUS as i32) {
        k.push(fmath::exp(-(i as f64) * (i as f64) * inv));
    }
    let s: f64 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

fn blur_axis_vol(f: &mut Field, axis: usize, k: &[f64]) {
    *f = crate::denoiser::blur_axis(f, axis, k);
}

/// Mean structural similarity over the mask, Gaussian-weighted 11^3 windows
/// (sigma 1.5). Windows are renormalized over the in-mask voxels they cover,
/// so the statistic is unbiased at mask boundaries. The dynamic range is
/// `max - min` of the reference inside the mask.
pub fn ssim3d(est: &Volume, reference: &Volume, mask: &Mask) -> Result<f64, MetricsError> {
    check_shapes(est, reference, mask)?;
    let n = num_voxels(est.dims);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in 0..n {
        if mask.get(v) {
            let r = reference.data[v];
            lo = lo.min(r);
            hi = hi.max(r);
        }
    }
    let range = hi - lo;
    if !(range > 0.0) {
        return Err(MetricsError::ZeroDynamicRange);
    }
    let c1 = (SSIM_K1 * range) * (SSIM_K1 * range);
    let c2 = (SSIM_K2 * range) * (SSIM_K2 * range);

    // Gaussian-weighted masked moments via separable blurs of
    // m, x m, y m, x^2 m, y^2 m, x y m.
    let k = ssim_kernel();
    let mut fields: [Field; 6] = [
        Field::zeros(est.dims, 1),
        Field::zeros(est.dims, 1),
        Field::zeros(est.dims, 1),
        Field::zeros(est.dims, 1),
        Field::zeros(est.dims, 1),
        Field::zeros(est.dims, 1),
    ];
    for v in 0..n {
        if !mask.get(v) {
            continue;
        }
        let x = est.data[v];
        let y = reference.data[v];
        fields[0].data[v] = 1.0;
        fields[1].data[v] = x;
        fields[2].data[v] = y;
        fields[3].data[v] = x * x;
        fields[4].data[v] = y * y;
        fields[5].data[v] = x * y;
    }
    for f in &mut fields {
        for axis in 0..3 {
            blur_axis_vol(f, axis, &k);
        }
    }

    let vals = mask.data.iter().enumerate().filter(|(_, &m)| m).map(|(v, _)| {
        let w = fields[0].data[v];
        let inv = 1.0 / w;
        let mx = fields[1].data[v] * inv;
        let my = fields[2].data[v] * inv;
        let vx = (fields[3].data[v] * inv - mx * mx).max(0.0);
        let vy = (fields[4].data[v] * inv - my * my).max(0.0);
        let cxy = fields[5].data[v] * inv - mx * my;
        ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
            / ((mx * mx + my * my + c1) * (vx + vy + c2))
    });
    Ok(kahan_sum(vals) / mask.count() as f64)
}
