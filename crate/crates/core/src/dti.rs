//! The diffusion tensor signal model and its derived quantities.
//!
//! Signal model (Basser et al. 1994): `s(b, g) = s0 * exp(-b g^T D g)` with
//! `D` symmetric positive semi-definite. Taking logs gives the linear form
//! `ln s = a(b, g) . x` with the 7-vector parameterization
//! `x = (ln s0, D11, D22, D33, D12, D23, D13)`.

use crate::fmath;
use crate::linalg;
use crate::volume::{num_voxels, Dims, Field, Mask, Volume};
use alloc::vec::Vec;
use core::fmt;

/// Number of model parameters per voxel: ln s0 plus six tensor components.
pub const PARAM_CHANNELS: usize = 7;

/// b-values below this (s/mm^2) are treated as b=0 acquisitions, following
/// the common convention for shelled schemes.
pub const B0_MAX_BVAL: f64 = 50.0;

/// Per-voxel parameter vector `(ln s0, D11, D22, D33, D12, D23, D13)`.
pub type ParamVector = [f64; PARAM_CHANNELS];

#[derive(Clone, Debug, PartialEq)]
pub enum DtiError {
    EmptyScheme,
    NegativeBValue { index: usize, b: f64 },
    NonUnitDirection { index: usize, norm: f64 },
    TooFewMeasurements { m: usize },
    NoB0,
    RankDeficientDesign,
    NotARotation,
    ShapeMismatch,
}

impl fmt::Display for DtiError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DtiError::EmptyScheme => write!(f, "gradient scheme is empty"),
            DtiError::NegativeBValue { index, b } => {
                write!(f, "entry {index}: negative b-value {b}")
            }
            DtiError::NonUnitDirection { index, norm } => {
                write!(f, "entry {index}: direction norm {norm} is not unit")
            }
            DtiError::TooFewMeasurements { m } => {
                write!(f, "scheme has {m} measurements; tensor fitting needs at least 7")
            }
            DtiError::NoB0 => write!(f, "scheme has no b=0 measurement"),
            DtiError::RankDeficientDesign => {
                write!(f, "design matrix is rank deficient; directions do not span the tensor space")
            }
            DtiError::NotARotation => write!(f, "matrix is not a proper rotation"),
            DtiError::ShapeMismatch => write!(f, "field shapes do not match"),
        }
    }
}

impl core::error::Error for DtiError {}

/// One diffusion measurement: b-value (s/mm^2) and unit gradient direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientEntry {
    pub b: f64,
    pub g: [f64; 3],
}

impl GradientEntry {
    #[inline]
    pub fn is_b0(&self) -> bool {
        self.b < B0_MAX_BVAL
    }
}

/// A validated list of diffusion measurements.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientScheme {
    entries: Vec<GradientEntry>,
}

impl GradientScheme {
    /// Validates b-values (non-negative) and unit direction norms (within
    /// 1e-6) for diffusion-weighted entries; b=0 directions are ignored.
    pub fn new(entries: Vec<GradientEntry>) -> Result<Self, DtiError> {
        if entries.is_empty() {
            return Err(DtiError::EmptyScheme);
        }
        for (i, e) in entries.iter().enumerate() {
            if e.b < 0.0 || !e.b.is_finite() {
                return Err(DtiError::NegativeBValue { index: i, b: e.b });
            }
            if !e.is_b0() {
                let n = linalg::norm3(e.g);
                if fmath::abs(n - 1.0) > 1e-6 {
                    return Err(DtiError::NonUnitDirection { index: i, norm: n });
                }
            }
        }
        Ok(GradientScheme { entries })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    #[inline]
    pub fn entries(&self) -> &[GradientEntry] {
        &self.entries
    }

    pub fn n_b0(&self) -> usize {
        self.entries.iter().filter(|e| e.is_b0()).count()
    }

    pub fn n_dw(&self) -> usize {
        self.entries.len() - self.n_b0()
    }

    /// Checks the conditions under which a tensor fit is well posed:
    /// at least 7 measurements, at least one b=0, full-rank design.
    pub fn validate_for_fitting(&self) -> Result<(), DtiError> {
        if self.len() < PARAM_CHANNELS {
            return Err(DtiError::TooFewMeasurements { m: self.len() });
        }
        if self.n_b0() == 0 {
            return Err(DtiError::NoB0);
        }
        build_design_matrix(self).check_rank()
    }

    /// Same scheme with all diffusion directions rotated by `r`.
    pub fn rotated(&self, r: &[[f64; 3]; 3]) -> Result<GradientScheme, DtiError> {
        check_rotation(r)?;
        let entries = self
            .entries
            .iter()
            .map(|e| {
                let g = e.g;
                let rg = [
                    r[0][0] * g[0] + r[0][1] * g[1] + r[0][2] * g[2],
                    r[1][0] * g[0] + r[1][1] * g[1] + r[1][2] * g[2],
                    r[2][0] * g[0] + r[2][1] * g[1] + r[2][2] * g[2],
                ];
                GradientEntry { b: e.b, g: rg }
            })
            .collect();
        Ok(GradientScheme { entries })
    }
}

/// Design row for one measurement:
/// `[1, -b g1^2, -b g2^2, -b g3^2, -2b g1 g2, -2b g2 g3, -2b g1 g3]`.
pub fn design_row(b: f64, g: [f64; 3]) -> [f64; PARAM_CHANNELS] {
    [
        1.0,
        -b * g[0] * g[0],
        -b * g[1] * g[1],
        -b * g[2] * g[2],
        -2.0 * b * g[0] * g[1],
        -2.0 * b * g[1] * g[2],
        -2.0 * b * g[0] * g[2],
    ]
}

/// Stacked design rows for a whole scheme.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignMatrix {
    pub rows: Vec<[f64; PARAM_CHANNELS]>,
}

impl DesignMatrix {
    #[inline]
    pub fn m(&self) -> usize {
        self.rows.len()
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.rows.len() * PARAM_CHANNELS);
        for r in &self.rows {
            out.extend_from_slice(r);
        }
        out
    }

    /// Rank diagnostic via the QR pivots; errors when the columns do not
    /// span all 7 parameters.
    pub fn check_rank(&self) -> Result<(), DtiError> {
        if self.m() < PARAM_CHANNELS {
            return Err(DtiError::TooFewMeasurements { m: self.m() });
        }
        let y = alloc::vec![0.0; self.m()];
        match linalg::lstsq(&self.flat(), self.m(), PARAM_CHANNELS, &y) {
            Ok(_) => Ok(()),
            Err(linalg::LinalgError::RankDeficient { .. }) => Err(DtiError::RankDeficientDesign),
            Err(_) => Err(DtiError::RankDeficientDesign),
        }
    }
}

pub fn build_design_matrix(scheme: &GradientScheme) -> DesignMatrix {
    DesignMatrix {
        rows: scheme.entries().iter().map(|e| design_row(e.b, e.g)).collect(),
    }
}

/// Noise-free signals `exp(A x)` for one voxel.
pub fn predict_signals(x: &ParamVector, a: &DesignMatrix) -> Vec<f64> {
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

/// 3x3 symmetric tensor from the parameter vector's tensor channels.
pub fn tensor_from_params(x: &ParamVector) -> [[f64; 3]; 3] {
    [
        [x[1], x[4], x[6]],
        [x[4], x[2], x[5]],
        [x[6], x[5], x[3]],
    ]
}

/// Inverse of [`tensor_from_params`]; `ln_s0` fills channel 0.
pub fn params_from_tensor(ln_s0: f64, d: &[[f64; 3]; 3]) -> ParamVector {
    [ln_s0, d[0][0], d[1][1], d[2][2], d[0][1], d[1][2], d[0][2]]
}

fn check_rotation(r: &[[f64; 3]; 3]) -> Result<(), DtiError> {
    let rt = linalg::mat3_transpose(r);
    let p = linalg::mat3_mul(&rt, r);
    for i in 0..3 {
        for j in 0..3 {
            let want = if i == j { 1.0 } else { 0.0 };
            if fmath::abs(p[i][j] - want) > 1e-8 {
                return Err(DtiError::NotARotation);
            }
        }
    }
    if fmath::abs(linalg::mat3_det(r) - 1.0) > 1e-8 {
        return Err(DtiError::NotARotation);
    }
    Ok(())
}

/// Conjugates the tensor part by a proper rotation: `D' = R D R^T`.
/// `ln s0` is untouched.
pub fn rotate_tensor(x: &ParamVector, r: &[[f64; 3]; 3]) -> Result<ParamVector, DtiError> {
    check_rotation(r)?;
    let d = tensor_from_params(x);
    let rd = linalg::mat3_mul(r, &d);
    let rdrt = linalg::mat3_mul(&rd, &linalg::mat3_transpose(r));
    Ok(params_from_tensor(x[0], &rdrt))
}

/// Eigen-decomposition of a symmetric 3x3 matrix.
///
/// `values` are sorted descending; `vectors[k]` is the unit eigenvector for
/// `values[k]` (sign arbitrary).
#[derive(Clone, Copy, Debug)]
pub struct Eig3 {
    pub values: [f64; 3],
    pub vectors: [[f64; 3]; 3],
}

/// Closed-form symmetric 3x3 eigensolver (trigonometric form of the
/// characteristic cubic) with an iterative Jacobi fallback when the spectrum
/// is nearly degenerate or the analytic vectors fail a residual check.
pub fn eig3_sym(d: &[[f64; 3]; 3]) -> Eig3 {
    let mut scale: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let a = fmath::abs(d[i][j]);
            if a > scale {
                scale = a;
            }
        }
    }
    if scale == 0.0 {
        return Eig3 {
            values: [0.0; 3],
            vectors: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        };
    }
    let inv = 1.0 / scale;
    let mut b = [[0.0f64; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            b[i][j] = d[i][j] * inv;
        }
    }

    let p1 = b[0][1] * b[0][1] + b[0][2] * b[0][2] + b[1][2] * b[1][2];
    let q = (b[0][0] + b[1][1] + b[2][2]) / 3.0;
    let p2 = (b[0][0] - q) * (b[0][0] - q)
        + (b[1][1] - q) * (b[1][1] - q)
        + (b[2][2] - q) * (b[2][2] - q)
        + 2.0 * p1;
    let p = fmath::sqrt(p2 / 6.0);

    if p < 1e-14 {
        // Numerically proportional to the identity.
        return Eig3 {
            values: [q * scale; 3],
            vectors: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        };
    }

    let pinv = 1.0 / p;
    let mut m = [[0.0f64; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let qij = if i == j { q } else { 0.0 };
            m[i][j] = (b[i][j] - qij) * pinv;
        }
    }
    let mut r = linalg::mat3_det(&m) / 2.0;
    if r < -1.0 {
        r = -1.0;
    } else if r > 1.0 {
        r = 1.0;
    }
    let phi = fmath::acos(r) / 3.0;
    let two_pi_3 = 2.0 * core::f64::consts::PI / 3.0;
    let l1 = q + 2.0 * p * fmath::cos(phi);
    let l3 = q + 2.0 * p * fmath::cos(phi + two_pi_3);
    let l2 = 3.0 * q - l1 - l3;
    let vals = [l1, l2, l3];

    let gap = (l1 - l2).min(l2 - l3);
    if gap < 1e-12 {
        return jacobi3(&b, scale);
    }

    let v1 = eigvec_candidate(&b, l1);
    let v3 = eigvec_candidate(&b, l3);
    if let (Some(v1), Some(mut v3)) = (v1, v3) {
        // Orthogonalize the pair, complete with a cross product.
        let c = linalg::dot3(v3, v1);
        for k in 0..3 {
            v3[k] -= c * v1[k];
        }
        let n3 = linalg::norm3(v3);
        if n3 > 1e-8 {
            for k in 0..3 {
                v3[k] /= n3;
            }
            let v2 = linalg::cross(v3, v1);
            let vecs = [v1, v2, v3];
            let mut ok = true;
            'resid: for k in 0..3 {
                let v = vecs[k];
                for i in 0..3 {
                    let bi = b[i][0] * v[0] + b[i][1] * v[1] + b[i][2] * v[2];
                    if fmath::abs(bi - vals[k] * v[i]) > 1e-10 {
                        ok = false;
                        break 'resid;
                    }
                }
            }
            if ok {
                return Eig3 {
                    values: [l1 * scale, l2 * scale, l3 * scale],
                    vectors: vecs,
                };
            }
        }
    }
    jacobi3(&b, scale)
}

/// Best cross product of rows of `b - lambda I`; None when all are tiny.
fn eigvec_candidate(b: &[[f64; 3]; 3], lambda: f64) -> Option<[f64; 3]> {
    let mut m = *b;
    for i in 0..3 {
        m[i][i] -= lambda;
    }
    let c01 = linalg::cross(m[0], m[1]);
    let c02 = linalg::cross(m[0], m[2]);
    let c12 = linalg::cross(m[1], m[2]);
    let n01 = linalg::dot3(c01, c01);
    let n02 = linalg::dot3(c02, c02);
    let n12 = linalg::dot3(c12, c12);
    let (best, n2) = if n01 >= n02 && n01 >= n12 {
        (c01, n01)
    } else if n02 >= n12 {
        (c02, n02)
    } else {
        (c12, n12)
    };
    if n2 < 1e-24 {
        return None;
    }
    let n = fmath::sqrt(n2);
    Some([best[0] / n, best[1] / n, best[2] / n])
}

/// Cyclic Jacobi for symmetric 3x3; always converges, handles degeneracy.
fn jacobi3(b: &[[f64; 3]; 3], scale: f64) -> Eig3 {
    let mut a = *b;
    let mut v = [[1.0f64, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _sweep in 0..50 {
        let off = a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2];
        if off < 1e-30 {
            break;
        }
        for &(p, q) in &[(0usize, 1usize), (0, 2), (1, 2)] {
            let apq = a[p][q];
            if fmath::abs(apq) < 1e-300 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
            let t = if theta >= 0.0 {
                1.0 / (theta + fmath::sqrt(1.0 + theta * theta))
            } else {
                -1.0 / (-theta + fmath::sqrt(1.0 + theta * theta))
            };
            let c = 1.0 / fmath::sqrt(1.0 + t * t);
            let s = t * c;
            // A <- J^T A J
            for k in 0..3 {
                let akp = a[k][p];
                let akq = a[k][q];
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let apk = a[p][k];
                let aqk = a[q][k];
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
            for k in 0..3 {
                let vkp = v[k][p];
                let vkq = v[k][q];
                v[k][p] = c * vkp - s * vkq;
                v[k][q] = s * vkp + c * vkq;
            }
        }
    }
    let mut order = [0usize, 1, 2];
    // Sort eigenvalues descending (insertion sort on 3 elements).
    for i in 1..3 {
        let mut j = i;
        while j > 0 && a[order[j]][order[j]] > a[order[j - 1]][order[j - 1]] {
            order.swap(j, j - 1);
            j -= 1;
        }
    }
    let mut values = [0.0; 3];
    let mut vectors = [[0.0; 3]; 3];
    for (k, &o) in order.iter().enumerate() {
        values[k] = a[o][o] * scale;
        for i in 0..3 {
            vectors[k][i] = v[i][o];
        }
    }
    Eig3 { values, vectors }
}

/// Fractional anisotropy from eigenvalues, via the pairwise–difference form
/// which is exact at the extremes (1 for a rank-one tensor, 0 for isotropy).
pub fn fa_from_eigenvalues(l: [f64; 3]) -> f64 {
    let ss = l[0] * l[0] + l[1] * l[1] + l[2] * l[2];
    if ss <= 0.0 {
        return 0.0;
    }
    let d01 = l[0] - l[1];
    let d12 = l[1] - l[2];
    let d02 = l[0] - l[2];
    let fa = fmath::sqrt((d01 * d01 + d12 * d12 + d02 * d02) / (2.0 * ss));
    if fa > 1.0 {
        1.0
    } else if fa < 0.0 {
        0.0
    } else {
        fa
    }
}

/// Per-voxel model parameters over a volume, with the fitting mask.
/// Voxels outside the mask hold zeros in all channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamField {
    pub field: Field,
    pub mask: Mask,
}

impl ParamField {
    pub fn zeros(dims: Dims, mask: Mask) -> Self {
        assert_eq!(mask.dims, dims);
        ParamField {
            field: Field::zeros(dims, PARAM_CHANNELS),
            mask,
        }
    }

    pub fn new(field: Field, mask: Mask) -> Self {
        assert_eq!(field.channels, PARAM_CHANNELS);
        assert_eq!(field.dims, mask.dims);
        ParamField { field, mask }
    }

    #[inline]
    pub fn dims(&self) -> Dims {
        self.field.dims
    }

    #[inline]
    pub fn voxel(&self, v: usize) -> ParamVector {
        let s = self.field.voxel(v);
        [s[0], s[1], s[2], s[3], s[4], s[5], s[6]]
    }

    pub fn set_voxel(&mut self, v: usize, x: &ParamVector) {
        self.field.voxel_mut(v).copy_from_slice(x);
    }
}

/// The four rotation-invariant scalar maps.
#[derive(Clone, Debug)]
pub struct ScalarMaps {
    pub fa: Volume,
    pub md: Volume,
    pub ad: Volume,
    pub rd: Volume,
}

#[derive(Clone, Copy, Debug)]
pub struct MapOptions {
    /// Clamp negative eigenvalues to zero before deriving the maps.
    pub clamp_negative: bool,
}

impl Default for MapOptions {
    fn default() -> Self {
        MapOptions {
            clamp_negative: true,
        }
    }
}

/// FA, MD, AD, RD per voxel. Voxels outside the mask are zero in all maps.
pub fn scalar_maps(params: &ParamField, opts: MapOptions) -> ScalarMaps {
    let dims = params.dims();
    let n = num_voxels(dims);
    let mut fa = Volume::zeros(dims);
    let mut md = Volume::zeros(dims);
    let mut ad = Volume::zeros(dims);
    let mut rd = Volume::zeros(dims);
    for v in 0..n {
        if !params.mask.get(v) {
            continue;
        }
        let x = params.voxel(v);
        let d = tensor_from_params(&x);
        let mut l = eig3_sym(&d).values;
        if opts.clamp_negative {
            for lk in &mut l {
                if *lk < 0.0 {
                    *lk = 0.0;
                }
            }
        }
        fa.data[v] = fa_from_eigenvalues(l);
        md.data[v] = (l[0] + l[1] + l[2]) / 3.0;
        ad.data[v] = l[0];
        rd.data[v] = 0.5 * (l[1] + l[2]);
    }
    ScalarMaps { fa, md, ad, rd }
}

pub fn scalar_maps_default(params: &ParamField) -> ScalarMaps {
    scalar_maps(params, MapOptions::default())
}

/// A diffusion-weighted image series: `m = scheme.len()` signal values per
/// voxel, measurement index fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct DwiStack {
    pub dims: Dims,
    pub scheme: GradientScheme,
    pub data: Vec<f64>,
}

impl DwiStack {
    pub fn zeros(dims: Dims, scheme: GradientScheme) -> Self {
        let n = num_voxels(dims) * scheme.len();
        DwiStack {
            dims,
            scheme,
            data: alloc::vec![0.0; n],
        }
    }

    #[inline]
    pub fn n_meas(&self) -> usize {
        self.scheme.len()
    }

    #[inline]
    pub fn voxel_signals(&self, v: usize) -> &[f64] {
        let m = self.n_meas();
        &self.data[v * m..(v + 1) * m]
    }

    #[inline]
    pub fn voxel_signals_mut(&mut self, v: usize) -> &mut [f64] {
        let m = self.n_meas();
        &mut self.data[v * m..(v + 1) * m]
    }

    /// Mean of the b=0 measurements at one voxel.
    pub fn b0_mean(&self, v: usize) -> f64 {
        let mut s = 0.0;
        let mut n = 0usize;
        for (j, e) in self.scheme.entries().iter().enumerate() {
            if e.is_b0() {
                s += self.voxel_signals(v)[j];
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }

    /// Index of the first b=0 measurement, if any.
    pub fn first_b0_index(&self) -> Option<usize> {
        self.scheme.entries().iter().position(|e| e.is_b0())
    }

    /// One measurement as a scalar volume.
    pub fn volume(&self, j: usize) -> Volume {
        assert!(j < self.n_meas());
        let n = num_voxels(self.dims);
        let m = self.n_meas();
        let mut out = Vec::with_capacity(n);
        for v in 0..n {
            out.push(self.data[v * m + j]);
        }
        Volume::from_vec(self.dims, out)
    }
}
