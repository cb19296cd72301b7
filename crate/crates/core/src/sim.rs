//! Synthetic data: digital phantoms, signal synthesis, normalization,
//! Rician noise, bundled gradient schemes, and the canned experiment axes.

use crate::denoiser::{gaussian_blur_volume, CnnDenoiser, Denoiser, DnCnn, GaussianDenoiser, IdentityDenoiser};
use crate::dti::{
    scalar_maps_default, DtiError, DwiStack, GradientEntry, GradientScheme, ParamField,
    ScalarMaps, PARAM_CHANNELS,
};
use crate::estimators::{fit_field, FitMethod, FitOptions};
use crate::fmath;
use crate::metrics::{nrmse, ssim3d, MetricsError};
use crate::unroll::{run_unroll, UnrollConfig, UnrollError, UnrollOptions};
use crate::volume::{num_voxels, voxel_index, Dims, Mask, Volume};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Phantoms are ellipsoids with semi-axes at this fraction of each dimension.
/// The radially varying noise profile is normalized against the same
/// ellipsoid, so "outer" noise level is reached exactly at the mask boundary.
pub const MASK_SEMIAXIS_FRACTION: f64 = 0.45;

pub const PHANTOM_MIN_DIM: usize = 16;

/// Background isotropic diffusivity (mm^2/s).
pub const PHANTOM_ISO_DIFFUSIVITY: f64 = 0.7e-3;

/// Fiber-slab eigenvalues (mm^2/s): prolate, FA about 0.87.
pub const PHANTOM_FIBER_EIGS: [f64; 3] = [1.7e-3, 0.2e-3, 0.2e-3];

#[derive(Clone, Debug, PartialEq)]
pub enum SimError {
    PhantomTooSmall { dims: Dims },
    NoB0,
    ZeroScale,
    UnsupportedDirectionCount { n: usize },
    BadBValue { b: f64 },
    BadCustomDirections,
    Dti(DtiError),
    Unroll(UnrollError),
    Metrics(MetricsError),
}

impl fmt::Display for SimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimError::PhantomTooSmall { dims } => write!(
                f,
                "phantom dims {}x{}x{} too small; every side must be at least {}",
                dims[0], dims[1], dims[2], PHANTOM_MIN_DIM
            ),
            SimError::NoB0 => write!(f, "stack has no b=0 volume to normalize against"),
            SimError::ZeroScale => write!(f, "b=0 99th percentile is zero; cannot normalize"),
            SimError::UnsupportedDirectionCount { n } => {
                write!(f, "no bundled direction table with {n} directions")
            }
            SimError::BadBValue { b } => write!(f, "b-value {b} must be positive and finite"),
            SimError::BadCustomDirections => write!(f, "custom directions must be nonzero 3-vectors"),
            SimError::Dti(e) => write!(f, "{e}"),
            SimError::Unroll(e) => write!(f, "{e}"),
            SimError::Metrics(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for SimError {}

impl From<DtiError> for SimError {
    fn from(e: DtiError) -> Self {
        SimError::Dti(e)
    }
}
impl From<UnrollError> for SimError {
    fn from(e: UnrollError) -> Self {
        SimError::Unroll(e)
    }
}
impl From<MetricsError> for SimError {
    fn from(e: MetricsError) -> Self {
        SimError::Metrics(e)
    }
}

/// SplitMix64; decorrelates derived seeds.
pub fn mix64(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Smooth zero-mean texture in [-1, 1]: blurred white noise, peak-normalized.
fn smooth_texture(dims: Dims, sigma: f64, rng: &mut ChaCha8Rng) -> Volume {
    let mut v = Volume::zeros(dims);
    for x in &mut v.data {
        *x = rng.gen_range(-1.0..1.0);
    }
    let mut b = gaussian_blur_volume(&v, sigma);
    let peak = b
        .data
        .iter()
        .fold(0.0f64, |acc, &x| if x.abs() > acc { x.abs() } else { acc });
    if peak > 0.0 {
        for x in &mut b.data {
            *x /= peak;
        }
    }
    b
}

#[derive(Clone, Debug)]
pub struct Phantom {
    pub params: ParamField,
}

/// Deterministic digital phantom: an ellipsoidal "tissue" mask holding an
/// isotropic background (MD near [`PHANTOM_ISO_DIFFUSIVITY`], FA = 0) and two
/// prolate fiber slabs with seed-dependent placement and in-plane
/// orientations. `ln s0` varies smoothly a few percent below zero so
/// normalized signals stay near unity.
pub fn make_phantom(dims: Dims, seed: u64) -> Result<Phantom, SimError> {
    if dims.iter().any(|&d| d < PHANTOM_MIN_DIM) {
        return Err(SimError::PhantomTooSmall { dims });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed, 0xF0));
    let n = num_voxels(dims);

    let center: [f64; 3] = core::array::from_fn(|k| (dims[k] as f64 - 1.0) / 2.0);
    let semi: [f64; 3] = core::array::from_fn(|k| MASK_SEMIAXIS_FRACTION * dims[k] as f64);
    let mut mask_data = vec![false; n];
    for i0 in 0..dims[0] {
        for i1 in 0..dims[1] {
            for i2 in 0..dims[2] {
                let r2 = [(i0, 0), (i1, 1), (i2, 2)]
                    .iter()
                    .map(|&(i, k)| {
                        let d = (i as f64 - center[k]) / semi[k];
                        d * d
                    })
                    .sum::<f64>();
                mask_data[voxel_index(dims, i0, i1, i2)] = r2 <= 1.0;
            }
        }
    }
    let mask = Mask::from_vec(dims, mask_data);

    // Seeded geometry: two slabs along axis 0, distinct in-plane fiber axes.
    let jitter = |rng: &mut ChaCha8Rng| rng.gen_range(-0.03..0.03);
    let slab_a = (0.20 + jitter(&mut rng), 0.40 + jitter(&mut rng));
    let slab_b = (0.60 + jitter(&mut rng), 0.80 + jitter(&mut rng));
    let theta_a = rng.gen_range(0.0..core::f64::consts::PI);
    let theta_b = theta_a + core::f64::consts::FRAC_PI_2 + rng.gen_range(-0.3..0.3);
    let axis_of = |theta: f64| [0.0, fmath::cos(theta), fmath::sin(theta)];
    let (ua, ub) = (axis_of(theta_a), axis_of(theta_b));

    let s0_tex = smooth_texture(dims, 3.0, &mut rng);
    let md_tex = smooth_texture(dims, 3.0, &mut rng);

    let mut pf = ParamField::zeros(dims, mask);
    let (l1, l23) = (PHANTOM_FIBER_EIGS[0], PHANTOM_FIBER_EIGS[1]);
    for i0 in 0..dims[0] {
        let frac = i0 as f64 / dims[0] as f64;
        for i1 in 0..dims[1] {
            for i2 in 0..dims[2] {
                let v = voxel_index(dims, i0, i1, i2);
                if !pf.mask.get(v) {
                    continue;
                }
                let ln_s0 = -0.05 + 0.06 * s0_tex.data[v];
                let x: [f64; PARAM_CHANNELS] = if frac >= slab_a.0 && frac < slab_a.1 {
                    fiber_params(ln_s0, ua, l1, l23)
                } else if frac >= slab_b.0 && frac < slab_b.1 {
                    fiber_params(ln_s0, ub, l1, l23)
                } else {
                    let d = PHANTOM_ISO_DIFFUSIVITY * (1.0 + 0.05 * md_tex.data[v]);
                    [ln_s0, d, d, d, 0.0, 0.0, 0.0]
                };
                pf.set_voxel(v, &x);
            }
        }
    }
    Ok(Phantom { params: pf })
}

fn fiber_params(ln_s0: f64, u: [f64; 3], l1: f64, l23: f64) -> [f64; PARAM_CHANNELS] {
    // D = l23 I + (l1 - l23) u u^T
    let d = |i: usize, j: usize| {
        let id = if i == j { l23 } else { 0.0 };
        id + (l1 - l23) * u[i] * u[j]
    };
    [ln_s0, d(0, 0), d(1, 1), d(2, 2), d(0, 1), d(1, 2), d(0, 2)]
}

/// Noise-free signals from the model; voxels outside the mask stay zero.
pub fn synthesize_dwi(params: &ParamField, scheme: &GradientScheme) -> DwiStack {
    let a = crate::dti::build_design_matrix(scheme);
    let mut stack = DwiStack::zeros(params.dims(), scheme.clone());
    let m = scheme.len();
    let n = num_voxels(params.dims());
    for v in 0..n {
        if !params.mask.get(v) {
            continue;
        }
        let x = params.voxel(v);
        let sigs = crate::dti::predict_signals(&x, &a);
        stack.data[v * m..(v + 1) * m].copy_from_slice(&sigs);
    }
    stack
}

/// Nearest-rank 99th percentile: the `ceil(0.99 n)`-th smallest value.
fn percentile99(values: &[f64]) -> f64 {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let k = {
        let k = fmath::ceil(0.99 * n as f64) as usize;
        if k == 0 {
            1
        } else if k > n {
            n
        } else {
            k
        }
    };
    sorted[k - 1]
}

/// Divide the whole stack by the 99th percentile of its first b=0 volume.
/// Returns the normalized stack and the scale that was divided out.
pub fn normalize_p99(stack: &DwiStack) -> Result<(DwiStack, f64), SimError> {
    let j0 = stack.first_b0_index().ok_or(SimError::NoB0)?;
    let b0 = stack.volume(j0);
    let scale = percentile99(&b0.data);
    if !(scale > 0.0) {
        return Err(SimError::ZeroScale);
    }
    let mut out = stack.clone();
    let inv = 1.0 / scale;
    for v in &mut out.data {
        *v *= inv;
    }
    Ok((out, scale))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseKind {
    /// One sigma everywhere.
    Stationary { sigma: f64 },
    /// Sigma varies linearly with the normalized ellipsoidal radius:
    /// `sigma_inner` at the center, `sigma_outer` at the mask boundary
    /// (radius clamped to 1 beyond it).
    RadialLinear { sigma_outer: f64, sigma_inner: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub seed: u64,
}

pub(crate) fn radial_sigma(dims: Dims, v: usize, outer: f64, inner: f64) -> f64 {
    let i2 = v % dims[2];
    let i1 = (v / dims[2]) % dims[1];
    let i0 = v / (dims[1] * dims[2]);
    let mut r2 = 0.0;
    for (i, k) in [(i0, 0), (i1, 1), (i2, 2)] {
        let c = (dims[k] as f64 - 1.0) / 2.0;
        let a = MASK_SEMIAXIS_FRACTION * dims[k] as f64;
        let d = (i as f64 - c) / a;
        r2 += d * d;
    }
    let r = fmath::sqrt(r2).min(1.0);
    // Two-coefficient form so both endpoints are hit exactly.
    outer * r + inner * (1.0 - r)
}

/// Rician corruption: `m = sqrt((s + n1)^2 + n2^2)` with `n1, n2` i.i.d.
/// `N(0, sigma^2)`. Every (voxel, measurement) pair draws from its own
/// counter-seeded stream, so the result is independent of traversal order
/// and bitwise reproducible for a given spec. `sigma = 0` copies the input.
pub fn add_rician_noise(stack: &DwiStack, spec: &NoiseSpec) -> DwiStack {
    let mut out = stack.clone();
    let m = stack.n_meas();
    let n = num_voxels(stack.dims);
    let apply = |v: usize, sigs: &mut [f64]| {
        let sigma = match spec.kind {
            NoiseKind::Stationary { sigma } => sigma,
            NoiseKind::RadialLinear {
                sigma_outer,
                sigma_inner,
            } => radial_sigma(stack.dims, v, sigma_outer, sigma_inner),
        };
        if sigma == 0.0 {
            return;
        }
        for (j, s) in sigs.iter_mut().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(mix64(spec.seed, (v * m + j) as u64));
            let n1: f64 = rng.sample(StandardNormal);
            let n2: f64 = rng.sample(StandardNormal);
            let re = *s + sigma * n1;
            let im = sigma * n2;
            *s = fmath::sqrt(re * re + im * im);
        }
    };
    #[cfg(feature = "rayon")]
    {
        use rayon::prelude::*;
        out.data
            .par_chunks_mut(m)
            .enumerate()
            .for_each(|(v, sigs)| apply(v, sigs));
    }
    #[cfg(not(feature = "rayon"))]
    {
        for (v, sigs) in out.data.chunks_mut(m).enumerate() {
            apply(v, sigs);
        }
    }
    let _ = n;
    out
}

// ---- bundled direction tables ----

static DSM6: &str = include_str!("../data/dsm6.txt");
static JONES6: &str = include_str!("../data/jones6.txt");
static JONES07: &str = include_str!("../data/jones07.txt");
static JONES15: &str = include_str!("../data/jones15.txt");
static JONES25: &str = include_str!("../data/jones25.txt");
static JONES36: &str = include_str!("../data/jones36.txt");
static JONES46: &str = include_str!("../data/jones46.txt");
static JONES64: &str = include_str!("../data/jones64.txt");

/// Direction counts available for the `jones-N` family.
pub const JONES_COUNTS: [usize; 6] = [7, 15, 25, 36, 46, 64];

fn parse_direction_table(text: &str) -> Vec<[f64; 3]> {
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let x: f64 = it.next().unwrap().parse().unwrap();
        let y: f64 = it.next().unwrap().parse().unwrap();
        let z: f64 = it.next().unwrap().parse().unwrap();
        let n = fmath::sqrt(x * x + y * y + z * z);
        out.push([x / n, y / n, z / n]);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub enum SchemeKind {
    /// Condition-number-optimal 6-direction set (icosahedral vertices).
    Dsm6,
    /// Energy-minimized 6-direction set.
    Jones6,
    /// Energy-minimized N-direction set, N in [`JONES_COUNTS`].
    JonesN,
    /// Caller-provided directions (normalized here).
    Custom(Vec<[f64; 3]>),
}

/// Build a scheme: `n_b0` b=0 entries followed by `n_dw` weighted
/// directions at b-value `b`, optionally rotated about z by `rot_z_deg`.
pub fn make_scheme(
    kind: &SchemeKind,
    n_dw: usize,
    n_b0: usize,
    b: f64,
    rot_z_deg: f64,
) -> Result<GradientScheme, SimError> {
    if !(b > 0.0) || !b.is_finite() {
        return Err(SimError::BadBValue { b });
    }
    let dirs: Vec<[f64; 3]> = match kind {
        SchemeKind::Dsm6 => {
            if n_dw != 6 {
                return Err(SimError::UnsupportedDirectionCount { n: n_dw });
            }
            parse_direction_table(DSM6)
        }
        SchemeKind::Jones6 => {
            if n_dw != 6 {
                return Err(SimError::UnsupportedDirectionCount { n: n_dw });
            }
            parse_direction_table(JONES6)
        }
        SchemeKind::JonesN => match n_dw {
            7 => parse_direction_table(JONES07),
            15 => parse_direction_table(JONES15),
            25 => parse_direction_table(JONES25),
            36 => parse_direction_table(JONES36),
            46 => parse_direction_table(JONES46),
            64 => parse_direction_table(JONES64),
            _ => return Err(SimError::UnsupportedDirectionCount { n: n_dw }),
        },
        SchemeKind::Custom(dirs) => {
            if dirs.len() != n_dw || n_dw == 0 {
                return Err(SimError::BadCustomDirections);
            }
            let mut out = Vec::with_capacity(dirs.len());
            for d in dirs {
                let n = crate::linalg::norm3(*d);
                if !(n > 1e-12) || !n.is_finite() {
                    return Err(SimError::BadCustomDirections);
                }
                out.push([d[0] / n, d[1] / n, d[2] / n]);
            }
            out
        }
    };
    debug_assert_eq!(dirs.len(), n_dw);

    let rad = rot_z_deg * core::f64::consts::PI / 180.0;
    let (s, c) = (fmath::sin(rad), fmath::cos(rad));
    let mut entries = Vec::with_capacity(n_b0 + n_dw);
    for _ in 0..n_b0 {
        entries.push(GradientEntry {
            b: 0.0,
            g: [0.0, 0.0, 0.0],
        });
    }
    for g in dirs {
        let rg = [c * g[0] - s * g[1], s * g[0] + c * g[1], g[2]];
        entries.push(GradientEntry { b, g: rg });
    }
    Ok(GradientScheme::new(entries)?)
}

// ---- experiment harness ----

/// Denoiser choice for the unrolled solver inside an experiment.
#[derive(Clone)]
pub enum DenoiserSpec {
    Identity,
    Gaussian { sigma: f64 },
    Cnn(DnCnn),
}

impl DenoiserSpec {
    pub fn build(&self) -> alloc::boxed::Box<dyn Denoiser + Sync> {
        match self {
            DenoiserSpec::Identity => alloc::boxed::Box::new(IdentityDenoiser),
            DenoiserSpec::Gaussian { sigma } => alloc::boxed::Box::new(GaussianDenoiser {
                sigma_voxels: *sigma,
            }),
            DenoiserSpec::Cnn(net) => alloc::boxed::Box::new(CnnDenoiser { net: net.clone() }),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            DenoiserSpec::Identity => "identity",
            DenoiserSpec::Gaussian { .. } => "gaussian",
            DenoiserSpec::Cnn(_) => "cnn",
        }
    }
}

/// A fitting method to compare in an experiment.
#[derive(Clone)]
pub enum MethodSpec {
    Lls,
    Wlls { iters: usize },
    Dodti { denoiser: DenoiserSpec, cfg: UnrollConfig },
}

impl MethodSpec {
    pub fn label(&self) -> String {
        match self {
            MethodSpec::Lls => String::from("lls"),
            MethodSpec::Wlls { .. } => String::from("wlls"),
            MethodSpec::Dodti { denoiser, .. } => format!("dodti-{}", denoiser.label()),
        }
    }

    /// Fit a stack with this method using the given mask.
    pub fn fit(&self, stack: &DwiStack, mask: &Mask) -> Result<ParamField, SimError> {
        match self {
            MethodSpec::Lls => {
                let (pf, _) = fit_field(
                    stack,
                    FitMethod::Lls,
                    &FitOptions {
                        mask: Some(mask.clone()),
                        ..Default::default()
                    },
                )?;
                Ok(pf)
            }
            MethodSpec::Wlls { iters } => {
                let (pf, _) = fit_field(
                    stack,
                    FitMethod::Wlls { iters: *iters },
                    &FitOptions {
                        mask: Some(mask.clone()),
                        ..Default::default()
                    },
                )?;
                Ok(pf)
            }
            MethodSpec::Dodti { denoiser, cfg } => {
                let den = denoiser.build();
                let run = run_unroll(
                    stack,
                    cfg,
                    den.as_ref(),
                    &UnrollOptions {
                        mask: Some(mask.clone()),
                        ..Default::default()
                    },
                )?;
                Ok(run.params)
            }
        }
    }
}

/// What the experiment sweeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentAxis {
    /// b in {800, 1000, 1200} s/mm^2 on the 6-direction optimal scheme.
    BValue,
    /// Five 6-direction schemes: the optimal set, three z-rotations of it,
    /// and the energy-minimized set.
    Directions6,
    /// Direction count in {7, 15, 25, 36}.
    NDw,
    /// Stationary noise sigma in {0.01, 0.02, 0.03, 0.04}.
    Noise,
    /// Radially varying noise, 0.01 at the edge rising to 0.04 centrally.
    VarNoise,
}

impl ExperimentAxis {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentAxis::BValue => "b-value",
            ExperimentAxis::Directions6 => "directions-6",
            ExperimentAxis::NDw => "n-dw",
            ExperimentAxis::Noise => "noise",
            ExperimentAxis::VarNoise => "var-noise",
        }
    }
}

#[derive(Clone)]
pub struct ExperimentConfig {
    pub axis: ExperimentAxis,
    pub methods: Vec<MethodSpec>,
    pub dims: Dims,
    pub seed: u64,
    pub trials: usize,
}

/// One aggregated table cell: mean over trials.
#[derive(Clone, Debug)]
pub struct ExperimentRow {
    pub axis_value: String,
    pub method: String,
    pub map: String,
    pub nrmse: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub axis: ExperimentAxis,
    pub trials: usize,
    pub rows: Vec<ExperimentRow>,
}

const DEFAULT_B: f64 = 1000.0;
const DEFAULT_SIGMA: f64 = 0.03;

struct AxisPoint {
    label: String,
    scheme: GradientScheme,
    noise: NoiseKind,
}

fn axis_points(axis: ExperimentAxis) -> Result<Vec<AxisPoint>, SimError> {
    let stationary = NoiseKind::Stationary {
        sigma: DEFAULT_SIGMA,
    };
    let mut points = Vec::new();
    match axis {
        ExperimentAxis::BValue => {
            for b in [800.0, 1000.0, 1200.0] {
                points.push(AxisPoint {
                    label: format!("{b:.0}"),
                    scheme: make_scheme(&SchemeKind::Dsm6, 6, 1, b, 0.0)?,
                    noise: stationary,
                });
            }
        }
        ExperimentAxis::Directions6 => {
            for rot in [0.0, 30.0, 60.0, 90.0] {
                points.push(AxisPoint {
                    label: format!("dsm-rot{rot:.0}"),
                    scheme: make_scheme(&SchemeKind::Dsm6, 6, 1, DEFAULT_B, rot)?,
                    noise: stationary,
                });
            }
            points.push(AxisPoint {
                label: String::from("jones6"),
                scheme: make_scheme(&SchemeKind::Jones6, 6, 1, DEFAULT_B, 0.0)?,
                noise: stationary,
            });
        }
        ExperimentAxis::NDw => {
            for n in [7usize, 15, 25, 36] {
                points.push(AxisPoint {
                    label: format!("{n}"),
                    scheme: make_scheme(&SchemeKind::JonesN, n, 1, DEFAULT_B, 0.0)?,
                    noise: stationary,
                });
            }
        }
        ExperimentAxis::Noise => {
            for sigma in [0.01, 0.02, 0.03, 0.04] {
                points.push(AxisPoint {
                    label: format!("{sigma:.2}"),
                    scheme: make_scheme(&SchemeKind::Dsm6, 6, 1, DEFAULT_B, 0.0)?,
                    noise: NoiseKind::Stationary { sigma },
                });
            }
        }
        ExperimentAxis::VarNoise => {
            points.push(AxisPoint {
                label: String::from("radial-0.01-0.04"),
                scheme: make_scheme(&SchemeKind::Dsm6, 6, 1, DEFAULT_B, 0.0)?,
                noise: NoiseKind::RadialLinear {
                    sigma_outer: 0.01,
                    sigma_inner: 0.04,
                },
            });
        }
    }
    Ok(points)
}

/// Run one experiment axis: phantom -> synthesize -> normalize -> noise ->
/// fit with every method -> scalar maps -> masked NRMSE and SSIM against the
/// ground truth, averaged over trials.
///
/// All methods are evaluated inside the ground-truth phantom mask so the
/// comparison region is identical across methods and noise levels.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult, SimError> {
    let phantom = make_phantom(cfg.dims, cfg.seed)?;
    let gt_maps = scalar_maps_default(&phantom.params);
    let mask = phantom.params.mask.clone();
    let points = axis_points(cfg.axis)?;
    let trials = if cfg.trials == 0 { 1 } else { cfg.trials };

    let mut rows = Vec::new();
    for (pi, point) in points.iter().enumerate() {
        let clean = synthesize_dwi(&phantom.params, &point.scheme);
        let (normalized, _scale) = normalize_p99(&clean)?;
        // Accumulators: method x map.
        let mut acc: Vec<[(f64, f64); 4]> = vec![[(0.0, 0.0); 4]; cfg.methods.len()];
        for trial in 0..trials {
            let spec = NoiseSpec {
                kind: point.noise,
                seed: mix64(cfg.seed, 0xA000 + (pi * 1000 + trial) as u64),
            };
            let noisy = add_rician_noise(&normalized, &spec);
            for (mi, method) in cfg.methods.iter().enumerate() {
                let pf = method.fit(&noisy, &mask)?;
                let maps = scalar_maps_default(&pf);
                for (mapi, (est, reference)) in map_pairs(&maps, &gt_maps).into_iter().enumerate()
                {
                    let e = nrmse(est, reference, &mask)?;
                    let s = ssim3d(est, reference, &mask)?;
                    acc[mi][mapi].0 += e;
                    acc[mi][mapi].1 += s;
                }
            }
        }
        for (mi, method) in cfg.methods.iter().enumerate() {
            for (mapi, name) in ["fa", "md", "ad", "rd"].iter().enumerate() {
                rows.push(ExperimentRow {
                    axis_value: point.label.clone(),
                    method: method.label(),
                    map: String::from(*name),
                    nrmse: acc[mi][mapi].0 / trials as f64,
                    ssim: acc[mi][mapi].1 / trials as f64,
                });
            }
        }
    }
    Ok(ExperimentResult {
        axis: cfg.axis,
        trials,
        rows,
    })
}

fn map_pairs<'a>(est: &'a ScalarMaps, reference: &'a ScalarMaps) -> [(&'a Volume, &'a Volume); 4] {
    [
        (&est.fa, &reference.fa),
        (&est.md, &reference.md),
        (&est.ad, &reference.ad),
        (&est.rd, &reference.rd),
    ]
}
