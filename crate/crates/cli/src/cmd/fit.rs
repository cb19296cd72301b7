use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use dodti_core::denoiser::{CnnDenoiser, Denoiser, GaussianDenoiser, IdentityDenoiser};
use dodti_core::dti::{scalar_maps_default, DwiStack, ParamField};
use dodti_core::estimators::{
    default_mask, estimate_noise_sigma, fit_field, FitMethod, FitOptions, FitReport,
    DEFAULT_MASK_B0_THRESHOLD,
};
use dodti_core::unroll::{adaptive_lambda, run_unroll, UnrollConfig, UnrollOptions};
use dodti_core::volume::Mask;

use crate::bridge;
use crate::checkpoint::load_checkpoint;
use crate::cmd::ensure_dir;
use crate::errors::CliError;
use crate::gradients;
use crate::nifti;

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum MethodArg {
    Lls,
    Wlls,
    Dodti,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum DenoiserArg {
    Identity,
    Gaussian,
    Cnn,
}

pub const CHANNEL_ORDER_HELP: &str = "Parameter volumes are always ordered \
(ln S0, D11, D22, D33, D12, D23, D13) along the 4th dimension.";

#[derive(clap::Args)]
#[command(after_help = CHANNEL_ORDER_HELP)]
pub struct FitArgs {
    /// Input DWI stack (.nii or .nii.gz, 4-D).
    #[arg(long)]
    pub dwi: PathBuf,

    #[arg(long)]
    pub bvals: PathBuf,

    #[arg(long)]
    pub bvecs: PathBuf,

    /// Fitting mask volume; derived from the b0 signal when omitted.
    #[arg(long)]
    pub mask: Option<PathBuf>,

    #[arg(long, value_enum, default_value_t = MethodArg::Wlls)]
    pub method: MethodArg,

    /// Reweighting passes for --method wlls (0 = plain LLS weights once).
    #[arg(long, default_value_t = dodti_core::estimators::IWLLS_DEFAULT_ITERS)]
    pub iters: usize,

    /// Denoiser for --method dodti.
    #[arg(long, value_enum, default_value_t = DenoiserArg::Identity)]
    pub denoiser: DenoiserArg,

    /// Trained checkpoint (required for --denoiser cnn).
    #[arg(long)]
    pub weights: Option<PathBuf>,

    /// Gaussian denoiser width in voxels.
    #[arg(long, default_value_t = 1.0)]
    pub gauss_sigma: f64,

    /// Override the coupling strength rho.
    #[arg(long)]
    pub rho: Option<f64>,

    /// Override the prior strength lambda (also disables the noise-adaptive
    /// rescale for --denoiser cnn).
    #[arg(long)]
    pub lambda: Option<f64>,

    /// Use the checkpoint's prior strength as-is instead of rescaling it by
    /// the estimated noise level (--denoiser cnn only).
    #[arg(long)]
    pub no_adapt: bool,

    /// Override the number of unrolled stages.
    #[arg(long)]
    pub ns: Option<usize>,

    /// Override the fixed-point iterations per stage.
    #[arg(long)]
    pub nt: Option<usize>,

    /// Output directory (params.nii.gz, fa/md/ad/rd.nii.gz, mask.nii.gz,
    /// fit.json).
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Serialize)]
struct FitMeta {
    method: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    denoiser: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ns: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    nt: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma_est: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda_base: Option<f64>,
    mask_voxels: usize,
    n_fitted: usize,
    n_failures: usize,
    elapsed_sec: f64,
}

pub fn load_stack(
    dwi: &Path,
    bvals: &Path,
    bvecs: &Path,
) -> Result<(DwiStack, nifti::NiftiImage), CliError> {
    let img = nifti::read_volume(dwi)?;
    let scheme = gradients::read_gradients(bvals, bvecs)?;
    let stack = bridge::image_to_stack(&img, scheme)?;
    Ok((stack, img))
}

fn load_mask(path: &Path, stack_dims: [usize; 3]) -> Result<Mask, CliError> {
    let img = nifti::read_volume(path)?;
    let mask = bridge::image_to_mask(&img, "mask")?;
    if mask.dims != stack_dims {
        return Err(CliError::Data(format!(
            "mask dims {:?} do not match stack dims {:?}",
            mask.dims, stack_dims
        )));
    }
    Ok(mask)
}

struct DodtiSetup {
    cfg: UnrollConfig,
    denoiser: Box<dyn Denoiser + Sync>,
    label: &'static str,
    sigma_est: Option<f64>,
    lambda_base: Option<f64>,
}

fn dodti_setup(args: &FitArgs) -> Result<DodtiSetup, CliError> {
    let (mut cfg, denoiser, label): (UnrollConfig, Box<dyn Denoiser + Sync>, &'static str) =
        match args.denoiser {
            DenoiserArg::Identity => (UnrollConfig::default(), Box::new(IdentityDenoiser), "identity"),
            DenoiserArg::Gaussian => (
                UnrollConfig::default(),
                Box::new(GaussianDenoiser {
                    sigma_voxels: args.gauss_sigma,
                }),
                "gaussian",
            ),
            DenoiserArg::Cnn => {
                let path = args.weights.as_ref().ok_or_else(|| {
                    CliError::Usage("--denoiser cnn requires --weights <checkpoint>".into())
                })?;
                let ck = load_checkpoint(path)?;
                let cfg = ck.model.unroll_config(ck.ns, ck.nt);
                (cfg, Box::new(CnnDenoiser { net: ck.model.net }), "cnn")
            }
        };
    if let Some(rho) = args.rho {
        cfg.rho = rho;
    }
    if let Some(lambda) = args.lambda {
        cfg.lambda = lambda;
    }
    if let Some(ns) = args.ns {
        cfg.ns = ns;
    }
    if let Some(nt) = args.nt {
        cfg.nt = nt;
    }
    Ok(DodtiSetup {
        cfg,
        denoiser,
        label,
        sigma_est: None,
        lambda_base: None,
    })
}

/// A checkpoint's prior strength is calibrated for one noise level; the
/// weighted data term it balances against scales with 1/sigma^2. Rescale
/// lambda accordingly from a noise estimate on this stack, unless the user
/// pinned lambda explicitly or asked not to.
fn adapt_lambda(setup: &mut DodtiSetup, args: &FitArgs, stack: &DwiStack, mask: &Option<Mask>) {
    if setup.label != "cnn" || args.no_adapt || args.lambda.is_some() {
        return;
    }
    let eff = match mask {
        Some(m) => m.clone(),
        None => default_mask(stack, DEFAULT_MASK_B0_THRESHOLD),
    };
    if let Some(sigma) = estimate_noise_sigma(stack, &eff) {
        setup.sigma_est = Some(sigma);
        setup.lambda_base = Some(setup.cfg.lambda);
        setup.cfg.lambda = adaptive_lambda(setup.cfg.lambda, sigma);
    }
}

pub fn run(args: &FitArgs) -> Result<(), CliError> {
    let (stack, img) = load_stack(&args.dwi, &args.bvals, &args.bvecs)?;
    let mask = match &args.mask {
        Some(p) => Some(load_mask(p, stack.dims)?),
        None => None,
    };

    let start = Instant::now();
    let (params, report, setup): (ParamField, FitReport, Option<DodtiSetup>) =
        match args.method {
            MethodArg::Lls => {
                let (p, r) = fit_field(
                    &stack,
                    FitMethod::Lls,
                    &FitOptions {
                        mask,
                        ..Default::default()
                    },
                )?;
                (p, r, None)
            }
            MethodArg::Wlls => {
                let (p, r) = fit_field(
                    &stack,
                    FitMethod::Wlls { iters: args.iters },
                    &FitOptions {
                        mask,
                        ..Default::default()
                    },
                )?;
                (p, r, None)
            }
            MethodArg::Dodti => {
                let mut setup = dodti_setup(args)?;
                adapt_lambda(&mut setup, args, &stack, &mask);
                let run = run_unroll(
                    &stack,
                    &setup.cfg,
                    setup.denoiser.as_ref(),
                    &UnrollOptions {
                        mask,
                        ..Default::default()
                    },
                )
                .map_err(|e| CliError::Numerical(e.to_string()))?;
                (run.params, run.report, Some(setup))
            }
        };
    let elapsed = start.elapsed().as_secs_f64();

    let mask_voxels = params.mask.count();
    if mask_voxels > 0 && report.n_fitted == 0 {
        return Err(CliError::Numerical(format!(
            "no voxel could be fitted ({} in mask)",
            mask_voxels
        )));
    }

    ensure_dir(&args.out_dir)?;
    write_outputs(&args.out_dir, &params, Some(&img))?;

    let method_name = match args.method {
        MethodArg::Lls => "lls",
        MethodArg::Wlls => "wlls",
        MethodArg::Dodti => "dodti",
    };
    let meta = match &setup {
        Some(setup) => FitMeta {
            method: method_name.into(),
            denoiser: Some(setup.label.into()),
            rho: Some(setup.cfg.rho),
            lambda: Some(setup.cfg.lambda),
            ns: Some(setup.cfg.ns),
            nt: Some(setup.cfg.nt),
            sigma_est: setup.sigma_est,
            lambda_base: setup.lambda_base,
            mask_voxels,
            n_fitted: report.n_fitted,
            n_failures: report.failures.len(),
            elapsed_sec: elapsed,
        },
        None => FitMeta {
            method: method_name.into(),
            denoiser: None,
            rho: None,
            lambda: None,
            ns: None,
            nt: None,
            sigma_est: None,
            lambda_base: None,
            mask_voxels,
            n_fitted: report.n_fitted,
            n_failures: report.failures.len(),
            elapsed_sec: elapsed,
        },
    };
    std::fs::write(
        args.out_dir.join("fit.json"),
        serde_json::to_string_pretty(&meta)? + "\n",
    )?;

    eprintln!(
        "{method_name}: fitted {}/{} voxels in {elapsed:.2}s -> {}",
        report.n_fitted,
        mask_voxels,
        args.out_dir.display()
    );
    Ok(())
}

/// Parameter volumes (ln S0, D11, D22, D33, D12, D23, D13) plus the four
/// scalar maps and the effective mask, all in the input stack's geometry.
pub fn write_outputs(
    out_dir: &Path,
    params: &ParamField,
    geometry: Option<&nifti::NiftiImage>,
) -> Result<(), CliError> {
    let place = |img: nifti::NiftiImage| match geometry {
        Some(tpl) => img.with_geometry_of(tpl),
        None => img,
    };
    nifti::write_volume(
        &place(bridge::field_to_image(&params.field)),
        &out_dir.join("params.nii.gz"),
    )?;
    let maps = scalar_maps_default(params);
    for (name, vol) in [
        ("fa", &maps.fa),
        ("md", &maps.md),
        ("ad", &maps.ad),
        ("rd", &maps.rd),
    ] {
        nifti::write_volume(
            &place(bridge::volume_to_image(vol)),
            &out_dir.join(format!("{name}.nii.gz")),
        )?;
    }
    nifti::write_volume(
        &place(bridge::mask_to_image(&params.mask)),
        &out_dir.join("mask.nii.gz"),
    )?;
    Ok(())
}
