use std::path::PathBuf;

use serde::Serialize;

use dodti_core::sim::{
    add_rician_noise, make_phantom, mix64, normalize_p99, synthesize_dwi, NoiseKind, NoiseSpec,
    SimError,
};

use crate::bridge;
use crate::cmd::{ensure_dir, parse_dims, SchemeSource};
use crate::errors::CliError;
use crate::gradients;
use crate::nifti;

#[derive(clap::Args)]
pub struct SimulateArgs {
    /// Phantom size: one number for a cube or X,Y,Z.
    #[arg(long, default_value = "32", value_parser = parse_dims)]
    pub dims: [usize; 3],

    #[command(flatten)]
    pub source: SchemeSource,

    /// Stationary Rician noise level (on p99-normalized signals).
    #[arg(long, conflicts_with_all = ["sigma_outer", "sigma_inner"])]
    pub sigma: Option<f64>,

    /// Radially varying noise: level at the mask edge...
    #[arg(long, requires = "sigma_inner")]
    pub sigma_outer: Option<f64>,

    /// ...rising linearly to this level at the center.
    #[arg(long, requires = "sigma_outer")]
    pub sigma_inner: Option<f64>,

    /// Output directory (dwi.nii.gz, bvals, bvecs, mask.nii.gz, gt.nii.gz,
    /// meta.json).
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum NoiseMeta {
    None,
    Stationary { sigma: f64 },
    RadialLinear { sigma_outer: f64, sigma_inner: f64 },
}

#[derive(Serialize)]
struct SimMeta {
    dims: [usize; 3],
    seed: u64,
    /// p99 normalization divisor applied to the noise-free signals.
    scale: f64,
    noise: NoiseMeta,
    n_b0: usize,
    n_dw: usize,
}

fn map_sim_err(e: SimError) -> CliError {
    match e {
        SimError::PhantomTooSmall { .. } => CliError::Usage(e.to_string()),
        SimError::ZeroScale => CliError::Numerical(e.to_string()),
        other => CliError::Data(other.to_string()),
    }
}

pub fn run(args: &SimulateArgs, seed: u64) -> Result<(), CliError> {
    let scheme = args.source.resolve()?;
    let phantom = make_phantom(args.dims, seed).map_err(map_sim_err)?;
    let clean = synthesize_dwi(&phantom.params, &scheme);
    let (normalized, scale) = normalize_p99(&clean).map_err(map_sim_err)?;

    let (stack, noise_meta) = match (args.sigma, args.sigma_outer, args.sigma_inner) {
        (Some(sigma), _, _) => {
            let spec = NoiseSpec {
                kind: NoiseKind::Stationary { sigma },
                seed: mix64(seed, 0xD1),
            };
            (add_rician_noise(&normalized, &spec), NoiseMeta::Stationary { sigma })
        }
        (None, Some(sigma_outer), Some(sigma_inner)) => {
            let spec = NoiseSpec {
                kind: NoiseKind::RadialLinear {
                    sigma_outer,
                    sigma_inner,
                },
                seed: mix64(seed, 0xD1),
            };
            (
                add_rician_noise(&normalized, &spec),
                NoiseMeta::RadialLinear {
                    sigma_outer,
                    sigma_inner,
                },
            )
        }
        _ => (normalized, NoiseMeta::None),
    };

    // Ground truth matching the normalized signals: ln S0 shifts by -ln(scale)
    // inside the mask.
    let mut gt = phantom.params.clone();
    let shift = scale.ln();
    for v in 0..dodti_core::volume::num_voxels(gt.field.dims) {
        if gt.mask.get(v) {
            gt.field.voxel_mut(v)[0] -= shift;
        }
    }

    ensure_dir(&args.out_dir)?;
    let dwi_path = args.out_dir.join("dwi.nii.gz");
    nifti::write_volume(&bridge::stack_to_image(&stack), &dwi_path)?;
    gradients::write_gradients(
        &scheme,
        &args.out_dir.join("bvals"),
        &args.out_dir.join("bvecs"),
    )?;
    nifti::write_volume(
        &bridge::mask_to_image(&phantom.params.mask),
        &args.out_dir.join("mask.nii.gz"),
    )?;
    nifti::write_volume(
        &bridge::field_to_image(&gt.field),
        &args.out_dir.join("gt.nii.gz"),
    )?;
    let gt_maps = dodti_core::dti::scalar_maps_default(&gt);
    for (name, vol) in [
        ("gt-fa", &gt_maps.fa),
        ("gt-md", &gt_maps.md),
        ("gt-ad", &gt_maps.ad),
        ("gt-rd", &gt_maps.rd),
    ] {
        nifti::write_volume(
            &bridge::volume_to_image(vol),
            &args.out_dir.join(format!("{name}.nii.gz")),
        )?;
    }

    let meta = SimMeta {
        dims: args.dims,
        seed,
        scale,
        noise: noise_meta,
        n_b0: scheme.n_b0(),
        n_dw: scheme.n_dw(),
    };
    std::fs::write(
        args.out_dir.join("meta.json"),
        serde_json::to_string_pretty(&meta)? + "\n",
    )?;

    eprintln!(
        "simulated {}x{}x{} phantom, {} volumes, mask {} voxels -> {}",
        args.dims[0],
        args.dims[1],
        args.dims[2],
        scheme.len(),
        phantom.params.mask.count(),
        args.out_dir.display()
    );
    Ok(())
}
