use std::path::PathBuf;

use serde::Serialize;

use dodti_core::metrics::{nrmse, r_squared, ssim3d};
use dodti_core::volume::Mask;

use crate::bridge;
use crate::errors::CliError;
use crate::nifti;

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum FormatArg {
    Json,
    Csv,
}

#[derive(clap::Args)]
pub struct MetricsArgs {
    /// Estimated map (3-D volume).
    #[arg(long)]
    pub est: PathBuf,

    /// Reference map to compare against.
    #[arg(long = "ref")]
    pub reference: PathBuf,

    /// Evaluation mask; the full volume when omitted.
    #[arg(long)]
    pub mask: Option<PathBuf>,

    #[arg(long, value_enum, default_value_t = FormatArg::Json)]
    pub format: FormatArg,

    /// Write the report here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
pub struct MetricReport {
    pub est: String,
    pub reference: String,
    pub n_voxels: usize,
    pub nrmse: f64,
    pub ssim: f64,
    pub r2: f64,
}

pub fn run(args: &MetricsArgs) -> Result<(), CliError> {
    let est_img = nifti::read_volume(&args.est)?;
    let ref_img = nifti::read_volume(&args.reference)?;
    let est = bridge::image_to_volume(&est_img, "est")?;
    let reference = bridge::image_to_volume(&ref_img, "ref")?;
    if est.dims != reference.dims {
        return Err(CliError::Data(format!(
            "map dims differ: est {:?} vs ref {:?}",
            est.dims, reference.dims
        )));
    }
    let mask = match &args.mask {
        Some(p) => {
            let img = nifti::read_volume(p)?;
            let m = bridge::image_to_mask(&img, "mask")?;
            if m.dims != est.dims {
                return Err(CliError::Data(format!(
                    "mask dims {:?} do not match map dims {:?}",
                    m.dims, est.dims
                )));
            }
            m
        }
        None => Mask::full(est.dims),
    };

    let report = MetricReport {
        est: args.est.display().to_string(),
        reference: args.reference.display().to_string(),
        n_voxels: mask.count(),
        nrmse: nrmse(&est, &reference, &mask).map_err(|e| CliError::Numerical(e.to_string()))?,
        ssim: ssim3d(&est, &reference, &mask).map_err(|e| CliError::Numerical(e.to_string()))?,
        r2: r_squared(&est, &reference, &mask)
            .map_err(|e| CliError::Numerical(e.to_string()))?,
    };

    let text = match args.format {
        FormatArg::Json => serde_json::to_string_pretty(&report)? + "\n",
        FormatArg::Csv => format!(
            "est,ref,n_voxels,nrmse,ssim,r2\n{},{},{},{},{},{}\n",
            report.est, report.reference, report.n_voxels, report.nrmse, report.ssim, report.r2
        ),
    };
    match &args.out {
        Some(p) => std::fs::write(p, text)?,
        None => crate::cmd::print_out(&text),
    }
    Ok(())
}
