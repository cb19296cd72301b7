pub mod experiment;
pub mod fit;
pub mod metrics;
pub mod scheme;
pub mod simulate;
pub mod train;

use std::path::{Path, PathBuf};

use dodti_core::dti::GradientScheme;
use dodti_core::sim::{make_scheme, SchemeKind};

use crate::errors::CliError;
use crate::gradients;

/// Scheme generators selectable from the command line.
#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum KindArg {
    /// Icosahedral six-direction set (condition-number optimal).
    Dsm6,
    /// Electrostatic-repulsion sets; pick the size with --n-dw.
    Jones,
}

/// Shared scheme-source flags: either a generator or an existing table.
#[derive(clap::Args, Clone, Debug)]
pub struct SchemeSource {
    /// Direction-set generator.
    #[arg(long, value_enum, default_value_t = KindArg::Dsm6)]
    pub kind: KindArg,

    /// Number of diffusion-weighted directions.
    #[arg(long, default_value_t = 6)]
    pub n_dw: usize,

    /// Number of leading b=0 volumes.
    #[arg(long, default_value_t = 1)]
    pub n_b0: usize,

    /// b-value in s/mm^2 for the weighted volumes.
    #[arg(long, default_value_t = 1000.0)]
    pub b: f64,

    /// Rotate all directions about z by this many degrees.
    #[arg(long, default_value_t = 0.0)]
    pub rot_z: f64,

    /// Read the scheme from this bvals file instead of generating one.
    #[arg(long, requires = "in_bvecs", conflicts_with = "kind")]
    pub in_bvals: Option<PathBuf>,

    /// Companion bvecs file for --in-bvals.
    #[arg(long, requires = "in_bvals")]
    pub in_bvecs: Option<PathBuf>,
}

impl SchemeSource {
    pub fn resolve(&self) -> Result<GradientScheme, CliError> {
        if let (Some(bvals), Some(bvecs)) = (&self.in_bvals, &self.in_bvecs) {
            let scheme = gradients::read_gradients(bvals, bvecs)?;
            if self.rot_z != 0.0 {
                let rad = self.rot_z.to_radians();
                let (s, c) = (rad.sin(), rad.cos());
                let rz = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
                return Ok(scheme.rotated(&rz)?);
            }
            return Ok(scheme);
        }
        let kind = match self.kind {
            KindArg::Dsm6 => SchemeKind::Dsm6,
            KindArg::Jones if self.n_dw == 6 => SchemeKind::Jones6,
            KindArg::Jones => SchemeKind::JonesN,
        };
        make_scheme(&kind, self.n_dw, self.n_b0, self.b, self.rot_z).map_err(|e| match e {
            dodti_core::sim::SimError::UnsupportedDirectionCount { .. }
            | dodti_core::sim::SimError::BadBValue { .. } => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        })
    }
}

/// Parse "32" or "32,40,24" into phantom dims.
pub fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    let parse_one = |t: &str| {
        t.trim()
            .parse::<usize>()
            .map_err(|_| format!("bad dimension {t:?}"))
    };
    match parts.len() {
        1 => {
            let d = parse_one(parts[0])?;
            Ok([d, d, d])
        }
        3 => Ok([
            parse_one(parts[0])?,
            parse_one(parts[1])?,
            parse_one(parts[2])?,
        ]),
        _ => Err("expected one or three comma-separated sizes".to_string()),
    }
}

pub fn ensure_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Write to stdout, treating a vanished reader (`dodti ... | head`) as a
/// clean stop instead of a panic.
pub fn print_out(text: &str) {
    use std::io::Write;
    let mut out = std::io::stdout();
    if out
        .write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .is_err()
    {
        std::process::exit(0);
    }
}
