//! `dodti` — diffusion-tensor estimation from the command line.
//!
//! Subcommands: `scheme` (gradient tables), `simulate` (synthetic stacks),
//! `fit` (tensor estimation), `train` (denoiser training), `metrics`
//! (map comparison), `experiment` (sweep harness).
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

mod bridge;
mod checkpoint;
mod cmd;
mod errors;
mod gradients;
mod nifti;
mod svg;

use clap::Parser;

use crate::errors::CliError;

#[derive(Parser)]
#[command(
    name = "dodti",
    version,
    about = "Diffusion tensor estimation: classical fits and an unrolled ADMM solver",
    after_help = crate::cmd::fit::CHANNEL_ORDER_HELP
)]
pub struct Cli {
    /// Base seed for anything randomized (synthesis, training).
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Worker threads for fitting and denoising (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Run single-threaded so every execution orders work identically.
    /// Results are seed-deterministic either way; this pins scheduling too.
    #[arg(long, global = true)]
    pub deterministic: bool,

    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(clap::Subcommand)]
pub enum Cmd {
    /// Generate or rotate diffusion gradient tables (FSL bvals/bvecs).
    Scheme(cmd::scheme::SchemeArgs),
    /// Synthesize a phantom DWI stack with Rician noise.
    Simulate(cmd::simulate::SimulateArgs),
    /// Fit a tensor field and write parameter + scalar maps.
    Fit(cmd::fit::FitArgs),
    /// Train the unrolled solver's denoiser on a sample directory.
    Train(cmd::train::TrainArgs),
    /// Compare two scalar maps (NRMSE, SSIM, R^2).
    Metrics(cmd::metrics::MetricsArgs),
    /// Run a configured sweep and write tables (and optionally plots).
    Experiment(cmd::experiment::ExperimentArgs),
}

fn init_threads(cli: &Cli) -> Result<(), CliError> {
    let n = match (cli.threads, cli.deterministic) {
        (Some(0), _) => return Err(CliError::Usage("--threads must be at least 1".into())),
        (Some(n), _) => Some(n),
        (None, true) => Some(1),
        (None, false) => None,
    };
    if let Some(n) = n {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    init_threads(cli)?;
    match &cli.cmd {
        Cmd::Scheme(a) => cmd::scheme::run(a),
        Cmd::Simulate(a) => cmd::simulate::run(a, cli.seed),
        Cmd::Fit(a) => cmd::fit::run(a),
        Cmd::Train(a) => cmd::train::run(a, cli.seed),
        Cmd::Metrics(a) => cmd::metrics::run(a),
        Cmd::Experiment(a) => cmd::experiment::run(a, cli.seed),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    std::process::exit(0);
                }
                _ => {
                    eprint!("{e}");
                    std::process::exit(1);
                }
            }
        }
    };
    if let Err(e) = run(&cli) {
        eprintln!("dodti: {e}");
        std::process::exit(e.exit_code());
    }
}
