use std::path::PathBuf;

use crate::cmd::SchemeSource;
use crate::errors::CliError;
use crate::gradients;

#[derive(clap::Args)]
pub struct SchemeArgs {
    #[command(flatten)]
    pub source: SchemeSource,

    /// Write the b-values here (requires --out-bvecs).
    #[arg(long, requires = "out_bvecs")]
    pub out_bvals: Option<PathBuf>,

    /// Write the direction table here (requires --out-bvals).
    #[arg(long, requires = "out_bvals")]
    pub out_bvecs: Option<PathBuf>,
}

pub fn run(args: &SchemeArgs) -> Result<(), CliError> {
    let scheme = args.source.resolve()?;
    match (&args.out_bvals, &args.out_bvecs) {
        (Some(bvals), Some(bvecs)) => {
            gradients::write_gradients(&scheme, bvals, bvecs)?;
            eprintln!(
                "wrote {} entries ({} b0, {} weighted) to {} / {}",
                scheme.len(),
                scheme.n_b0(),
                scheme.n_dw(),
                bvals.display(),
                bvecs.display()
            );
        }
        _ => {
            let mut table = String::from("# b gx gy gz\n");
            for e in scheme.entries() {
                table.push_str(&format!("{} {} {} {}\n", e.b, e.g[0], e.g[1], e.g[2]));
            }
            crate::cmd::print_out(&table);
        }
    }
    Ok(())
}
