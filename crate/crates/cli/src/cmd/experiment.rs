use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use dodti_core::sim::{
    run_experiment, DenoiserSpec, ExperimentAxis, ExperimentConfig, ExperimentResult, MethodSpec,
    SimError,
};
use dodti_core::unroll::UnrollConfig;

use crate::checkpoint::load_checkpoint;
use crate::cmd::ensure_dir;
use crate::errors::CliError;
use crate::svg;

#[derive(clap::Args)]
pub struct ExperimentArgs {
    /// Experiment description (JSON; see `experiment --help-config`).
    #[arg(long, required_unless_present = "help_config")]
    pub config: Option<PathBuf>,

    /// Output directory for results.csv and plots.
    #[arg(long, required_unless_present = "help_config")]
    pub out_dir: Option<PathBuf>,

    /// Also render one NRMSE SVG chart per scalar map.
    #[arg(long)]
    pub plots: bool,

    /// Print the config file schema and exit.
    #[arg(long)]
    pub help_config: bool,
}

const CONFIG_HELP: &str = r#"Experiment config (JSON):
{
  "axis": "noise",            // b-value | directions-6 | n-dw | noise | var-noise
  "dims": [32, 32, 32],       // phantom size (default [32,32,32])
  "trials": 1,                // noise realizations averaged per point
  "seed": 0,                  // overrides the global --seed when present
  "methods": [
    {"method": "lls"},
    {"method": "wlls", "iters": 2},
    {"method": "dodti", "denoiser": "identity"},
    {"method": "dodti", "denoiser": "gaussian", "sigma": 1.0,
     "rho": 0.05, "lambda": 0.4, "ns": 8, "nt": 1},
    {"method": "dodti", "denoiser": "cnn", "weights": "final.dnc"}
  ]
}
Relative "weights" paths resolve against the config file's directory."#;

fn default_dims() -> [usize; 3] {
    [32, 32, 32]
}

fn default_trials() -> usize {
    1
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    axis: String,
    #[serde(default = "default_dims")]
    dims: [usize; 3],
    #[serde(default = "default_trials")]
    trials: usize,
    #[serde(default)]
    seed: Option<u64>,
    methods: Vec<MethodEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct MethodEntry {
    method: String,
    iters: Option<usize>,
    denoiser: Option<String>,
    sigma: Option<f64>,
    weights: Option<String>,
    rho: Option<f64>,
    lambda: Option<f64>,
    ns: Option<usize>,
    nt: Option<usize>,
}

fn parse_axis(name: &str) -> Result<ExperimentAxis, CliError> {
    let all = [
        ExperimentAxis::BValue,
        ExperimentAxis::Directions6,
        ExperimentAxis::NDw,
        ExperimentAxis::Noise,
        ExperimentAxis::VarNoise,
    ];
    all.into_iter().find(|a| a.name() == name).ok_or_else(|| {
        let names: Vec<&str> = all.iter().map(|a| a.name()).collect();
        CliError::Data(format!(
            "unknown axis {name:?}; expected one of {}",
            names.join(", ")
        ))
    })
}

fn build_method(entry: &MethodEntry, config_dir: &Path) -> Result<MethodSpec, CliError> {
    match entry.method.as_str() {
        "lls" => Ok(MethodSpec::Lls),
        "wlls" => Ok(MethodSpec::Wlls {
            iters: entry
                .iters
                .unwrap_or(dodti_core::estimators::IWLLS_DEFAULT_ITERS),
        }),
        "dodti" => {
            let den_name = entry.denoiser.as_deref().unwrap_or("identity");
            let (denoiser, mut cfg) = match den_name {
                "identity" => (DenoiserSpec::Identity, UnrollConfig::default()),
                "gaussian" => (
                    DenoiserSpec::Gaussian {
                        sigma: entry.sigma.unwrap_or(1.0),
                    },
                    UnrollConfig::default(),
                ),
                "cnn" => {
                    let w = entry.weights.as_ref().ok_or_else(|| {
                        CliError::Data("dodti/cnn method needs a \"weights\" path".into())
                    })?;
                    let path = if Path::new(w).is_absolute() {
                        PathBuf::from(w)
                    } else {
                        config_dir.join(w)
                    };
                    let ck = load_checkpoint(&path)?;
                    let cfg = ck.model.unroll_config(ck.ns, ck.nt);
                    (DenoiserSpec::Cnn(ck.model.net), cfg)
                }
                other => {
                    return Err(CliError::Data(format!(
                        "unknown denoiser {other:?}; expected identity, gaussian or cnn"
                    )))
                }
            };
            if let Some(rho) = entry.rho {
                cfg.rho = rho;
            }
            if let Some(lambda) = entry.lambda {
                cfg.lambda = lambda;
            }
            if let Some(ns) = entry.ns {
                cfg.ns = ns;
            }
            if let Some(nt) = entry.nt {
                cfg.nt = nt;
            }
            Ok(MethodSpec::Dodti { denoiser, cfg })
        }
        other => Err(CliError::Data(format!(
            "unknown method {other:?}; expected lls, wlls or dodti"
        ))),
    }
}

fn map_sim_err(e: SimError) -> CliError {
    match e {
        SimError::PhantomTooSmall { .. } => CliError::Usage(e.to_string()),
        SimError::Dti(_) | SimError::Unroll(_) | SimError::Metrics(_) | SimError::ZeroScale => {
            CliError::Numerical(e.to_string())
        }
        other => CliError::Data(other.to_string()),
    }
}

fn write_results_csv(result: &ExperimentResult, path: &Path) -> Result<(), CliError> {
    let mut out = String::from("axis,axis_value,method,map,nrmse,ssim\n");
    for row in &result.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            result.axis.name(),
            row.axis_value,
            row.method,
            row.map,
            row.nrmse,
            row.ssim
        );
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn write_plots(result: &ExperimentResult, out_dir: &Path) -> Result<(), CliError> {
    // Axis positions: numeric labels plot at their value, otherwise by index.
    let mut labels: Vec<&str> = Vec::new();
    for row in &result.rows {
        if !labels.contains(&row.axis_value.as_str()) {
            labels.push(&row.axis_value);
        }
    }
    let numeric = labels.iter().all(|l| l.parse::<f64>().is_ok());
    let x_of = |label: &str| -> f64 {
        if numeric {
            label.parse().unwrap()
        } else {
            labels.iter().position(|l| *l == label).unwrap() as f64
        }
    };

    for map in ["fa", "md", "ad", "rd"] {
        let mut methods: Vec<&str> = Vec::new();
        for row in result.rows.iter().filter(|r| r.map == map) {
            if !methods.contains(&row.method.as_str()) {
                methods.push(&row.method);
            }
        }
        let series: Vec<svg::Series> = methods
            .iter()
            .map(|m| svg::Series {
                label: (*m).to_string(),
                points: result
                    .rows
                    .iter()
                    .filter(|r| r.map == map && r.method == **m)
                    .map(|r| (x_of(&r.axis_value), r.nrmse))
                    .collect(),
            })
            .collect();
        let x_label = if numeric {
            result.axis.name().to_string()
        } else {
            format!("{} ({})", result.axis.name(), labels.join(", "))
        };
        let doc = svg::line_chart(
            &format!("NRMSE({}) vs {}", map.to_uppercase(), result.axis.name()),
            &x_label,
            "NRMSE",
            &series,
        );
        std::fs::write(out_dir.join(format!("plot-{map}.svg")), doc)?;
    }
    Ok(())
}

pub fn run(args: &ExperimentArgs, global_seed: u64) -> Result<(), CliError> {
    if args.help_config {
        crate::cmd::print_out(CONFIG_HELP);
        crate::cmd::print_out("\n");
        return Ok(());
    }
    let config_path = args.config.as_ref().expect("clap enforces --config");
    let out_dir = args.out_dir.as_ref().expect("clap enforces --out-dir");
    let text = std::fs::read_to_string(config_path)
        .map_err(|e| CliError::Data(format!("{}: {e}", config_path.display())))?;
    let file: ConfigFile = serde_json::from_str(&text)?;
    if file.methods.is_empty() {
        return Err(CliError::Data("config lists no methods".into()));
    }
    let config_dir = config_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));

    let axis = parse_axis(&file.axis)?;
    let methods = file
        .methods
        .iter()
        .map(|m| build_method(m, &config_dir))
        .collect::<Result<Vec<_>, _>>()?;

    let cfg = ExperimentConfig {
        axis,
        methods,
        dims: file.dims,
        seed: file.seed.unwrap_or(global_seed),
        trials: file.trials,
    };
    let result = run_experiment(&cfg).map_err(map_sim_err)?;

    ensure_dir(out_dir)?;
    write_results_csv(&result, &out_dir.join("results.csv"))?;
    if args.plots {
        write_plots(&result, out_dir)?;
    }

    // Compact NRMSE(FA) table on stdout; the CSV holds everything.
    let mut table = format!(
        "axis={} trials={} ({} rows -> {})\n",
        result.axis.name(),
        result.trials,
        result.rows.len(),
        out_dir.join("results.csv").display()
    );
    let mut shown: Vec<&str> = Vec::new();
    for row in result.rows.iter().filter(|r| r.map == "fa") {
        if !shown.contains(&row.axis_value.as_str()) {
            shown.push(&row.axis_value);
            let _ = writeln!(table, "  {} = {}", result.axis.name(), row.axis_value);
        }
        let _ = writeln!(
            table,
            "    {:<16} nrmse(fa) {:.6}  ssim(fa) {:.4}",
            row.method, row.nrmse, row.ssim
        );
    }
    crate::cmd::print_out(&table);
    Ok(())
}
