use std::cell::RefCell;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use dodti_core::train::{train, TrainConfig, TrainError, TrainSample};

use crate::bridge;
use crate::checkpoint::save_checkpoint;
use crate::cmd::ensure_dir;
use crate::errors::CliError;
use crate::gradients;
use crate::nifti;

#[derive(clap::Args)]
pub struct TrainArgs {
    /// Dataset directory: one subdirectory per sample, each holding
    /// dwi.nii.gz, bvals, bvecs, gt.nii.gz, mask.nii.gz (see `simulate`).
    #[arg(long)]
    pub data: PathBuf,

    /// Validation dataset directory with the same layout.
    #[arg(long)]
    pub val_data: Option<PathBuf>,

    /// Run directory for config.json, loss.csv and checkpoints.
    #[arg(long)]
    pub out: PathBuf,

    #[arg(long, default_value_t = 250)]
    pub epochs: usize,

    #[arg(long, default_value_t = 4)]
    pub batch: usize,

    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,

    /// Halve the learning rate every this many epochs (0 = never).
    #[arg(long, default_value_t = 100)]
    pub lr_halve_every: usize,

    /// Training patch edge length in voxels.
    #[arg(long, default_value_t = 32)]
    pub block: usize,

    /// Hidden channels in the denoiser.
    #[arg(long, default_value_t = dodti_core::denoiser::DEFAULT_WIDTH)]
    pub width: usize,

    /// Unrolled stages.
    #[arg(long, default_value_t = 8)]
    pub ns: usize,

    /// Fixed-point iterations per stage.
    #[arg(long, default_value_t = 1)]
    pub nt: usize,

    /// Initial coupling strength.
    #[arg(long, default_value_t = 1e-3)]
    pub rho: f64,

    /// Initial prior strength.
    #[arg(long, default_value_t = 0.1)]
    pub lambda: f64,

    /// Keep rho/lambda at their initial values instead of training them.
    #[arg(long)]
    pub freeze_rho_lambda: bool,

    /// Supervised warm-up epochs (denoiser alone, full fields) before the
    /// unrolled phase.
    #[arg(long, default_value_t = 0)]
    pub pretrain_epochs: usize,

    #[arg(long, default_value_t = 3e-4)]
    pub pretrain_lr: f64,

    /// Write a checkpoint every this many epochs (0 = only the final one).
    #[arg(long, default_value_t = 50)]
    pub ckpt_every: usize,
}

#[derive(Serialize)]
struct ConfigSnapshot {
    data: String,
    val_data: Option<String>,
    n_train: usize,
    n_val: usize,
    seed: u64,
    epochs: usize,
    batch: usize,
    lr: f64,
    lr_halve_every: usize,
    block: usize,
    width: usize,
    ns: usize,
    nt: usize,
    init_rho: f64,
    init_lambda: f64,
    train_rho_lambda: bool,
    pretrain_epochs: usize,
    pretrain_lr: f64,
    ckpt_every: usize,
}

fn noise_level_from_meta(dir: &Path) -> f64 {
    let Ok(text) = std::fs::read_to_string(dir.join("meta.json")) else {
        return 0.0;
    };
    let Ok(v) = serde_json::from_str::<serde_json::Value>(&text) else {
        return 0.0;
    };
    v["noise"]["sigma"].as_f64().unwrap_or(0.0)
}

fn load_sample(dir: &Path) -> Result<TrainSample, CliError> {
    let dwi_path = if dir.join("dwi.nii.gz").exists() {
        dir.join("dwi.nii.gz")
    } else {
        dir.join("dwi.nii")
    };
    let img = nifti::read_volume(&dwi_path)?;
    let scheme = gradients::read_gradients(&dir.join("bvals"), &dir.join("bvecs"))?;
    let stack = bridge::image_to_stack(&img, scheme)?;
    let mask_img = nifti::read_volume(&dir.join("mask.nii.gz"))?;
    let mask = bridge::image_to_mask(&mask_img, "mask")?;
    let gt_img = nifti::read_volume(&dir.join("gt.nii.gz"))?;
    let gt = bridge::image_to_params(&gt_img, mask)?;
    if gt.field.dims != stack.dims {
        return Err(CliError::Data(format!(
            "{}: gt dims {:?} do not match stack dims {:?}",
            dir.display(),
            gt.field.dims,
            stack.dims
        )));
    }
    Ok(TrainSample {
        stack,
        gt,
        noise_level: noise_level_from_meta(dir),
    })
}

fn load_dataset(root: &Path) -> Result<Vec<TrainSample>, CliError> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| CliError::Data(format!("{}: {e}", root.display())))?
        .filter_map(|r| r.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no sample subdirectories",
            root.display()
        )));
    }
    dirs.iter().map(|d| load_sample(d)).collect()
}

fn map_train_err(e: TrainError) -> CliError {
    match e {
        TrainError::BadConfig(_) => CliError::Usage(e.to_string()),
        TrainError::EmptyTrainingSet => CliError::Data(e.to_string()),
        other => CliError::Numerical(other.to_string()),
    }
}

pub fn run(args: &TrainArgs, seed: u64) -> Result<(), CliError> {
    let train_set = load_dataset(&args.data)?;
    let val_set = match &args.val_data {
        Some(d) => load_dataset(d)?,
        None => Vec::new(),
    };

    let cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch,
        lr: args.lr,
        lr_halve_every: args.lr_halve_every,
        block: args.block,
        seed,
        width: args.width,
        ns: args.ns,
        nt: args.nt,
        init_rho: args.rho,
        init_lambda: args.lambda,
        train_rho_lambda: !args.freeze_rho_lambda,
        pretrain_epochs: args.pretrain_epochs,
        pretrain_lr: args.pretrain_lr,
    };

    ensure_dir(&args.out)?;
    let snapshot = ConfigSnapshot {
        data: args.data.display().to_string(),
        val_data: args.val_data.as_ref().map(|d| d.display().to_string()),
        n_train: train_set.len(),
        n_val: val_set.len(),
        seed,
        epochs: cfg.epochs,
        batch: cfg.batch_size,
        lr: cfg.lr,
        lr_halve_every: cfg.lr_halve_every,
        block: cfg.block,
        width: cfg.width,
        ns: cfg.ns,
        nt: cfg.nt,
        init_rho: cfg.init_rho,
        init_lambda: cfg.init_lambda,
        train_rho_lambda: cfg.train_rho_lambda,
        pretrain_epochs: cfg.pretrain_epochs,
        pretrain_lr: cfg.pretrain_lr,
        ckpt_every: args.ckpt_every,
    };
    std::fs::write(
        args.out.join("config.json"),
        serde_json::to_string_pretty(&snapshot)? + "\n",
    )?;

    let csv = std::fs::File::create(args.out.join("loss.csv"))?;
    let csv = RefCell::new(std::io::BufWriter::new(csv));
    writeln!(csv.borrow_mut(), "epoch,train_loss,val_loss,rho,lambda,lr")?;

    // The observer cannot return errors; stash the first IO failure and
    // surface it after training.
    let io_err: RefCell<Option<String>> = RefCell::new(None);
    let outcome = train(&train_set, &val_set, &cfg, |stats, model| {
        let mut w = csv.borrow_mut();
        let line = writeln!(
            w,
            "{},{},{},{},{},{}",
            stats.epoch, stats.train_loss, stats.val_loss, stats.rho, stats.lambda, stats.lr
        )
        .and_then(|_| w.flush());
        if let Err(e) = line {
            io_err.borrow_mut().get_or_insert(e.to_string());
        }
        eprintln!(
            "epoch {:4}  train {:.6}  val {:.6}  rho {:.3e}  lambda {:.3e}  lr {:.2e}",
            stats.epoch, stats.train_loss, stats.val_loss, stats.rho, stats.lambda, stats.lr
        );
        if args.ckpt_every > 0 && (stats.epoch + 1) % args.ckpt_every == 0 {
            let path = args.out.join(format!("ckpt-{:04}.dnc", stats.epoch + 1));
            if let Err(e) = save_checkpoint(&path, model, cfg.ns, cfg.nt) {
                io_err.borrow_mut().get_or_insert(e.to_string());
            }
        }
    })
    .map_err(map_train_err)?;
    if let Some(e) = io_err.into_inner() {
        return Err(CliError::Data(e));
    }

    let final_path = args.out.join("final.dnc");
    save_checkpoint(&final_path, &outcome.model, cfg.ns, cfg.nt)?;

    let last = outcome.history.last().expect("at least one epoch");
    eprintln!(
        "trained {} epochs: train {:.6}, val {:.6}, rho {:.3e}, lambda {:.3e} -> {}",
        outcome.history.len(),
        last.train_loss,
        last.val_loss,
        last.rho,
        last.lambda,
        final_path.display()
    );
    Ok(())
}
