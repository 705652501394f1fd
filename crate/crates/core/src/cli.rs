//! The `lara` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::analysis::{emit_analysis, AttentionRecord, Selection, POLAR_BINS};
use crate::config::Config;
use crate::error::{LaraError, Result};
use crate::model::{binarize, LaRa};
use crate::synthdata::{generate_dataset, read_dataset, write_dataset, RenderedSample};
use crate::train::{evaluate, evaluate_masks, load_params, mask_from_u8, prepare_samples, sweep, train, SweepAxis, TrainOptions};

#[derive(Parser, Debug)]
#[command(name = "lara", version, about = "Multi-camera BEV segmentation through a latent bottleneck")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Profile name (desk, paper) or TOML file merged over the desk profile.
    #[arg(long, global = true)]
    pub config: Option<String>,
    /// Dotted `section.key=value` override; repeatable.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed for data generation or training.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic dataset.
    GenData {
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Train a model; writes checkpoints, metrics and the resolved config.
    Train {
        /// Training set (defaults to train.dataset).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Held-out set (defaults to train.val_dataset).
        #[arg(long)]
        val_dataset: Option<PathBuf>,
        /// Checkpoint to resume from.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once this many total steps have run.
        #[arg(long)]
        stop_at: Option<u64>,
    },
    /// IoU and loss of a predictor on a dataset.
    Eval {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, required_if_eq("predictor", "model"))]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Predictor::Model)]
        predictor: Predictor,
    },
    /// Train one variant per value of N, M or L and tabulate final IoU.
    Sweep {
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<usize>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        val_dataset: Option<PathBuf>,
    },
    /// Reproject and polar-collapse the input attention of one sample.
    AttnAnalyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        /// Selections such as `n=10,h=5` or `n=avg`; repeatable.
        #[arg(long = "select", default_values_t = ["n=avg,h=avg".to_string()])]
        selections: Vec<String>,
        #[arg(long, default_value_t = POLAR_BINS)]
        bins: usize,
    },
    /// Print the fully resolved config.
    ShowConfig,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Predictor {
    /// Thresholded model logits.
    Model,
    /// The ground truth itself.
    GtEcho,
    /// Predicts empty grids.
    Zeros,
}

/// Parses arguments, runs the command and maps failures to exit codes:
/// 0 success, 1 runtime failure, 2 usage error.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = std::env::var("LARA_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}

fn resolve(common: &Common, seed_key: Option<&str>) -> Result<Config> {
    let mut overrides = common.overrides.clone();
    if let (Some(seed), Some(key)) = (common.seed, seed_key) {
        overrides.push(format!("{key}={seed}"));
    }
    Config::resolve(common.config.as_deref(), &overrides)
}

fn load_set(path: &Path) -> Result<Vec<RenderedSample>> {
    Ok(read_dataset(path)?.1)
}

fn or_config(arg: &Option<PathBuf>, fallback: &str) -> Option<PathBuf> {
    arg.clone().or_else(|| (!fallback.is_empty()).then(|| PathBuf::from(fallback)))
}

pub fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match &cli.command {
        Command::ShowConfig => {
            let cfg = resolve(common, Some("train.seed"))?;
            print!("{}", cfg.to_toml());
        }
        Command::GenData { count } => {
            let cfg = resolve(common, Some("data.seed"))?;
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.train.dataset));
            let samples = generate_dataset(&cfg, *count, cfg.data.seed)?;
            let manifest = write_dataset(&out, &cfg, &samples)?;
            cfg.echo_into(&out)?;
            let boxes: usize = manifest.samples.iter().map(|s| s.boxes).sum();
            let occupied: usize = samples.iter().map(|s| s.bev_gt.iter().filter(|v| **v != 0).count()).sum();
            println!(
                "wrote {} samples to {} ({} boxes, {:.2}% occupied cells)",
                manifest.count,
                out.display(),
                boxes,
                100.0 * occupied as f64 / (samples.len() * cfg.model.bev_cells()).max(1) as f64
            );
        }
        Command::Train { dataset, val_dataset, resume, stop_at } => {
            let mut cfg = resolve(common, Some("train.seed"))?;
            if let Some(out) = &common.out {
                cfg.train.checkpoint_dir = out.display().to_string();
            }
            let train_path = or_config(dataset, &cfg.train.dataset).expect("train.dataset has a value");
            let train_set = load_set(&train_path)?;
            let val_set = or_config(val_dataset, &cfg.train.val_dataset).map(|p| load_set(&p)).transpose()?;
            let out = PathBuf::from(&cfg.train.checkpoint_dir);
            let opts = TrainOptions { resume: resume.clone(), stop_at: *stop_at };
            let s = train(&cfg, &train_set, val_set.as_deref(), &out, &opts)?;
            println!("step {} train loss {:.6} IoU {:.6}", s.train_eval.step, s.train_eval.loss, s.train_eval.iou);
            if let Some(v) = s.val_eval {
                println!("step {} val loss {:.6} IoU {:.6}", v.step, v.loss, v.iou);
            }
            println!("checkpoint {}", s.final_checkpoint.display());
        }
        Command::Eval { dataset, checkpoint, predictor } => {
            let cfg = resolve(common, None)?;
            let path = or_config(dataset, &cfg.train.dataset).expect("train.dataset has a value");
            let set = load_set(&path)?;
            let gts: Vec<Vec<bool>> = set.iter().map(|s| mask_from_u8(&s.bev_gt)).collect();
            let (loss, iou) = match predictor {
                Predictor::GtEcho => (None, evaluate_masks(&gts, &gts)?),
                Predictor::Zeros => {
                    let zeros: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
                    (None, evaluate_masks(&zeros, &gts)?)
                }
                Predictor::Model => {
                    let ckpt = checkpoint.as_ref().ok_or_else(|| LaraError::Argument("--checkpoint is required".into()))?;
                    let model = LaRa::new(&cfg.model)?;
                    let store = load_params(ckpt, &model)?;
                    let r = evaluate(&model, &store, &prepare_samples(&model, &set)?)?;
                    (Some(r.loss), r.iou)
                }
            };
            if let Some(l) = loss {
                println!("loss {l:.6}");
            }
            println!("IoU {iou:.6} over {} samples", set.len());
        }
        Command::Sweep { axis, values, dataset, val_dataset } => {
            let axis: SweepAxis = axis.parse()?;
            let cfg = resolve(common, Some("train.seed"))?;
            let train_path = or_config(dataset, &cfg.train.dataset).expect("train.dataset has a value");
            let train_set = load_set(&train_path)?;
            let val_set = or_config(val_dataset, &cfg.train.val_dataset).map(|p| load_set(&p)).transpose()?;
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.train.checkpoint_dir).join("sweep"));
            cfg.echo_into(&out)?;
            let rows = sweep(&cfg, axis, values, &train_set, val_set.as_deref(), &out)?;
            println!("{axis},iou,loss");
            for r in rows {
                println!("{},{:.6},{:.6}", r.value, r.iou, r.loss);
            }
        }
        Command::AttnAnalyze { checkpoint, dataset, sample, selections, bins } => {
            let cfg = resolve(common, None)?;
            let path = or_config(dataset, &cfg.train.dataset).expect("train.dataset has a value");
            let set = load_set(&path)?;
            let s = set.get(*sample).ok_or_else(|| {
                LaraError::Argument(format!("sample {sample} out of range ({} samples)", set.len()))
            })?;
            let model = LaRa::new(&cfg.model)?;
            let store = load_params(checkpoint, &model)?;
            let sels: Vec<Selection> = selections.iter().map(|s| s.parse()).collect::<Result<_>>()?;
            let (rec, logits) = AttentionRecord::capture(&model, &store, &s.rig, &s.images)?;
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("attention"));
            cfg.echo_into(&out)?;
            let index = emit_analysis(&rec, &s.images, &sels, *bins, &out)?;
            let occupied = binarize(&logits).iter().filter(|v| **v).count();
            println!("sample {sample}: {occupied} cells predicted occupied");
            for f in index.files {
                println!("{}", out.join(f).display());
            }
        }
    }
    Ok(())
}
