//! Sweeps the number of latents on a small train/val split and prints the
//! held-out IoU of each variant.
//!
//! `cargo run --release --example latent_sweep -- [steps]`

use lara::config::Config;
use lara::synthdata::generate_dataset;
use lara::train::{sweep, SweepAxis};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let steps = std::env::args().nth(1).unwrap_or_else(|| "300".into());
    let cfg = Config::resolve(None, &[format!("train.max_steps={steps}"), "train.eval_interval=0".into()]).unwrap();
    let train_set = generate_dataset(&cfg, 32, cfg.data.seed).unwrap();
    let val_set = generate_dataset(&cfg, 8, cfg.data.seed + 1).unwrap();
    let out = std::env::temp_dir().join("lara-latent-sweep");
    let rows = sweep(&cfg, SweepAxis::N, &[4, 16, 64], &train_set, Some(&val_set), &out).unwrap();
    for r in rows {
        println!("N = {:2}: val IoU {:.4}, loss {:.4}", r.value, r.iou, r.loss);
    }
    println!("per-variant runs and sweep.csv in {}", out.display());
}
