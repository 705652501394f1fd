//! Trains the desk model on a handful of scenes until it memorizes them.
//! Extra arguments are config overrides, e.g. `train.max_steps=500`.
//!
//! `cargo run --release --example overfit -- train.max_steps=2000`

use lara::config::Config;
use lara::synthdata::generate_dataset;
use lara::train::{train, TrainOptions};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut overrides = vec!["train.max_steps=2000".to_string(), "train.eval_interval=200".to_string()];
    overrides.extend(std::env::args().skip(1));
    let cfg = Config::resolve(None, &overrides).unwrap();
    let scenes = generate_dataset(&cfg, 8, cfg.data.seed).unwrap();
    let out = std::env::temp_dir().join("lara-overfit");
    let summary = train(&cfg, &scenes, None, &out, &TrainOptions::default()).unwrap();
    println!(
        "train IoU {:.4}, loss {:.4} after {} steps; run written to {}",
        summary.train_eval.iou,
        summary.train_eval.loss,
        summary.train_eval.step,
        out.display()
    );
}

