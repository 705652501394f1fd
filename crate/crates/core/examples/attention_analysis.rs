//! Briefly trains the desk model, then writes polar plots and per-camera
//! overlays of where its latents look.
//!
//! `cargo run --release --example attention_analysis -- [out_dir] [steps]`

use std::path::PathBuf;

use lara::analysis::{emit_analysis, polar_collapse, AttentionRecord, Selection, POLAR_BINS};
use lara::config::Config;
use lara::synthdata::generate_dataset;
use lara::train::{train, TrainOptions};

fn main() {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "attention".into()));
    let steps = args.next().unwrap_or_else(|| "200".into());
    let cfg = Config::resolve(None, &[format!("train.max_steps={steps}"), "train.eval_interval=0".into(), "train.checkpoint_interval=0".into()]).unwrap();
    let scenes = generate_dataset(&cfg, 8, cfg.data.seed).unwrap();
    let run = train(&cfg, &scenes, None, &out.join("run"), &TrainOptions::default()).unwrap();
    let model = lara::model::LaRa::new(&cfg.model).unwrap();

    let sample = &scenes[0];
    let (rec, _) = AttentionRecord::capture(&model, &run.state.store, &sample.rig, &sample.images).unwrap();
    let mean: Selection = "n=avg,h=avg".parse().unwrap();
    // Coarse 15 degree sectors for the terminal; the SVG uses full resolution.
    let profile = polar_collapse(&rec, mean, 24).unwrap();
    let peak = profile.intensity.iter().cloned().fold(0.0, f64::max);
    for (b, v) in profile.intensity.iter().enumerate() {
        println!("{:+5.0} deg {}", profile.bucket_center(b).to_degrees(), "#".repeat((v / peak * 40.0) as usize));
    }
    let selections = [mean, "n=0,h=avg".parse().unwrap(), "n=1,h=avg".parse().unwrap()];
    let index = emit_analysis(&rec, &sample.images, &selections, POLAR_BINS, &out).unwrap();
    println!("wrote {} files to {}", index.files.len(), out.display());
}
