//! Renders one synthetic scene, writes it as a dataset and prints its
//! bird's-eye-view occupancy as text.
//!
//! `cargo run --release --example render_scene -- [out_dir] [seed]`

use std::path::PathBuf;

use lara::config::Config;
use lara::synthdata::{config_rig, generate_sample, write_dataset};

fn main() {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "scene".into()));
    let seed: u64 = args.next().map_or(7, |s| s.parse().expect("seed must be an integer"));
    let cfg = Config::default();
    let rig = config_rig(&cfg).unwrap();
    let sample = generate_sample(&cfg, &rig, seed).unwrap();
    for (i, b) in sample.scene.boxes.iter().enumerate() {
        println!(
            "box {i}: center ({:.1}, {:.1}) m, {:.1} x {:.1} x {:.1} m, yaw {:.0} deg, occluded {:.0}%",
            b.center[0],
            b.center[1],
            b.length,
            b.width,
            b.height,
            b.yaw.to_degrees(),
            100.0 * sample.occlusion[i]
        );
    }
    let (h, w) = (cfg.model.bev_h, cfg.model.bev_w);
    // Two grid rows per text line; forward is up, left is left.
    for i in (0..h).step_by(2) {
        let line: String = (0..w)
            .map(|j| {
                let cell = |r: usize| r < h && sample.bev_gt[r * w + j] == 1;
                match (cell(i), cell(i + 1), i == h / 2 - 2 && j == w / 2) {
                    (_, _, true) => '^',
                    (true, true, _) => '#',
                    (true, false, _) | (false, true, _) => '+',
                    _ => '.',
                }
            })
            .collect();
        println!("{line}");
    }
    write_dataset(&out, &cfg, &[sample]).unwrap();
    println!("wrote {}", out.display());
}
