//! Compares the bird's-eye-view query embeddings: feature width and
//! parameter count of each mode at two grid sizes.

use lara::config::{Config, QueryMode};
use lara::model::{fourier_features, fourier_frequencies, query_coords, query_radial, LaRa};

fn main() {
    let coords = query_coords(3, 3).unwrap();
    let radial = query_radial(&coords);
    println!("3x3 grid, row-major:");
    for (c, r) in coords.iter().zip(&radial) {
        println!("  ({:+.1}, {:+.1}) radius {r:.4}", c[0], c[1]);
    }
    let freqs = fourier_frequencies(4, 8.0);
    println!("frequencies {freqs:?}");
    println!("fourier(0.5) {:?}", fourier_features(0.5, &freqs).iter().map(|v| format!("{v:+.3}")).collect::<Vec<_>>());

    for side in [64, 128] {
        for mode in [QueryMode::CoordsRadial, QueryMode::Fourier, QueryMode::Learned] {
            let mut cfg = Config::default();
            cfg.model.bev_h = side;
            cfg.model.bev_w = side;
            cfg.model.query_mode = mode;
            let model = LaRa::new(&cfg.model).unwrap();
            println!("{side}x{side} {mode:?}: query width {}, {} parameters", model.query_width(), model.num_params());
        }
    }
}
