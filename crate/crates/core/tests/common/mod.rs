#![allow(dead_code)]

pub mod oracle;

use lara::config::{Config, QueryMode};
use lara::geometry::CameraRig;
use lara::synthdata::{default_rig, generate_dataset, RenderedSample};
use lara::tensor::{Graph, ParamStore, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Small enough for finite differences over every parameter.
pub fn micro_config() -> Config {
    let mut cfg = Config::default();
    let m = &mut cfg.model;
    m.cameras = 2;
    m.image_h = 32;
    m.image_w = 64;
    m.encoder_channels = vec![3, 4, 4, 4];
    m.feat_channels = 6;
    m.ray_dim = 6;
    m.n_latents = 4;
    m.latent_dim = 16;
    m.self_layers = 1;
    m.heads = 2;
    m.mlp_ratio = 1;
    m.bev_h = 16;
    m.bev_w = 16;
    m.bev_cell_m = 2.0;
    m.d_bev = 8;
    m.bev_query_hidden = 8;
    m.bev_attn_dim = 8;
    m.bev_feat_dim = 8;
    m.bev_mlp_hidden = 8;
    m.bev_cnn_channels = vec![4, 4, 4];
    m.query_mode = QueryMode::CoordsRadial;
    cfg.data.min_boxes = 2;
    cfg.data.max_boxes = 4;
    cfg
}

pub fn micro_samples(cfg: &Config, count: usize, seed: u64) -> Vec<RenderedSample> {
    generate_dataset(cfg, count, seed).unwrap()
}

pub fn config_rig(cfg: &Config) -> CameraRig {
    default_rig(cfg.model.cameras, cfg.model.image_h, cfg.model.image_w, cfg.data.fov_deg).unwrap()
}

pub fn random_images(cfg: &Config, seed: u64) -> Vec<f32> {
    let mut r = rng(seed);
    let m = &cfg.model;
    (0..m.cameras * 3 * m.image_h * m.image_w).map(|_| r.random::<f32>()).collect()
}

/// Maximum relative error between analytic and central-difference
/// gradients of a scalar loss, over up to `per_tensor` entries of every
/// parameter (all entries when smaller).
pub fn grad_check(
    store: &ParamStore<f64>,
    step: f64,
    per_tensor: usize,
    build: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var,
) -> f64 {
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    let grads = g.backward(loss).unwrap();
    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::new();
        let l = build(&mut g, s);
        g.value(l)[0]
    };
    let mut r = rng(99);
    let mut worst = 0.0f64;
    for (name, t) in store.iter() {
        let analytic = grads.get(name).unwrap_or_else(|| panic!("no gradient for {name}"));
        let n = t.numel();
        let picks: Vec<usize> = if n <= per_tensor { (0..n).collect() } else { (0..per_tensor).map(|_| r.random_range(0..n)).collect() };
        for i in picks {
            let mut plus = store.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += step;
            let mut minus = store.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= step;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            if err > worst {
                worst = err;
                if err > 1e-3 {
                    eprintln!("{name}[{i}]: analytic {a:e} numeric {numeric:e}");
                }
            }
        }
    }
    worst
}
