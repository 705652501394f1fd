//! One forward and backward pass of the desk model on a rendered scene,
//! with the shapes of the intermediate nodes and the loss.

use std::time::Instant;

use lara::config::Config;
use lara::model::{binarize, LaRa};
use lara::synthdata::{config_rig, generate_sample};
use lara::tensor::backward;
use lara::tensor::Graph;
use lara::train::{bce_loss, iou, mask_from_u8};

fn main() {
    let cfg = Config::default();
    let sample = generate_sample(&cfg, &config_rig(&cfg).unwrap(), 3).unwrap();
    let model = LaRa::new(&cfg.model).unwrap();
    let mut store = model.init_params(0).unwrap();
    println!("{} parameters in {} tensors", model.num_params(), store.len());

    let start = Instant::now();
    let inputs = model.prepare::<f32>(&sample.rig, &sample.images).unwrap();
    let mut g = Graph::new();
    let out = model.forward(&mut g, &store, &inputs).unwrap();
    let loss = bce_loss(&mut g, out.logits, &sample.bev_gt).unwrap();
    let forward = start.elapsed();
    backward(&g, loss, &mut store).unwrap();
    println!("tokens {:?}", g.dims(out.tokens));
    println!("latents {:?}", g.dims(out.latents));
    println!("logits {:?}", g.dims(out.logits));
    println!(
        "loss {:.4}, forward {:.0} ms, forward+backward {:.0} ms, {} buffers",
        g.value(loss)[0],
        forward.as_secs_f64() * 1e3,
        start.elapsed().as_secs_f64() * 1e3,
        g.allocations().len()
    );
    let pred = binarize(g.value(out.logits));
    println!("untrained IoU {:.4}", iou(&pred, &mask_from_u8(&sample.bev_gt)).unwrap());
}
