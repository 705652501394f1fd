//! Fits `y = 3x - 1` with a one-unit linear layer, using the tape and AdamW.

use lara_tensor::{backward, AdamW, AdamWConfig, Graph, ParamStore, Tensor};

fn main() {
    let xs: Vec<f64> = (0..16).map(|i| i as f64 / 8.0 - 1.0).collect();
    let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x - 1.0).collect();

    let mut store = ParamStore::<f64>::new(0);
    store.insert("w", Tensor::zeros(&[1, 1])).unwrap();
    store.insert("b", Tensor::zeros(&[1])).unwrap();
    let cfg = AdamWConfig { lr: 0.05, weight_decay: 0.0, ..Default::default() };
    let mut opt = AdamW::new(cfg, &store).unwrap();

    for step in 0..=400 {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![xs.len(), 1], xs.clone()).unwrap());
        let target = g.constant(Tensor::new(vec![ys.len(), 1], ys.clone()).unwrap());
        let (w, b) = (g.param(&store, "w").unwrap(), g.param(&store, "b").unwrap());
        let pred = g.linear(x, w, b).unwrap();
        let neg = g.scale(target, -1.0).unwrap();
        let err = g.add(pred, neg).unwrap();
        let sq = g.mul(err, err).unwrap();
        let loss = g.mean(sq).unwrap();
        if step % 100 == 0 {
            println!("step {step:3}: mse {:.6}", g.value(loss)[0]);
        }
        store.zero_grad();
        backward(&g, loss, &mut store).unwrap();
        opt.step(&mut store).unwrap();
    }
    println!(
        "w = {:.4}, b = {:.4}",
        store.get("w").unwrap().data()[0],
        store.get("b").unwrap().data()[0]
    );
}
