#![allow(dead_code)]

use lara_tensor::{Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, dims: &[usize], scale: f64) -> Tensor<f64> {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), random_vec(rng, n, scale)).unwrap()
}

/// Naive `[m,k]·[k,n]`.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                c[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    c
}

/// `erf` by its Maclaurin series, summed until terms vanish.
pub fn erf_series(x: f64) -> f64 {
    let mut sum = 0.0;
    let mut term = x;
    let mut n = 0.0;
    loop {
        let contrib = term / (2.0 * n + 1.0);
        sum += contrib;
        if contrib.abs() < 1e-18 {
            break;
        }
        n += 1.0;
        term *= -x * x / n;
    }
    2.0 / std::f64::consts::PI.sqrt() * sum
}

/// Central finite-difference check of every scalar of every parameter.
///
/// `build` records a scalar loss; returns the worst relative error.
pub fn grad_check(
    store: &ParamStore<f64>,
    step: f64,
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
    let mut worst = 0.0f64;
    let mut probe = store.clone();
    for (name, t) in store.iter() {
        let analytic = grads.get(name).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
        for i in 0..t.numel() {
            let orig = t.data()[i];
            probe.get_mut(name).unwrap().data_mut()[i] = orig + step;
            let up = eval(&probe);
            probe.get_mut(name).unwrap().data_mut()[i] = orig - step;
            let down = eval(&probe);
            probe.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            worst = worst.max(rel);
        }
    }
    worst
}
