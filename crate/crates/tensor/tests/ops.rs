mod common;

use common::*;
use lara_tensor::{Graph, ParamStore, Tensor, TensorError};

fn t32(dims: &[usize], data: &[f32]) -> Tensor<f32> {
    Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn linear_identity_and_sum() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(t32(&[1, 2], &[1.0, 2.0]));
    let w = g.constant(t32(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = g.constant(t32(&[2], &[0.0, 0.0]));
    let y = g.linear(x, w, b).unwrap();
    assert_eq!(g.value(y), &[1.0, 2.0]);

    let x = g.constant(t32(&[1, 2], &[1.0, 1.0]));
    let w = g.constant(t32(&[2, 1], &[1.0, 1.0]));
    let b = g.constant(t32(&[1], &[1.0]));
    let y = g.linear(x, w, b).unwrap();
    assert_eq!(g.value(y), &[3.0]);
}

#[test]
fn linear_shape_error() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[2, 3]));
    let w = g.constant(Tensor::zeros(&[4, 2]));
    assert!(matches!(g.matmul(x, w), Err(TensorError::Shape { .. })));
}

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    for (m, k, n) in [(3, 4, 2), (130, 70, 33), (1, 9, 1)] {
        let a = random_vec(&mut r, m * k, 1.0);
        let b = random_vec(&mut r, k * n, 1.0);
        let expect = naive_matmul(&a, &b, m, k, n);
        let mut g = Graph::<f64>::new();
        let av = g.constant(Tensor::new(vec![m, k], a.clone()).unwrap());
        let bv = g.constant(Tensor::new(vec![k, n], b.clone()).unwrap());
        let c = g.matmul(av, bv).unwrap();
        for (x, y) in g.value(c).iter().zip(&expect) {
            assert!((x - y).abs() < 1e-6, "{m}x{k}x{n}");
        }
        // Same product in f32 stays within single-precision noise.
        let mut g = Graph::<f32>::new();
        let av = g.constant(Tensor::new(vec![m, k], a.iter().map(|v| *v as f32).collect()).unwrap());
        let bv = g.constant(Tensor::new(vec![k, n], b.iter().map(|v| *v as f32).collect()).unwrap());
        let c = g.matmul(av, bv).unwrap();
        for (x, y) in g.value(c).iter().zip(&expect) {
            assert!((*x as f64 - y).abs() < 1e-5 * (k as f64), "{m}x{k}x{n}");
        }
    }
}

#[test]
fn gelu_values() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(vec![3], vec![0.0, 10.0, 1.0]).unwrap());
    let y = g.gelu(x).unwrap();
    let v = g.value(y);
    assert_eq!(v[0], 0.0);
    assert!((v[1] - 10.0).abs() < 1e-6);
    let oracle = 0.5 * (1.0 + erf_series(1.0 / 2f64.sqrt()));
    assert!((v[2] - oracle).abs() < 1e-12, "{} vs {oracle}", v[2]);
    assert!((oracle - 0.841_344_746_068_542_9).abs() < 1e-12);
}

#[test]
fn layer_norm_cases() {
    let mut g = Graph::<f64>::new();
    let gamma = g.constant(Tensor::full(&[3], 1.0));
    let beta = g.constant(Tensor::zeros(&[3]));
    let x = g.constant(Tensor::new(vec![1, 3], vec![5.0, 5.0, 5.0]).unwrap());
    let y = g.layer_norm(x, gamma, beta).unwrap();
    assert_eq!(g.value(y), &[0.0, 0.0, 0.0]);

    let gamma2 = g.constant(Tensor::full(&[2], 1.0));
    let beta2 = g.constant(Tensor::zeros(&[2]));
    let x = g.constant(Tensor::new(vec![2], vec![-1.0, 1.0]).unwrap());
    let y = g.layer_norm(x, gamma2, beta2).unwrap();
    let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
    assert!((g.value(y)[0] + expect).abs() < 1e-12);
    assert!((g.value(y)[1] - expect).abs() < 1e-12);

    let mut r = rng(7);
    let d = 64;
    let gamma = g.constant(Tensor::full(&[d], 1.0));
    let beta = g.constant(Tensor::zeros(&[d]));
    let x = g.constant(random_tensor(&mut r, &[1, d], 10.0));
    let y = g.layer_norm(x, gamma, beta).unwrap();
    let v = g.value(y);
    let mean = v.iter().sum::<f64>() / d as f64;
    let std = (v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / d as f64).sqrt();
    assert!(mean.abs() < 1e-6);
    assert!((std - 1.0).abs() < 1e-3);
}

#[test]
fn softmax_cases() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(t32(&[3, 2], &[0.0, 0.0, 0.0, 3f32.ln(), 1000.0, 1000.0]));
    let y = g.softmax_last(x).unwrap();
    let v = g.value(y);
    assert_eq!(&v[0..2], &[0.5, 0.5]);
    assert!((v[2] - 0.25).abs() < 1e-7 && (v[3] - 0.75).abs() < 1e-7);
    assert_eq!(&v[4..6], &[0.5, 0.5]);
}

/// Naive 6-loop cross-correlation.
fn naive_conv(
    x: &[f64],
    (cin, h, w): (usize, usize, usize),
    k: &[f64],
    (cout, kh, kw): (usize, usize, usize),
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[co];
                for ci in 0..cin {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += x[(ci * h + iy as usize) * w + ix as usize]
                                    * k[((co * cin + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                }
                out[(co * oh + oy) * ow + ox] = acc;
            }
        }
    }
    (out, oh, ow)
}

#[test]
fn conv_identity_and_counting() {
    let mut r = rng(3);
    let mut g = Graph::<f64>::new();
    let x = random_tensor(&mut r, &[2, 5, 6], 1.0);
    let xv = g.constant(x.clone());
    let mut k = Tensor::zeros(&[2, 2, 1, 1]);
    k.data_mut()[0] = 1.0;
    k.data_mut()[3] = 1.0;
    let kv = g.constant(k);
    let y = g.conv2d(xv, kv, None, 1, 0).unwrap();
    assert_eq!(g.value(y), x.data());

    let ones = g.constant(Tensor::full(&[1, 6, 6], 1.0));
    let k3 = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = g.conv2d(ones, k3, None, 1, 1).unwrap();
    let v = g.value(y);
    for i in 1..5 {
        for j in 1..5 {
            assert_eq!(v[i * 6 + j], 9.0);
        }
    }
    assert_eq!(v[0], 4.0);
}

#[test]
fn conv_matches_six_loop_oracle() {
    let mut r = rng(4);
    for (cin, h, w, cout, kk, stride, pad, batched) in [
        (3, 7, 9, 4, 3, 1, 1, false),
        (2, 8, 8, 3, 3, 2, 1, true),
        (4, 6, 5, 2, 1, 1, 0, false),
        (2, 9, 7, 3, 5, 2, 2, true),
    ] {
        let batch = if batched { 2 } else { 1 };
        let x = random_vec(&mut r, batch * cin * h * w, 1.0);
        let k = random_vec(&mut r, cout * cin * kk * kk, 1.0);
        let b = random_vec(&mut r, cout, 1.0);
        let mut g = Graph::<f64>::new();
        let xdims = if batched { vec![batch, cin, h, w] } else { vec![cin, h, w] };
        let xv = g.constant(Tensor::new(xdims, x.clone()).unwrap());
        let kv = g.constant(Tensor::new(vec![cout, cin, kk, kk], k.clone()).unwrap());
        let bv = g.constant(Tensor::new(vec![cout], b.clone()).unwrap());
        let y = g.conv2d(xv, kv, Some(bv), stride, pad).unwrap();
        let plane = cin * h * w;
        let mut expect = Vec::new();
        for bi in 0..batch {
            let (o, _, _) = naive_conv(
                &x[bi * plane..(bi + 1) * plane],
                (cin, h, w),
                &k,
                (cout, kk, kk),
                &b,
                stride,
                pad,
            );
            expect.extend(o);
        }
        assert_eq!(g.value(y).len(), expect.len());
        for (a, e) in g.value(y).iter().zip(&expect) {
            assert!((a - e).abs() < 1e-5);
        }
    }
}

#[test]
fn conv_rejects_channel_mismatch_and_even_kernels() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[3, 4, 4]));
    let k = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
    assert!(matches!(g.conv2d(x, k, None, 1, 1), Err(TensorError::Shape { .. })));
    let k = g.constant(Tensor::zeros(&[1, 3, 2, 2]));
    assert!(matches!(g.conv2d(x, k, None, 1, 0), Err(TensorError::Argument { .. })));
}

#[test]
fn upsample_cases() {
    let mut g = Graph::<f64>::new();
    let c = g.constant(Tensor::full(&[2, 3, 3], 0.7));
    let y = g.upsample_bilinear(c, 4).unwrap();
    assert!(g.value(y).iter().all(|v| (v - 0.7).abs() < 1e-15));

    let one = g.constant(Tensor::new(vec![1, 1, 1], vec![2.5]).unwrap());
    let y = g.upsample_bilinear(one, 2).unwrap();
    assert_eq!(g.value(y), &[2.5; 4]);

    // 2x2 -> 4x4, align_corners=false: source coordinate (o + 0.5)/2 - 0.5,
    // clamped at 0, gives taps (0,0,0) (0,1,.25) (0,1,.75) (1,1,0).
    let x = [1.0, 2.0, 3.0, 4.0];
    let xv = g.constant(Tensor::new(vec![1, 2, 2], x.to_vec()).unwrap());
    let y = g.upsample_bilinear(xv, 2).unwrap();
    let taps = [(0, 0, 0.0), (0, 1, 0.25), (0, 1, 0.75), (1, 1, 0.0)];
    let lerp = |a: f64, b: f64, t: f64| a * (1.0 - t) + b * t;
    for (oy, &(y0, y1, ty)) in taps.iter().enumerate() {
        for (ox, &(x0, x1, tx)) in taps.iter().enumerate() {
            let top = lerp(x[y0 * 2 + x0], x[y0 * 2 + x1], tx);
            let bot = lerp(x[y1 * 2 + x0], x[y1 * 2 + x1], tx);
            let e = lerp(top, bot, ty);
            assert!((g.value(y)[oy * 4 + ox] - e).abs() < 1e-12, "({oy},{ox})");
        }
    }
    assert_eq!(g.value(y)[0], 1.0);
    assert_eq!(g.value(y)[5], 1.0 + 0.25 * 1.0 + 0.25 * 2.0);
}

/// Explicit per-head softmax then weighted sum.
fn naive_attention(q: &[f64], k: &[f64], v: &[f64], nq: usize, nk: usize, d: usize, dv: usize, heads: usize) -> Vec<f64> {
    let (dh, dvh) = (d / heads, dv / heads);
    let mut out = vec![0.0; nq * dv];
    for h in 0..heads {
        for i in 0..nq {
            let mut s: Vec<f64> = (0..nk)
                .map(|j| {
                    (0..dh)
                        .map(|c| q[i * d + h * dh + c] * k[j * d + h * dh + c])
                        .sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let m = s.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
            s.iter_mut().for_each(|x| *x = (*x - m).exp() / z);
            for c in 0..dvh {
                out[i * dv + h * dvh + c] = (0..nk).map(|j| s[j] * v[j * dv + h * dvh + c]).sum();
            }
        }
    }
    out
}

#[test]
fn attention_matches_naive_oracle() {
    let mut r = rng(11);
    for (nq, nk, d, dv, heads) in [(3, 4, 4, 4, 1), (5, 7, 8, 6, 2), (2, 3, 12, 12, 3)] {
        let q = random_vec(&mut r, nq * d, 1.0);
        let k = random_vec(&mut r, nk * d, 1.0);
        let v = random_vec(&mut r, nk * dv, 1.0);
        let mut g = Graph::<f64>::new();
        let (qv, kv, vv) = (
            g.constant(Tensor::new(vec![nq, d], q.clone()).unwrap()),
            g.constant(Tensor::new(vec![nk, d], k.clone()).unwrap()),
            g.constant(Tensor::new(vec![nk, dv], v.clone()).unwrap()),
        );
        let o = g.attention(qv, kv, vv, heads).unwrap();
        let expect = naive_attention(&q, &k, &v, nq, nk, d, dv, heads);
        for (a, e) in g.value(o).iter().zip(&expect) {
            assert!((a - e).abs() < 1e-6);
        }
        let (w, h, wq, wk) = g.attention_weights(o).unwrap();
        assert_eq!((h, wq, wk), (heads, nq, nk));
        for row in w.chunks(nk) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(g.allocations().iter().filter(|a| **a == vec![heads, nq, nk]).count(), 1);
    }
}

#[test]
fn attention_singleton_and_saturation() {
    let mut g = Graph::<f64>::new();
    let q = g.constant(Tensor::new(vec![2, 2], vec![0.3, -4.0, 9.0, 1.0]).unwrap());
    let k = g.constant(Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap());
    let v = g.constant(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
    let o = g.attention(q, k, v, 1).unwrap();
    assert_eq!(g.value(o), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);

    let big = 100.0;
    let k = g.constant(Tensor::new(vec![2, 2], vec![big, 0.0, 0.0, big]).unwrap());
    let q = g.constant(Tensor::new(vec![1, 2], vec![0.0, big]).unwrap());
    let v = g.constant(Tensor::new(vec![2, 1], vec![-1.0, 7.0]).unwrap());
    let o = g.attention(q, k, v, 1).unwrap();
    assert!((g.value(o)[0] - 7.0).abs() < 1e-9);
}

#[test]
fn bce_cases() {
    let mut g = Graph::<f32>::new();
    let z = g.constant(Tensor::zeros(&[4]));
    let l = g.bce_with_logits(z, &[0.0, 1.0, 1.0, 0.0]).unwrap();
    assert!((g.value(l)[0] - std::f32::consts::LN_2).abs() < 1e-7);
    let z = g.constant(Tensor::full(&[3], 50.0));
    let l = g.bce_with_logits(z, &[1.0, 1.0, 1.0]).unwrap();
    assert!(g.value(l)[0] < 1e-6 && g.value(l)[0] >= 0.0);

    let mut r = rng(5);
    let zs = random_vec(&mut r, 50, 8.0);
    let ys: Vec<f64> = (0..50).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let oracle: f64 = zs
        .iter()
        .zip(&ys)
        .map(|(z, y)| {
            let p = 1.0 / (1.0 + (-z).exp());
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / 50.0;
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor::new(vec![50], zs).unwrap());
    let l = g.bce_with_logits(z, &ys).unwrap();
    assert!((g.value(l)[0] - oracle).abs() < 1e-6);
}

#[test]
fn non_finite_output_is_an_error() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::full(&[2], f32::MAX));
    assert!(matches!(g.add(x, x), Err(TensorError::NonFinite { op: "add" })));
}

#[test]
fn permute_reshape_concat() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
    let p = g.permute(x, &[2, 0, 1]).unwrap();
    assert_eq!(g.dims(p), &[4, 2, 3]);
    // out[c, a, b] = in[a, b, c]
    assert_eq!(g.value(p)[(1 * 2 + 1) * 3 + 2], ((1 * 3 + 2) * 4 + 1) as f64);
    let back = g.permute(p, &[1, 2, 0]).unwrap();
    assert_eq!(g.value(back), g.value(x));

    let a = g.constant(Tensor::from_fn(&[2, 2], |i| i as f64));
    let b = g.constant(Tensor::from_fn(&[2, 1], |i| 10.0 + i as f64));
    let c = g.concat(&[a, b], 1).unwrap();
    assert_eq!(g.value(c), &[0.0, 1.0, 10.0, 2.0, 3.0, 11.0]);
    let r = g.reshape(c, &[3, 2]).unwrap();
    assert_eq!(g.dims(r), &[3, 2]);
}

#[test]
fn backward_errors() {
    let mut store = ParamStore::<f32>::new(0);
    store.insert("w", Tensor::zeros(&[3])).unwrap();
    let mut g = Graph::new();
    let w = g.param(&store, "w").unwrap();
    let err = lara_tensor::backward(&g, w, &mut store).unwrap_err();
    assert!(err.to_string().contains("scalar"));
    let other = Graph::<f32>::new();
    assert!(other.backward(w).is_err());
    assert!(matches!(g.param(&store, "missing"), Err(TensorError::UnknownParam(_))));
}
