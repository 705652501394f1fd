//! Direct transcriptions of the attention block formulas over plain
//! nested vectors.

use lara::attention::{BevCross, LatentInputCross, LatentSelf, LayerNormLayer, Mlp, MultiheadWeights};
use lara::tensor::{Graph, ParamSpec, ParamStore, Tensor, Var};
use rand::Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn random_store(specs: &[ParamSpec], seed: u64) -> ParamStore<f64> {
    let mut r = super::rng(seed);
    let mut s = ParamStore::new(seed);
    for spec in specs {
        let data = (0..spec.numel()).map(|_| r.random_range(-1.0..1.0)).collect();
        s.insert(spec.name.clone(), Tensor::new(spec.dims.clone(), data).unwrap()).unwrap();
    }
    s
}

pub fn random_mat(rows: usize, cols: usize, seed: u64) -> Mat {
    let mut r = super::rng(seed);
    (0..rows).map(|_| (0..cols).map(|_| r.random_range(-2.0..2.0)).collect()).collect()
}

pub fn to_tensor(m: &Mat) -> Tensor<f64> {
    Tensor::new(vec![m.len(), m[0].len()], m.concat()).unwrap()
}

pub fn from_graph(g: &Graph<f64>, v: Var) -> Mat {
    let cols = *g.dims(v).last().unwrap();
    g.value(v).chunks(cols).map(|c| c.to_vec()).collect()
}

pub fn param(s: &ParamStore<f64>, name: &str) -> Mat {
    let t = s.get(name).unwrap();
    let cols = *t.dims().last().unwrap();
    t.data().chunks(cols).map(|c| c.to_vec()).collect()
}

pub fn vector(s: &ParamStore<f64>, name: &str) -> Vec<f64> {
    s.get(name).unwrap().data().to_vec()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| (0..b[0].len()).map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum()).collect())
        .collect()
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn layer_norm(x: &Mat, gamma: &[f64], beta: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter().enumerate().map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * gamma[i] + beta[i]).collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2))
}

/// `softmax(Q Kᵀ / √d) V`, plus the weights.
pub fn attn(q: &Mat, k: &Mat, v: &Mat) -> (Mat, Mat) {
    let d = q[0].len() as f64;
    let mut weights = Vec::new();
    let mut out = Vec::new();
    for qi in q {
        let scores: Vec<f64> = k.iter().map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()).collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let w: Vec<f64> = e.iter().map(|x| x / z).collect();
        out.push((0..v[0].len()).map(|c| w.iter().zip(v).map(|(wj, vj)| wj * vj[c]).sum()).collect());
        weights.push(w);
    }
    (out, weights)
}

pub fn columns(m: &Mat, start: usize, len: usize) -> Mat {
    m.iter().map(|r| r[start..start + len].to_vec()).collect()
}

/// `Concat(head_1..head_h) Wᴼ` with `head_i = Attn(Q Wᵢᴼ, K Wᵢᴷ, V Wᵢⱽ)`.
pub fn multihead(s: &ParamStore<f64>, w: &MultiheadWeights, q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let p = &w.prefix;
    let (wq, wk, wv, wo) = (
        param(s, &format!("{p}.wq")),
        param(s, &format!("{p}.wk")),
        param(s, &format!("{p}.wv")),
        param(s, &format!("{p}.wo")),
    );
    let de = w.d_emb();
    let mut concat: Mat = vec![Vec::new(); q.len()];
    for h in 0..w.heads {
        let (out, _) = attn(
            &matmul(q, &columns(&wq, h * de, de)),
            &matmul(k, &columns(&wk, h * de, de)),
            &matmul(v, &columns(&wv, h * de, de)),
        );
        for (c, o) in concat.iter_mut().zip(out) {
            c.extend(o);
        }
    }
    matmul(&concat, &wo)
}

pub fn mlp(s: &ParamStore<f64>, m: &Mlp, x: &Mat) -> Mat {
    let p = &m.prefix;
    let b1 = vector(s, &format!("{p}.fc1.bias"));
    let b2 = vector(s, &format!("{p}.fc2.bias"));
    let h: Mat = matmul(x, &param(s, &format!("{p}.fc1.weight")))
        .into_iter()
        .map(|r| r.iter().zip(&b1).map(|(v, b)| gelu(v + b)).collect())
        .collect();
    matmul(&h, &param(s, &format!("{p}.fc2.weight")))
        .into_iter()
        .map(|r| r.iter().zip(&b2).map(|(v, b)| v + b).collect())
        .collect()
}

pub fn ln(s: &ParamStore<f64>, l: &LayerNormLayer, x: &Mat) -> Mat {
    layer_norm(x, &vector(s, &format!("{}.gamma", l.prefix)), &vector(s, &format!("{}.beta", l.prefix)))
}

pub fn max_diff(a: &Mat, b: &Mat) -> f64 {
    assert_eq!((a.len(), a[0].len()), (b.len(), b[0].len()));
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}


/// `latents := MultiheadAttn(LN(latents), LN(input), LN(input)) + latents`,
/// then `latents := MLP(LN(latents)) + latents`.
pub fn latent_input_block(s: &ParamStore<f64>, b: &LatentInputCross, lat: &Mat, input: &Mat) -> Mat {
    let li = ln(s, &b.norm_input, input);
    let x = add(&multihead(s, &b.attn, &ln(s, &b.norm_latents, lat), &li, &li), lat);
    add(&mlp(s, &b.mlp, &ln(s, &b.norm_mlp, &x)), &x)
}

/// `latents := MultiheadAttn(LN(latents) ×3) + latents`, then the MLP
/// residual.
pub fn latent_self_block(s: &ParamStore<f64>, b: &LatentSelf, lat: &Mat) -> Mat {
    let n = ln(s, &b.norm, lat);
    let x = add(&multihead(s, &b.attn, &n, &n, &n), lat);
    add(&mlp(s, &b.mlp, &ln(s, &b.norm_mlp, &x)), &x)
}

/// `out := MultiheadAttn(LN(query), LN(latents), LN(latents))` with no
/// residual, then `out := MLP(LN(out)) + out`.
pub fn bev_block(s: &ParamStore<f64>, b: &BevCross, query: &Mat, lat: &Mat) -> Mat {
    let ll = ln(s, &b.norm_latents, lat);
    let x = multihead(s, &b.attn, &ln(s, &b.norm_query, query), &ll, &ll);
    add(&mlp(s, &b.mlp, &ln(s, &b.norm_mlp, &x)), &x)
}
