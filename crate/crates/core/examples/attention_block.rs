//! Runs the latent-to-input cross-attention block on random tokens and
//! shows that each latent's attention is a distribution over the tokens.

use lara::attention::{check_memory_contract, LatentInputCross};
use lara::tensor::{init_params, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let (latents, latent_dim, tokens, token_dim, heads) = (8, 32, 500, 48, 4);
    let block = LatentInputCross::new("cross", latent_dim, token_dim, heads, 2 * latent_dim).unwrap();
    let store = init_params(&block.param_specs(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut random = |n: usize, m: usize| Tensor::from_fn(&[n, m], |_| rng.random_range(-1.0f32..1.0));

    let mut g = Graph::new();
    let lat = g.constant(random(latents, latent_dim));
    let input = g.constant(random(tokens, token_dim));
    let out = block.forward(&mut g, &store, lat, input).unwrap();
    println!("latents {:?} -> {:?}", g.dims(lat), g.dims(out.out));

    let (weights, h, nq, nk) = g.attention_weights(out.attention).unwrap();
    println!("attention {h} heads x {nq} latents x {nk} tokens");
    for head in 0..h {
        let row = &weights[head * nq * nk..head * nq * nk + nk];
        let (best, peak) = row.iter().enumerate().fold((0, 0.0f32), |a, (i, &v)| if v > a.1 { (i, v) } else { a });
        println!(
            "head {head}, latent 0: row sum {:.6}, peak {peak:.4} at token {best} (uniform {:.4})",
            row.iter().sum::<f32>(),
            1.0 / nk as f32
        );
    }
    match check_memory_contract(&g.allocations(), tokens, tokens) {
        Ok(()) => println!("no buffer grows with tokens squared"),
        Err(e) => println!("{e}"),
    }
}
