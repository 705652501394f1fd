//! Multi-head attention and the three transformer blocks of the model:
//! residual latent-input cross-attention, residual latent self-attention,
//! and the non-residual BEV-query cross-attention.
//!
//! All blocks normalize before attending. Projections carry no bias.

use lara_tensor::{Graph, Init, ParamSpec, ParamStore, Scalar, Var};

use crate::error::{LaraError, Result};

fn he(name: String, fan_in: usize, fan_out: usize) -> ParamSpec {
    ParamSpec::new(name, &[fan_in, fan_out], Init::He { fan_in })
}

/// Affine layer norm over the last axis.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormLayer {
    pub prefix: String,
    pub dim: usize,
}

impl LayerNormLayer {
    pub fn new(prefix: impl Into<String>, dim: usize) -> Self {
        Self { prefix: prefix.into(), dim }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        vec![
            ParamSpec::new(format!("{}.gamma", self.prefix), &[self.dim], Init::Ones),
            ParamSpec::new(format!("{}.beta", self.prefix), &[self.dim], Init::Zeros),
        ]
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let gamma = g.param(store, &format!("{}.gamma", self.prefix))?;
        let beta = g.param(store, &format!("{}.beta", self.prefix))?;
        Ok(g.layer_norm(x, gamma, beta)?)
    }
}

/// Two-layer perceptron with a GELU between the layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub prefix: String,
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, input: usize, hidden: usize, output: usize) -> Self {
        Self { prefix: prefix.into(), input, hidden, output }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let p = &self.prefix;
        vec![
            he(format!("{p}.fc1.weight"), self.input, self.hidden),
            ParamSpec::new(format!("{p}.fc1.bias"), &[self.hidden], Init::Zeros),
            he(format!("{p}.fc2.weight"), self.hidden, self.output),
            ParamSpec::new(format!("{p}.fc2.bias"), &[self.output], Init::Zeros),
        ]
    }

    /// Names of the final layer, whose zeroing silences a residual branch.
    pub fn output_params(&self) -> [String; 2] {
        [format!("{}.fc2.weight", self.prefix), format!("{}.fc2.bias", self.prefix)]
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let p = &self.prefix;
        let w1 = g.param(store, &format!("{p}.fc1.weight"))?;
        let b1 = g.param(store, &format!("{p}.fc1.bias"))?;
        let w2 = g.param(store, &format!("{p}.fc2.weight"))?;
        let b2 = g.param(store, &format!("{p}.fc2.bias"))?;
        let h = g.linear(x, w1, b1)?;
        let h = g.gelu(h)?;
        Ok(g.linear(h, w2, b2)?)
    }
}

/// Query, key, value and output projections of one multi-head attention.
///
/// The per-head projections are stored side by side: head `i` uses columns
/// `i·d_emb..(i+1)·d_emb` of `wq`, `wk` and `wv`, with
/// `d_emb = d_model / heads`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiheadWeights {
    pub prefix: String,
    pub heads: usize,
    pub query_dim: usize,
    pub key_dim: usize,
    pub d_model: usize,
    pub out_dim: usize,
}

impl MultiheadWeights {
    pub fn new(
        prefix: impl Into<String>,
        heads: usize,
        query_dim: usize,
        key_dim: usize,
        d_model: usize,
        out_dim: usize,
    ) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(LaraError::Argument(format!("{heads} heads do not divide d_model {d_model}")));
        }
        Ok(Self { prefix: prefix.into(), heads, query_dim, key_dim, d_model, out_dim })
    }

    pub fn d_emb(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let p = &self.prefix;
        vec![
            he(format!("{p}.wq"), self.query_dim, self.d_model),
            he(format!("{p}.wk"), self.key_dim, self.d_model),
            he(format!("{p}.wv"), self.key_dim, self.d_model),
            he(format!("{p}.wo"), self.d_model, self.out_dim),
        ]
    }

    pub fn output_param(&self) -> String {
        format!("{}.wo", self.prefix)
    }

    /// Returns the projected output and the raw attention node, whose
    /// weights are available through [`Graph::attention_weights`].
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        q: Var,
        k: Var,
        v: Var,
    ) -> Result<(Var, Var)> {
        let p = &self.prefix;
        let wq = g.param(store, &format!("{p}.wq"))?;
        let wk = g.param(store, &format!("{p}.wk"))?;
        let wv = g.param(store, &format!("{p}.wv"))?;
        let wo = g.param(store, &format!("{p}.wo"))?;
        let qp = g.matmul(q, wq)?;
        let kp = g.matmul(k, wk)?;
        let vp = g.matmul(v, wv)?;
        let heads = g.attention(qp, kp, vp, self.heads)?;
        Ok((g.matmul(heads, wo)?, heads))
    }
}

/// Block output plus the attention node it ran.
#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub out: Var,
    pub attention: Var,
}

/// `latents + Attn(LN(latents), LN(input), LN(input))`, then
/// `x + MLP(LN(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentInputCross {
    pub norm_latents: LayerNormLayer,
    pub norm_input: LayerNormLayer,
    pub attn: MultiheadWeights,
    pub norm_mlp: LayerNormLayer,
    pub mlp: Mlp,
}

impl LatentInputCross {
    pub fn new(prefix: &str, latent_dim: usize, input_dim: usize, heads: usize, mlp_hidden: usize) -> Result<Self> {
        Ok(Self {
            norm_latents: LayerNormLayer::new(format!("{prefix}.norm_latents"), latent_dim),
            norm_input: LayerNormLayer::new(format!("{prefix}.norm_input"), input_dim),
            attn: MultiheadWeights::new(format!("{prefix}.attn"), heads, latent_dim, input_dim, latent_dim, latent_dim)?,
            norm_mlp: LayerNormLayer::new(format!("{prefix}.norm_mlp"), latent_dim),
            mlp: Mlp::new(format!("{prefix}.mlp"), latent_dim, mlp_hidden, latent_dim),
        })
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut v = self.norm_latents.param_specs();
        v.extend(self.norm_input.param_specs());
        v.extend(self.attn.param_specs());
        v.extend(self.norm_mlp.param_specs());
        v.extend(self.mlp.param_specs());
        v
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        latents: Var,
        input: Var,
    ) -> Result<BlockOutput> {
        let q = self.norm_latents.forward(g, store, latents)?;
        let kv = self.norm_input.forward(g, store, input)?;
        let (a, attention) = self.attn.forward(g, store, q, kv, kv)?;
        let x = g.add(a, latents)?;
        let out = residual_mlp(g, store, &self.norm_mlp, &self.mlp, x)?;
        Ok(BlockOutput { out, attention })
    }
}

/// `latents + Attn(LN(latents), LN(latents), LN(latents))`, then
/// `x + MLP(LN(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSelf {
    pub norm: LayerNormLayer,
    pub attn: MultiheadWeights,
    pub norm_mlp: LayerNormLayer,
    pub mlp: Mlp,
}

impl LatentSelf {
    pub fn new(prefix: &str, latent_dim: usize, heads: usize, mlp_hidden: usize) -> Result<Self> {
        Ok(Self {
            norm: LayerNormLayer::new(format!("{prefix}.norm"), latent_dim),
            attn: MultiheadWeights::new(format!("{prefix}.attn"), heads, latent_dim, latent_dim, latent_dim, latent_dim)?,
            norm_mlp: LayerNormLayer::new(format!("{prefix}.norm_mlp"), latent_dim),
            mlp: Mlp::new(format!("{prefix}.mlp"), latent_dim, mlp_hidden, latent_dim),
        })
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut v = self.norm.param_specs();
        v.extend(self.attn.param_specs());
        v.extend(self.norm_mlp.param_specs());
        v.extend(self.mlp.param_specs());
        v
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, latents: Var) -> Result<BlockOutput> {
        let n = self.norm.forward(g, store, latents)?;
        let (a, attention) = self.attn.forward(g, store, n, n, n)?;
        let x = g.add(a, latents)?;
        let out = residual_mlp(g, store, &self.norm_mlp, &self.mlp, x)?;
        Ok(BlockOutput { out, attention })
    }
}

/// `x = Attn(LN(query), LN(latents), LN(latents))` with no residual from
/// the query, then `x + MLP(LN(x))`. The output projection lifts the
/// attention width to the BEV feature width.
#[derive(Clone, Debug, PartialEq)]
pub struct BevCross {
    pub norm_query: LayerNormLayer,
    pub norm_latents: LayerNormLayer,
    pub attn: MultiheadWeights,
    pub norm_mlp: LayerNormLayer,
    pub mlp: Mlp,
}

impl BevCross {
    pub fn new(
        prefix: &str,
        query_dim: usize,
        latent_dim: usize,
        heads: usize,
        d_model: usize,
        out_dim: usize,
        mlp_hidden: usize,
    ) -> Result<Self> {
        Ok(Self {
            norm_query: LayerNormLayer::new(format!("{prefix}.norm_query"), query_dim),
            norm_latents: LayerNormLayer::new(format!("{prefix}.norm_latents"), latent_dim),
            attn: MultiheadWeights::new(format!("{prefix}.attn"), heads, query_dim, latent_dim, d_model, out_dim)?,
            norm_mlp: LayerNormLayer::new(format!("{prefix}.norm_mlp"), out_dim),
            mlp: Mlp::new(format!("{prefix}.mlp"), out_dim, mlp_hidden, out_dim),
        })
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut v = self.norm_query.param_specs();
        v.extend(self.norm_latents.param_specs());
        v.extend(self.attn.param_specs());
        v.extend(self.norm_mlp.param_specs());
        v.extend(self.mlp.param_specs());
        v
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        query: Var,
        latents: Var,
    ) -> Result<BlockOutput> {
        let q = self.norm_query.forward(g, store, query)?;
        let kv = self.norm_latents.forward(g, store, latents)?;
        let (x, attention) = self.attn.forward(g, store, q, kv, kv)?;
        let out = residual_mlp(g, store, &self.norm_mlp, &self.mlp, x)?;
        Ok(BlockOutput { out, attention })
    }
}

fn residual_mlp<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    norm: &LayerNormLayer,
    mlp: &Mlp,
    x: Var,
) -> Result<Var> {
    let n = norm.forward(g, store, x)?;
    let m = mlp.forward(g, store, n)?;
    Ok(g.add(m, x)?)
}

/// Fails if any recorded buffer has two axes spanning `tokens × tokens` or
/// `cells × tokens`, the shapes the latent bottleneck exists to avoid.
pub fn check_memory_contract(allocations: &[Vec<usize>], tokens: usize, cells: usize) -> Result<()> {
    for dims in allocations {
        for (a, &x) in dims.iter().enumerate() {
            for &y in &dims[a + 1..] {
                let pair = (x.min(y), x.max(y));
                if pair == (tokens, tokens) || pair == (tokens.min(cells), tokens.max(cells)) {
                    return Err(LaraError::Argument(format!(
                        "buffer {dims:?} spans a quadratic token/cell product (T={tokens}, P={cells})"
                    )));
                }
            }
        }
    }
    Ok(())
}
