//! The full network: image encoder, ray embedding, latent bottleneck,
//! BEV query decoding and the BEV refinement CNN.

use lara_tensor::{Graph, Init, ParamSpec, ParamStore, Scalar, Tensor, Var};

use crate::attention::{check_memory_contract, BevCross, LatentInputCross, LatentSelf, Mlp};
use crate::config::{ModelConfig, QueryMode};
use crate::error::{LaraError, Result};
use crate::geometry::{rig_ray_field, CameraRig};

/// Std of the latent array and learned query grid at initialization.
pub const EMBEDDING_INIT_STD: f64 = 0.02;
/// Occupied fraction the output head predicts at initialization.
pub const OCCUPANCY_PRIOR: f64 = 0.05;
/// Std of the output head weights at initialization.
pub const HEAD_INIT_STD: f64 = 0.01;

/// Where one input token came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TokenIndex {
    pub camera: usize,
    pub row: usize,
    pub col: usize,
}

/// Token origins in sequence order: camera-major, then row-major.
pub fn token_index(cameras: usize, h: usize, w: usize) -> Vec<TokenIndex> {
    let mut out = Vec::with_capacity(cameras * h * w);
    for camera in 0..cameras {
        for row in 0..h {
            for col in 0..w {
                out.push(TokenIndex { camera, row, col });
            }
        }
    }
    out
}

/// Sequence position of a token.
pub fn token_position(t: TokenIndex, h: usize, w: usize) -> usize {
    (t.camera * h + t.row) * w + t.col
}

/// Normalized BEV coordinates, `(2i/(h−1) − 1, 2j/(w−1) − 1)` per cell,
/// row-major, `h·w × 2`.
pub fn query_coords(h: usize, w: usize) -> Result<Vec<[f64; 2]>> {
    if h < 2 || w < 2 {
        return Err(LaraError::Argument(format!("query grid {h}x{w} needs at least 2 cells per side")));
    }
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            out.push([
                2.0 * i as f64 / (h - 1) as f64 - 1.0,
                2.0 * j as f64 / (w - 1) as f64 - 1.0,
            ]);
        }
    }
    Ok(out)
}

/// Distance of each coordinate pair from the grid center.
pub fn query_radial(coords: &[[f64; 2]]) -> Vec<f64> {
    coords.iter().map(|[x, y]| x.hypot(*y)).collect()
}

/// `bands` frequencies spaced linearly from 1 to `max_freq`.
pub fn fourier_frequencies(bands: usize, max_freq: f64) -> Vec<f64> {
    if bands == 1 {
        return vec![1.0];
    }
    (0..bands)
        .map(|b| 1.0 + (max_freq - 1.0) * b as f64 / (bands - 1) as f64)
        .collect()
}

/// `(z, sin(f₁πz), cos(f₁πz), …, sin(f_Bπz), cos(f_Bπz))`.
pub fn fourier_features(z: f64, freqs: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(1 + 2 * freqs.len());
    out.push(z);
    for f in freqs {
        let (s, c) = (f * std::f64::consts::PI * z).sin_cos();
        out.push(s);
        out.push(c);
    }
    out
}

/// Fourier features of both coordinates, concatenated per cell.
pub fn query_fourier(coords: &[[f64; 2]], bands: usize, max_freq: f64) -> Vec<Vec<f64>> {
    let freqs = fourier_frequencies(bands, max_freq);
    coords
        .iter()
        .map(|[x, y]| {
            let mut v = fourier_features(*x, &freqs);
            v.extend(fourier_features(*y, &freqs));
            v
        })
        .collect()
}

fn conv_spec(name: String, cout: usize, cin: usize, k: usize) -> [ParamSpec; 2] {
    [
        ParamSpec::new(format!("{name}.weight"), &[cout, cin, k, k], Init::He { fan_in: cin * k * k }),
        ParamSpec::new(format!("{name}.bias"), &[cout], Init::Zeros),
    ]
}

fn conv<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    name: &str,
    x: Var,
    stride: usize,
) -> Result<Var> {
    let w = g.param(store, &format!("{name}.weight"))?;
    let b = g.param(store, &format!("{name}.bias"))?;
    let pad = g.dims(w)[3] / 2;
    Ok(g.conv2d(x, w, Some(b), stride, pad)?)
}

fn conv_gelu<S: Scalar>(g: &mut Graph<S>, store: &ParamStore<S>, name: &str, x: Var, stride: usize) -> Result<Var> {
    let y = conv(g, store, name, x, stride)?;
    Ok(g.gelu(y)?)
}

/// Shared per-camera CNN: four stages of two 3×3 convolutions, the second
/// one strided in the first `log2(stride)` stages, then a 1×1 projection.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoder {
    channels: Vec<usize>,
    downsample: usize,
    out_channels: usize,
}

impl ImageEncoder {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            channels: cfg.encoder_channels.clone(),
            downsample: cfg.downsample_stages(),
            out_channels: cfg.feat_channels,
        }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut v = Vec::new();
        let mut cin = 3;
        for (i, &c) in self.channels.iter().enumerate() {
            v.extend(conv_spec(format!("encoder.stage{i}.conv1"), c, cin, 3));
            v.extend(conv_spec(format!("encoder.stage{i}.conv2"), c, c, 3));
            cin = c;
        }
        v.extend(conv_spec("encoder.proj".into(), self.out_channels, cin, 1));
        v
    }

    /// `[C, 3, H, W]` → `[C, c, H/s, W/s]`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, images: Var) -> Result<Var> {
        let mut x = images;
        for i in 0..self.channels.len() {
            x = conv_gelu(g, store, &format!("encoder.stage{i}.conv1"), x, 1)?;
            let stride = if i < self.downsample { 2 } else { 1 };
            x = conv_gelu(g, store, &format!("encoder.stage{i}.conv2"), x, stride)?;
        }
        conv(g, store, "encoder.proj", x, 1)
    }
}

/// Small U-Net over the BEV feature map: residual encoder stages at 1:1,
/// 1:2 and 1:8, bilinear ×4 and ×2 decoding with skip connections, and a
/// 1×1 head to one logit channel.
#[derive(Clone, Debug, PartialEq)]
pub struct BevCnn {
    input: usize,
    c: [usize; 3],
}

impl BevCnn {
    pub fn new(input: usize, channels: &[usize]) -> Self {
        Self { input, c: [channels[0], channels[1], channels[2]] }
    }

    fn residual_specs(name: &str, c: usize) -> Vec<ParamSpec> {
        let mut v = conv_spec(format!("{name}.conv1"), c, c, 3).to_vec();
        v.extend(conv_spec(format!("{name}.conv2"), c, c, 3));
        v
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let [c1, c2, c3] = self.c;
        let mut v = conv_spec("bev_cnn.stem".into(), c1, self.input, 1).to_vec();
        v.extend(Self::residual_specs("bev_cnn.enc1", c1));
        v.extend(conv_spec("bev_cnn.down2".into(), c2, c1, 3));
        v.extend(Self::residual_specs("bev_cnn.enc2", c2));
        v.extend(conv_spec("bev_cnn.down4".into(), c3, c2, 3));
        v.extend(conv_spec("bev_cnn.down8".into(), c3, c3, 3));
        v.extend(Self::residual_specs("bev_cnn.enc3", c3));
        v.extend(conv_spec("bev_cnn.up2".into(), c2, c3 + c2, 3));
        v.extend(conv_spec("bev_cnn.up1".into(), c1, c2 + c1, 3));
        v.push(ParamSpec::new("bev_cnn.head.weight", &[1, c1, 1, 1], Init::Normal { std: HEAD_INIT_STD }));
        let prior = (OCCUPANCY_PRIOR / (1.0 - OCCUPANCY_PRIOR)).ln();
        v.push(ParamSpec::new("bev_cnn.head.bias", &[1], Init::Constant { value: prior }));
        v
    }

    fn residual<S: Scalar>(g: &mut Graph<S>, store: &ParamStore<S>, name: &str, x: Var) -> Result<Var> {
        let h = conv_gelu(g, store, &format!("{name}.conv1"), x, 1)?;
        let h = conv(g, store, &format!("{name}.conv2"), h, 1)?;
        let s = g.add(h, x)?;
        Ok(g.gelu(s)?)
    }

    /// `[F, h, w]` → `[1, h, w]`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let dims = g.dims(x).to_vec();
        if dims.len() != 3 || dims[1] % 8 != 0 || dims[2] % 8 != 0 {
            return Err(LaraError::Argument(format!("BEV CNN input {dims:?} must be [F, h, w] with h, w divisible by 8")));
        }
        let x = conv_gelu(g, store, "bev_cnn.stem", x, 1)?;
        let e1 = Self::residual(g, store, "bev_cnn.enc1", x)?;
        let x = conv_gelu(g, store, "bev_cnn.down2", e1, 2)?;
        let e2 = Self::residual(g, store, "bev_cnn.enc2", x)?;
        let x = conv_gelu(g, store, "bev_cnn.down4", e2, 2)?;
        let x = conv_gelu(g, store, "bev_cnn.down8", x, 2)?;
        let e3 = Self::residual(g, store, "bev_cnn.enc3", x)?;
        let u = g.upsample_bilinear(e3, 4)?;
        let u = g.concat(&[u, e2], 0)?;
        let d2 = conv_gelu(g, store, "bev_cnn.up2", u, 1)?;
        let u = g.upsample_bilinear(d2, 2)?;
        let u = g.concat(&[u, e1], 0)?;
        let d1 = conv_gelu(g, store, "bev_cnn.up1", u, 1)?;
        conv(g, store, "bev_cnn.head", d1, 1)
    }
}

/// Per-sample inputs in graph precision.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleInputs<S: Scalar = f32> {
    /// `[C, 3, H, W]`, scaled to `[-1, 1]`.
    pub images: Tensor<S>,
    /// `[T, 6]` rows of ray origin ⊕ direction.
    pub rays: Tensor<S>,
}

impl<S: Scalar> SampleInputs<S> {
    pub fn cast<T: Scalar>(&self) -> SampleInputs<T> {
        SampleInputs { images: self.images.cast(), rays: self.rays.cast() }
    }
}

/// Nodes of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `[h_bev, w_bev]` pre-sigmoid scores.
    pub logits: Var,
    /// Input-to-latent attention node.
    pub input_attention: Var,
    /// `[T, c + d]` input sequence.
    pub tokens: Var,
    /// `[N, M]` latents after the last self-attention block.
    pub latents: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LaRa {
    cfg: ModelConfig,
    encoder: ImageEncoder,
    ray_mlp: Mlp,
    cross: LatentInputCross,
    selfs: Vec<LatentSelf>,
    query_mlp: Mlp,
    bev_cross: BevCross,
    bev_cnn: BevCnn,
    /// Raw queries for the non-learned modes, `P × query_width` row-major.
    raw_query: Vec<f64>,
}

impl LaRa {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let m = cfg.latent_dim;
        let input_dim = cfg.feat_channels + cfg.ray_dim;
        let coords = query_coords(cfg.bev_h, cfg.bev_w)?;
        let (raw_query, qwidth) = match cfg.query_mode {
            QueryMode::CoordsRadial => {
                let r = query_radial(&coords);
                (coords.iter().zip(&r).flat_map(|(c, r)| [c[0], c[1], *r]).collect(), 3)
            }
            QueryMode::Fourier => {
                let f = query_fourier(&coords, cfg.fourier_bands, cfg.fourier_max_freq);
                (f.concat(), 2 * (2 * cfg.fourier_bands + 1))
            }
            QueryMode::Learned => (Vec::new(), cfg.learned_query_dim),
        };
        Ok(Self {
            cfg: cfg.clone(),
            encoder: ImageEncoder::new(cfg),
            ray_mlp: Mlp::new("ray_mlp", 6, cfg.ray_dim, cfg.ray_dim),
            cross: LatentInputCross::new("cross", m, input_dim, cfg.heads, cfg.mlp_ratio * m)?,
            selfs: (0..cfg.self_layers)
                .map(|l| LatentSelf::new(&format!("self{l}"), m, cfg.heads, cfg.mlp_ratio * m))
                .collect::<Result<_>>()?,
            query_mlp: Mlp::new("query_mlp", qwidth, cfg.bev_query_hidden, cfg.d_bev),
            bev_cross: BevCross::new(
                "bev_cross",
                cfg.d_bev,
                m,
                cfg.heads,
                cfg.bev_attn_dim,
                cfg.bev_feat_dim,
                cfg.bev_mlp_hidden,
            )?,
            bev_cnn: BevCnn::new(cfg.bev_feat_dim, &cfg.bev_cnn_channels),
            raw_query,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &ImageEncoder {
        &self.encoder
    }

    pub fn ray_mlp(&self) -> &Mlp {
        &self.ray_mlp
    }

    pub fn cross_block(&self) -> &LatentInputCross {
        &self.cross
    }

    pub fn self_blocks(&self) -> &[LatentSelf] {
        &self.selfs
    }

    pub fn query_mlp(&self) -> &Mlp {
        &self.query_mlp
    }

    pub fn bev_cross_block(&self) -> &BevCross {
        &self.bev_cross
    }

    pub fn bev_cnn(&self) -> &BevCnn {
        &self.bev_cnn
    }

    /// Width of the raw query fed to `query_mlp`.
    pub fn query_width(&self) -> usize {
        self.query_mlp.input
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let cfg = &self.cfg;
        let mut v = self.encoder.param_specs();
        v.extend(self.ray_mlp.param_specs());
        v.push(ParamSpec::new(
            "latents",
            &[cfg.n_latents, cfg.latent_dim],
            Init::Normal { std: EMBEDDING_INIT_STD },
        ));
        v.extend(self.cross.param_specs());
        for b in &self.selfs {
            v.extend(b.param_specs());
        }
        if cfg.query_mode == QueryMode::Learned {
            v.push(ParamSpec::new(
                "query.learned",
                &[cfg.bev_cells(), cfg.learned_query_dim],
                Init::Normal { std: EMBEDDING_INIT_STD },
            ));
        }
        v.extend(self.query_mlp.param_specs());
        v.extend(self.bev_cross.param_specs());
        v.extend(self.bev_cnn.param_specs());
        v
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamStore<f32>> {
        Ok(lara_tensor::init_params(&self.param_specs(), seed)?)
    }

    pub fn num_params(&self) -> usize {
        self.param_specs().iter().map(ParamSpec::numel).sum()
    }

    /// Packs images in `[0, 1]` (`C × 3 × H × W`, row-major) and the rig's
    /// rays at feature resolution.
    pub fn prepare<S: Scalar>(&self, rig: &CameraRig, images: &[f32]) -> Result<SampleInputs<S>> {
        let cfg = &self.cfg;
        if rig.len() != cfg.cameras || rig.image_size() != (cfg.image_h, cfg.image_w) {
            return Err(LaraError::Argument(format!(
                "rig has {} cameras of {:?}, model expects {} of {}x{}",
                rig.len(),
                rig.image_size(),
                cfg.cameras,
                cfg.image_h,
                cfg.image_w
            )));
        }
        let dims = vec![cfg.cameras, 3, cfg.image_h, cfg.image_w];
        let scaled = images.iter().map(|v| S::from_f64_lossy(*v as f64 * 2.0 - 1.0)).collect();
        let images = Tensor::new(dims, scaled)?;
        let field = rig_ray_field(rig, cfg.feature_h(), cfg.feature_w())?;
        let rows = field.to_rows(cfg.normalize_rays);
        let rays = Tensor::new(vec![field.len(), 6], rows.into_iter().map(S::from_f64_lossy).collect())?;
        Ok(SampleInputs { images, rays })
    }

    /// Raw BEV queries `[P, width]`: a constant, or the learned grid.
    pub fn raw_query<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>) -> Result<Var> {
        if self.cfg.query_mode == QueryMode::Learned {
            return Ok(g.param(store, "query.learned")?);
        }
        let data = self.raw_query.iter().map(|v| S::from_f64_lossy(*v)).collect();
        Ok(g.constant(Tensor::new(vec![self.cfg.bev_cells(), self.query_width()], data)?))
    }

    /// Builds the `[T, c + d]` input sequence from images and rays.
    pub fn input_sequence<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        inputs: &SampleInputs<S>,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let images = g.constant(inputs.images.clone());
        let feats = self.encoder.forward(g, store, images)?;
        let feats = g.permute(feats, &[0, 2, 3, 1])?;
        let feats = g.reshape(feats, &[cfg.tokens(), cfg.feat_channels])?;
        let rays = g.constant(inputs.rays.clone());
        let emb = self.ray_mlp.forward(g, store, rays)?;
        Ok(g.concat(&[feats, emb], 1)?)
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        inputs: &SampleInputs<S>,
    ) -> Result<ForwardOutput> {
        let cfg = &self.cfg;
        let tokens = self.input_sequence(g, store, inputs)?;
        let latents = g.param(store, "latents")?;
        let cross = self.cross.forward(g, store, latents, tokens)?;
        let mut lat = cross.out;
        for block in &self.selfs {
            lat = block.forward(g, store, lat)?.out;
        }
        let raw = self.raw_query(g, store)?;
        let query = self.query_mlp.forward(g, store, raw)?;
        let bev = self.bev_cross.forward(g, store, query, lat)?.out;
        let bev = g.reshape(bev, &[cfg.bev_h, cfg.bev_w, cfg.bev_feat_dim])?;
        let bev = g.permute(bev, &[2, 0, 1])?;
        let logits = self.bev_cnn.forward(g, store, bev)?;
        let logits = g.reshape(logits, &[cfg.bev_h, cfg.bev_w])?;
        check_memory_contract(g.allocations(), cfg.tokens(), cfg.bev_cells())?;
        Ok(ForwardOutput { logits, input_attention: cross.attention, tokens, latents: lat })
    }
}

/// Binary mask from logits at probability 0.5.
pub fn binarize<S: Scalar>(logits: &[S]) -> Vec<bool> {
    logits.iter().map(|z| *z > S::zero()).collect()
}
