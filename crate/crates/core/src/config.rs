//! Run configuration: model shape, synthetic data, and training settings.
//!
//! A config is resolved in three layers: a base profile (`desk` or `paper`),
//! an optional TOML file merged on top, then dotted `section.key=value`
//! overrides. Unknown keys are rejected at every layer.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LaraError, Result};

const DESK: &str = include_str!("../profiles/desk.toml");
const PAPER: &str = include_str!("../profiles/paper.toml");

/// How the raw BEV query grid is built before `MLP_bev`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryMode {
    /// Normalized cell coordinates plus radial distance (3 channels).
    CoordsRadial,
    /// Per-axis Fourier features of the normalized coordinates.
    Fourier,
    /// A free parameter grid.
    Learned,
}

impl fmt::Display for QueryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QueryMode::CoordsRadial => "coords_radial",
            QueryMode::Fourier => "fourier",
            QueryMode::Learned => "learned",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub cameras: usize,
    pub image_h: usize,
    pub image_w: usize,
    /// Output stride of the image encoder, a power of two up to 16.
    pub stride: usize,
    /// Width of each of the four encoder stages.
    pub encoder_channels: Vec<usize>,
    /// Semantic feature width per token.
    pub feat_channels: usize,
    /// Ray embedding width per token.
    pub ray_dim: usize,
    /// Number of latents.
    #[serde(rename = "N")]
    pub n_latents: usize,
    /// Latent width.
    #[serde(rename = "M")]
    pub latent_dim: usize,
    /// Number of latent self-attention blocks.
    #[serde(rename = "L")]
    pub self_layers: usize,
    pub heads: usize,
    /// Hidden width of latent MLPs as a multiple of the latent width.
    pub mlp_ratio: usize,
    pub bev_h: usize,
    pub bev_w: usize,
    pub bev_cell_m: f64,
    pub d_bev: usize,
    pub bev_query_hidden: usize,
    /// Inner width of the BEV cross-attention.
    pub bev_attn_dim: usize,
    /// Channel width handed to the BEV CNN.
    pub bev_feat_dim: usize,
    pub bev_mlp_hidden: usize,
    /// BEV CNN widths at 1:1, 1:2 and 1:8.
    pub bev_cnn_channels: Vec<usize>,
    pub query_mode: QueryMode,
    pub fourier_bands: usize,
    pub fourier_max_freq: f64,
    pub learned_query_dim: usize,
    pub normalize_rays: bool,
}

impl ModelConfig {
    pub fn feature_h(&self) -> usize {
        self.image_h / self.stride
    }

    pub fn feature_w(&self) -> usize {
        self.image_w / self.stride
    }

    /// Number of input tokens, `C·h·w`.
    pub fn tokens(&self) -> usize {
        self.cameras * self.feature_h() * self.feature_w()
    }

    pub fn bev_cells(&self) -> usize {
        self.bev_h * self.bev_w
    }

    /// BEV extent in meters along (forward, lateral).
    pub fn bev_extent_m(&self) -> [f64; 2] {
        [self.bev_h as f64 * self.bev_cell_m, self.bev_w as f64 * self.bev_cell_m]
    }

    /// Number of downsampling encoder stages.
    pub fn downsample_stages(&self) -> usize {
        self.stride.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LaraError::Config(msg));
        if self.cameras == 0 {
            return bad("model.cameras must be at least 1".into());
        }
        if !self.stride.is_power_of_two() || self.stride > 16 {
            return bad(format!("model.stride must be a power of two up to 16, got {}", self.stride));
        }
        if self.image_h == 0 || self.image_w == 0 || self.image_h % self.stride != 0 || self.image_w % self.stride != 0 {
            return bad(format!(
                "model.stride {} must divide the image size {}x{}",
                self.stride, self.image_h, self.image_w
            ));
        }
        if self.encoder_channels.len() != 4 || self.encoder_channels.contains(&0) {
            return bad("model.encoder_channels needs four positive widths".into());
        }
        if self.bev_cnn_channels.len() != 3 || self.bev_cnn_channels.contains(&0) {
            return bad("model.bev_cnn_channels needs three positive widths".into());
        }
        let widths = [
            ("feat_channels", self.feat_channels),
            ("ray_dim", self.ray_dim),
            ("N", self.n_latents),
            ("M", self.latent_dim),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("d_bev", self.d_bev),
            ("bev_query_hidden", self.bev_query_hidden),
            ("bev_attn_dim", self.bev_attn_dim),
            ("bev_feat_dim", self.bev_feat_dim),
            ("bev_mlp_hidden", self.bev_mlp_hidden),
            ("learned_query_dim", self.learned_query_dim),
        ];
        for (key, v) in widths {
            if v == 0 {
                return bad(format!("model.{key} must be positive"));
            }
        }
        for (key, d) in [("M", self.latent_dim), ("bev_attn_dim", self.bev_attn_dim)] {
            if d % self.heads != 0 {
                return bad(format!("model.heads {} must divide model.{key} {d}", self.heads));
            }
        }
        if self.bev_h < 8 || self.bev_w < 8 || self.bev_h % 8 != 0 || self.bev_w % 8 != 0 {
            return bad(format!(
                "BEV grid {}x{} must be a positive multiple of 8 on both sides",
                self.bev_h, self.bev_w
            ));
        }
        if !(self.bev_cell_m.is_finite() && self.bev_cell_m > 0.0) {
            return bad(format!("model.bev_cell_m must be positive, got {}", self.bev_cell_m));
        }
        if self.query_mode == QueryMode::Fourier
            && (self.fourier_bands == 0 || !(self.fourier_max_freq >= 1.0))
        {
            return bad("fourier queries need fourier_bands >= 1 and fourier_max_freq >= 1".into());
        }
        if self.n_latents >= self.tokens() {
            log::warn!(
                "{} latents for only {} input tokens: the bottleneck does not compress",
                self.n_latents,
                self.tokens()
            );
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Horizontal field of view of every camera.
    pub fov_deg: f64,
    /// Distance of each optical center from the rig axis.
    pub rig_radius_m: f64,
    pub cam_height_m: f64,
    pub min_boxes: usize,
    pub max_boxes: usize,
    /// Minimum distance between a box footprint and the ego origin.
    pub ego_clearance_m: f64,
    pub seed: u64,
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LaraError::Config(msg));
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return bad(format!("data.fov_deg must lie in (0, 180), got {}", self.fov_deg));
        }
        if !(self.rig_radius_m >= 0.0 && self.cam_height_m > 0.0 && self.ego_clearance_m >= 0.0) {
            return bad("rig radius, camera height and ego clearance must be non-negative".into());
        }
        if self.min_boxes > self.max_boxes {
            return bad(format!(
                "data.min_boxes {} exceeds data.max_boxes {}",
                self.min_boxes, self.max_boxes
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Hard step budget; 0 derives it from `epochs`.
    pub max_steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub dataset: String,
    /// Optional held-out dataset; empty means none.
    pub val_dataset: String,
    pub checkpoint_dir: String,
    /// Steps between metric evaluations; 0 disables.
    pub eval_interval: u64,
    /// Steps between checkpoints; 0 keeps only the final one.
    pub checkpoint_interval: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(LaraError::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(LaraError::Config("train.batch_size must be at least 1".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(LaraError::Config("train.weight_decay must be non-negative".into()));
        }
        Ok(())
    }

    /// Total optimizer steps for a dataset of `n` samples.
    pub fn total_steps(&self, n: usize) -> u64 {
        if self.max_steps > 0 {
            self.max_steps
        } else {
            (self.epochs * n.div_ceil(self.batch_size)) as u64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config::profile("desk").expect("built-in desk profile parses")
    }
}

impl Config {
    pub const PROFILES: [&'static str; 2] = ["desk", "paper"];

    /// A built-in profile by name.
    pub fn profile(name: &str) -> Result<Self> {
        let text = match name {
            "desk" => DESK,
            "paper" => PAPER,
            other => {
                return Err(LaraError::Config(format!(
                    "unknown profile `{other}` (available: desk, paper)"
                )))
            }
        };
        toml::from_str(text).map_err(|e| LaraError::Config(e.to_string()))
    }

    /// Resolves `source` (a profile name or a TOML path) plus overrides.
    /// Files are merged over the desk profile, so they may be partial.
    pub fn resolve(source: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut table = match source {
            Some(name) if Self::PROFILES.contains(&name) => to_table(&Config::profile(name)?)?,
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| LaraError::Config(format!("{path}: {e}")))?;
                let file: toml::Table = text.parse().map_err(|e| LaraError::Config(format!("{path}: {e}")))?;
                let mut base = to_table(&Config::default())?;
                merge(&mut base, file, "")?;
                base
            }
            None => to_table(&Config::default())?,
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| LaraError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| LaraError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.train.validate()
    }

    /// Every valid dotted key, in file order.
    pub fn keys() -> Vec<String> {
        let table = to_table(&Config::default()).expect("config serializes");
        let mut out = Vec::new();
        for (section, v) in &table {
            if let toml::Value::Table(t) = v {
                out.extend(t.keys().map(|k| format!("{section}.{k}")));
            }
        }
        out
    }

    /// Writes the resolved config as `config.toml` under `dir`.
    pub fn echo_into(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(LaraError::file(dir))?;
        let path = dir.join("config.toml");
        std::fs::write(&path, self.to_toml()).map_err(LaraError::file(path))
    }
}

fn to_table(cfg: &Config) -> Result<toml::Table> {
    match toml::Value::try_from(cfg) {
        Ok(toml::Value::Table(t)) => Ok(t),
        Ok(_) => unreachable!("config is a table"),
        Err(e) => Err(LaraError::Config(e.to_string())),
    }
}

fn unknown_key(key: &str) -> LaraError {
    LaraError::Config(format!("unknown key `{key}`; valid keys: {}", Config::keys().join(", ")))
}

fn merge(base: &mut toml::Table, overlay: toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in overlay {
        let full = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o, &full)?,
            (Some(toml::Value::Table(_)), _) => {
                return Err(LaraError::Config(format!("`{full}` must be a table")))
            }
            (Some(slot), v) => *slot = v,
            (None, _) => return Err(unknown_key(&full)),
        }
    }
    Ok(())
}

/// Applies one `section.key=value` override. Values are parsed as TOML and
/// fall back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| LaraError::Config(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    let (section, field) = key.split_once('.').ok_or_else(|| unknown_key(key))?;
    let slot = match table.get_mut(section) {
        Some(toml::Value::Table(t)) => t.get_mut(field).ok_or_else(|| unknown_key(key))?,
        _ => return Err(unknown_key(key)),
    };
    let raw = raw.trim();
    let parsed = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    // Integers are accepted where floats are expected.
    *slot = match (&*slot, parsed) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    };
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_parse_and_validate() {
        for p in Config::PROFILES {
            Config::profile(p).unwrap().validate().unwrap();
        }
        let paper = Config::profile("paper").unwrap();
        assert_eq!((paper.model.feature_h(), paper.model.feature_w()), (28, 60));
        assert_eq!(paper.model.tokens(), 10080);
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let cfg = Config::resolve(None, &["model.N=64".into(), "train.lr=1".into(), "model.query_mode=fourier".into()]).unwrap();
        assert_eq!(cfg.model.n_latents, 64);
        assert_eq!(cfg.train.lr, 1.0);
        assert_eq!(cfg.model.query_mode, QueryMode::Fourier);
        let err = Config::resolve(None, &["model.latents=3".into()]).unwrap_err().to_string();
        assert!(err.contains("unknown key `model.latents`") && err.contains("model.N"), "{err}");
        assert!(Config::resolve(None, &["model.heads=5".into()]).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = Config::profile("paper").unwrap();
        assert_eq!(Config::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }
}
