//! Input-to-latent attention study: reprojection into the camera images
//! and a top-down polar profile obtained by collapsing image rows.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use lara_tensor::checkpoint::save_tensors;
use lara_tensor::{Graph, ParamStore, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{LaraError, Result};
use crate::geometry::{azimuth, pixel_ray_direction, scale_intrinsics, CameraRig};
use crate::model::{token_index, token_position, LaRa, TokenIndex};
use crate::synthdata::io::encode_rgb8;

/// Default number of azimuth buckets.
pub const POLAR_BINS: usize = 360;

/// Captured input-to-latent attention for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord {
    pub heads: usize,
    pub latents: usize,
    pub tokens: usize,
    /// `heads × latents × tokens`, each row a distribution over tokens.
    pub weights: Vec<f64>,
    pub token_index: Vec<TokenIndex>,
    pub feature_h: usize,
    pub feature_w: usize,
    pub rig: CameraRig,
}

impl AttentionRecord {
    /// Reads the weights of attention node `node` in `g`.
    pub fn from_graph<S: Scalar>(
        g: &Graph<S>,
        node: Var,
        rig: &CameraRig,
        feature_h: usize,
        feature_w: usize,
    ) -> Result<Self> {
        let (w, heads, latents, tokens) = g
            .attention_weights(node)
            .ok_or_else(|| LaraError::Analysis("node is not an attention operation".into()))?;
        if tokens != rig.len() * feature_h * feature_w {
            return Err(LaraError::Analysis(format!(
                "attention over {tokens} keys does not match {} cameras of {feature_h}x{feature_w}",
                rig.len()
            )));
        }
        Ok(Self {
            heads,
            latents,
            tokens,
            weights: w.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect(),
            token_index: token_index(rig.len(), feature_h, feature_w),
            feature_h,
            feature_w,
            rig: rig.clone(),
        })
    }

    /// Runs the model on one sample and records its input attention.
    /// Also returns the logits.
    pub fn capture(model: &LaRa, store: &ParamStore<f32>, rig: &CameraRig, images: &[f32]) -> Result<(Self, Vec<f32>)> {
        let inputs = model.prepare(rig, images)?;
        let mut g = Graph::new();
        let out = model.forward(&mut g, store, &inputs)?;
        let cfg = model.config();
        let rec = Self::from_graph(&g, out.input_attention, rig, cfg.feature_h(), cfg.feature_w())?;
        Ok((rec, g.value(out.logits).to_vec()))
    }

    pub fn row(&self, head: usize, latent: usize) -> &[f64] {
        let start = (head * self.latents + latent) * self.tokens;
        &self.weights[start..start + self.tokens]
    }

    /// Distribution over tokens for a selection, averaging where requested.
    pub fn select(&self, sel: Selection) -> Result<Vec<f64>> {
        let heads = sel.head.range(self.heads, "head")?;
        let latents = sel.latent.range(self.latents, "latent")?;
        let count = (heads.len() * latents.len()) as f64;
        let mut out = vec![0.0; self.tokens];
        for h in heads {
            for n in latents.clone() {
                for (o, w) in out.iter_mut().zip(self.row(h, n)) {
                    *o += w;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= count);
        Ok(out)
    }

    /// Writes `attn.input.head{H}` tensors (`latents × tokens`) and a JSON
    /// sidecar `<stem>.tokens.json` mapping token index to its origin.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: Vec<(String, Tensor<f32>)> = (0..self.heads)
            .map(|h| {
                let start = h * self.latents * self.tokens;
                let data = self.weights[start..start + self.latents * self.tokens].iter().map(|v| *v as f32).collect();
                Ok((format!("attn.input.head{h}"), Tensor::new(vec![self.latents, self.tokens], data)?))
            })
            .collect::<Result<_>>()?;
        let refs: Vec<(&str, &Tensor<f32>)> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        save_tensors(path, &refs)?;
        let sidecar = path.with_extension("tokens.json");
        fs::write(&sidecar, serde_json::to_string(&self.token_index)?).map_err(LaraError::file(sidecar))
    }
}

/// An index, or the average over all indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pick {
    Index(usize),
    Avg,
}

impl Pick {
    fn range(self, len: usize, what: &str) -> Result<std::ops::Range<usize>> {
        match self {
            Pick::Avg => Ok(0..len),
            Pick::Index(i) if i < len => Ok(i..i + 1),
            Pick::Index(i) => Err(LaraError::Argument(format!("{what} {i} out of range (have {len})"))),
        }
    }
}

impl fmt::Display for Pick {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Pick::Index(i) => write!(f, "{i}"),
            Pick::Avg => f.write_str("avg"),
        }
    }
}

/// Latent and head choice, written like `n=10,h=5` or `n=avg`. An omitted
/// component averages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Selection {
    pub latent: Pick,
    pub head: Pick,
}

impl Selection {
    pub const AVG: Selection = Selection { latent: Pick::Avg, head: Pick::Avg };

    /// File-name tag, `n{latent}_h{head}`.
    pub fn tag(&self) -> String {
        format!("n{}_h{}", self.latent, self.head)
    }
}

impl fmt::Display for Selection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n={},h={}", self.latent, self.head)
    }
}

impl FromStr for Selection {
    type Err = LaraError;

    fn from_str(s: &str) -> Result<Self> {
        let mut sel = Selection::AVG;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let bad = || LaraError::Argument(format!("bad selection `{part}` (expected n=<i|avg> or h=<i|avg>)"));
            let (key, value) = part.split_once('=').ok_or_else(bad)?;
            let pick = match value.trim() {
                "avg" => Pick::Avg,
                v => Pick::Index(v.parse().map_err(|_| bad())?),
            };
            match key.trim() {
                "n" => sel.latent = pick,
                "h" => sel.head = pick,
                _ => return Err(bad()),
            }
        }
        Ok(sel)
    }
}

/// Attention painted onto one camera's feature grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub camera: usize,
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn mass(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Bilinear upsampling by an integer factor (half-pixel aligned).
    pub fn upsample(&self, factor: usize) -> Result<Heatmap> {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new(vec![1, self.h, self.w], self.values.clone())?);
        let y = g.upsample_bilinear(x, factor)?;
        Ok(Heatmap { camera: self.camera, h: self.h * factor, w: self.w * factor, values: g.value(y).to_vec() })
    }
}

/// One heatmap per camera holding each token's attention mass at its cell.
pub fn reproject_to_images(rec: &AttentionRecord, sel: Selection) -> Result<Vec<Heatmap>> {
    let dist = rec.select(sel)?;
    let (h, w) = (rec.feature_h, rec.feature_w);
    let mut maps: Vec<Heatmap> =
        (0..rec.rig.len()).map(|camera| Heatmap { camera, h, w, values: vec![0.0; h * w] }).collect();
    for (t, m) in rec.token_index.iter().zip(&dist) {
        maps[t.camera].values[t.row * w + t.col] += m;
    }
    Ok(maps)
}

/// Attention binned by ground-plane azimuth.
#[derive(Clone, Debug, PartialEq)]
pub struct PolarProfile {
    pub bins: usize,
    /// Attention mass per bucket; sums to the selected mass.
    pub mass: Vec<f64>,
    /// Mean per-row attention level of the columns seen in each bucket,
    /// weighted by angular overlap; 0 where no camera looks.
    pub intensity: Vec<f64>,
    /// `bins × cameras` mass split, for coloring.
    pub camera_mass: Vec<Vec<f64>>,
}

impl PolarProfile {
    /// Azimuth of the center of bucket `b`; buckets tile `[-π, π)`.
    pub fn bucket_center(&self, b: usize) -> f64 {
        -PI + (b as f64 + 0.5) * 2.0 * PI / self.bins as f64
    }

    pub fn bucket_of(&self, az: f64) -> usize {
        bucket_of(az, self.bins)
    }

    /// Camera contributing the most mass to bucket `b`.
    pub fn dominant_camera(&self, b: usize) -> Option<usize> {
        let row = &self.camera_mass[b];
        let (k, m) = row.iter().enumerate().fold((0, 0.0), |best, (k, m)| if *m > best.1 { (k, *m) } else { best });
        (m > 0.0).then_some(k)
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }
}

fn wrap(a: f64) -> f64 {
    let r = (a + PI).rem_euclid(2.0 * PI) - PI;
    if r == -PI { PI } else { r }
}

pub fn bucket_of(az: f64, bins: usize) -> usize {
    let t = (az + PI).rem_euclid(2.0 * PI) / (2.0 * PI);
    ((t * bins as f64) as usize).min(bins - 1)
}

/// Ground-plane azimuth interval `(start, length)` spanned by a feature
/// column, measured on the vertically central row.
pub fn column_interval(rig: &CameraRig, camera: usize, col: usize, fh: usize, fw: usize) -> Result<(f64, f64)> {
    let cam = &rig.cameras()[camera];
    let k = scale_intrinsics(&cam.intrinsics, cam.width / fw)?;
    let r = cam.extrinsics.rotation();
    let vc = (fh as f64 - 1.0) / 2.0;
    let az = |u: f64| azimuth(&pixel_ray_direction([u, vc], &k, r));
    let center = az(col as f64);
    let a = wrap(az(col as f64 - 0.5) - center);
    let b = wrap(az(col as f64 + 0.5) - center);
    Ok((center + a.min(b), (a - b).abs()))
}

/// Collapses the selected attention over image rows and bins each column
/// by azimuth, spreading it over the angular interval the column covers.
pub fn polar_collapse(rec: &AttentionRecord, sel: Selection, bins: usize) -> Result<PolarProfile> {
    if bins == 0 {
        return Err(LaraError::Argument("polar profile needs at least one bucket".into()));
    }
    let dist = rec.select(sel)?;
    let (fh, fw) = (rec.feature_h, rec.feature_w);
    let cams = rec.rig.len();
    let mut mass = vec![0.0; bins];
    let mut weighted_level = vec![0.0; bins];
    let mut coverage = vec![0.0; bins];
    let mut camera_mass = vec![vec![0.0; cams]; bins];
    let width = 2.0 * PI / bins as f64;
    for camera in 0..cams {
        for col in 0..fw {
            let col_mass: f64 = (0..fh)
                .map(|row| dist[token_position(TokenIndex { camera, row, col }, fh, fw)])
                .sum();
            let level = col_mass / fh as f64;
            let (start, len) = column_interval(&rec.rig, camera, col, fh, fw)?;
            if len <= 0.0 {
                let b = bucket_of(start, bins);
                mass[b] += col_mass;
                camera_mass[b][camera] += col_mass;
                continue;
            }
            // Buckets first..=last in unwrapped angle, wrapped modulo `bins`.
            let lo = (start + PI).rem_euclid(2.0 * PI);
            let hi = lo + len;
            let (first, last) = ((lo / width) as usize, (hi / width) as usize);
            for k in first..=last {
                let take = hi.min((k + 1) as f64 * width) - lo.max(k as f64 * width);
                if take <= 0.0 {
                    continue;
                }
                let b = k % bins;
                let frac = take / len;
                mass[b] += col_mass * frac;
                camera_mass[b][camera] += col_mass * frac;
                weighted_level[b] += level * take;
                coverage[b] += take;
            }
        }
    }
    let intensity = weighted_level
        .iter()
        .zip(&coverage)
        .map(|(l, c)| if *c > 0.0 { l / c } else { 0.0 })
        .collect();
    Ok(PolarProfile { bins, mass, intensity, camera_mass })
}

/// Distinct colors for up to eight cameras, then repeating.
pub const CAMERA_COLORS: [&str; 8] =
    ["#e41a1c", "#377eb8", "#4daf4a", "#984ea3", "#ff7f00", "#a65628", "#f781bf", "#17becf"];

/// Polar plot with one radial line per bucket, forward pointing up and
/// left to the left. Radii are linear in intensity, normalized by the
/// largest bucket, whose raw value is recorded in the file.
pub fn polar_svg(profile: &PolarProfile, title: &str) -> String {
    let (size, c, radius) = (420.0, 210.0, 180.0);
    let max = profile.intensity.iter().cloned().fold(0.0, f64::max);
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">\n"
    ));
    s.push_str(&format!("<!-- max intensity {max:e} -->\n"));
    s.push_str(&format!("<title>{}</title>\n", xml_escape(title)));
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    s.push_str(&format!(
        "<circle class=\"frame\" cx=\"{c}\" cy=\"{c}\" r=\"{radius}\" fill=\"none\" stroke=\"#bbbbbb\"/>\n"
    ));
    s.push_str(&format!(
        "<line class=\"forward\" x1=\"{c}\" y1=\"{c}\" x2=\"{c}\" y2=\"{:.3}\" stroke=\"#888888\" stroke-dasharray=\"4 3\"/>\n",
        c - radius - 12.0
    ));
    for b in 0..profile.bins {
        let r = if max > 0.0 { radius * profile.intensity[b] / max } else { 0.0 };
        let az = profile.bucket_center(b);
        let (x, y) = (c - r * az.sin(), c - r * az.cos());
        let color = profile.dominant_camera(b).map_or("#999999", |k| CAMERA_COLORS[k % CAMERA_COLORS.len()]);
        s.push_str(&format!(
            "<line class=\"sample\" x1=\"{c}\" y1=\"{c}\" x2=\"{x:.3}\" y2=\"{y:.3}\" stroke=\"{color}\"/>\n"
        ));
    }
    s.push_str(&format!(
        "<text x=\"10\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">{}</text>\n",
        xml_escape(title)
    ));
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Black-red-yellow-white ramp for `t` in `[0, 1]`.
fn heat(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    [(3.0 * t).min(1.0), (3.0 * t - 1.0).clamp(0.0, 1.0), (3.0 * t - 2.0).clamp(0.0, 1.0)]
}

/// PNG of a camera image (planar `3 × H × W` in `[0, 1]`) blended with an
/// image-resolution heatmap scaled by `max`.
pub fn overlay_png(image: &[f32], heat_map: &Heatmap, max: f64) -> Result<Vec<u8>> {
    let n = heat_map.h * heat_map.w;
    if image.len() != 3 * n {
        return Err(LaraError::Analysis(format!(
            "overlay of a {}-value image with a {}x{} heatmap",
            image.len(),
            heat_map.h,
            heat_map.w
        )));
    }
    let mut rgb = Vec::with_capacity(3 * n);
    for i in 0..n {
        let t = if max > 0.0 { heat_map.values[i] / max } else { 0.0 };
        let hc = heat(t);
        for c in 0..3 {
            let v = 0.45 * image[c * n + i] as f64 + 0.55 * hc[c];
            rgb.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    encode_rgb8(&rgb, heat_map.w, heat_map.h)
}

/// Summary of the files written by [`emit_analysis`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisIndex {
    pub files: Vec<String>,
    pub selections: Vec<SelectionSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub selection: String,
    pub polar: String,
    pub overlays: Vec<String>,
    /// Raw intensity of the largest bucket, the polar plot's scale.
    pub max_intensity: f64,
    /// Attention mass per camera.
    pub camera_mass: Vec<f64>,
}

/// Writes the attention dump, one polar SVG and one overlay PNG per camera
/// for each selection, and `index.json`.
pub fn emit_analysis(
    rec: &AttentionRecord,
    images: &[f32],
    selections: &[Selection],
    bins: usize,
    out_dir: &Path,
) -> Result<AnalysisIndex> {
    fs::create_dir_all(out_dir).map_err(LaraError::file(out_dir))?;
    let (ih, iw) = rec.rig.image_size();
    let factor = ih / rec.feature_h;
    let mut files = vec!["attention.lara".to_string(), "attention.tokens.json".to_string()];
    rec.save(&out_dir.join("attention.lara"))?;
    let mut summaries = Vec::new();
    let write = |name: &str, bytes: &[u8]| {
        let path = out_dir.join(name);
        fs::write(&path, bytes).map_err(LaraError::file(path))
    };
    for &sel in selections {
        let tag = sel.tag();
        let profile = polar_collapse(rec, sel, bins)?;
        let polar = format!("polar_{tag}.svg");
        write(&polar, polar_svg(&profile, &format!("input attention {sel}")).as_bytes())?;
        files.push(polar.clone());
        let maps = reproject_to_images(rec, sel)?;
        let up: Vec<Heatmap> = maps.iter().map(|m| m.upsample(factor)).collect::<Result<_>>()?;
        let max = up.iter().flat_map(|m| m.values.iter().cloned()).fold(0.0, f64::max);
        let mut overlays = Vec::new();
        for m in &up {
            let img = &images[m.camera * 3 * ih * iw..(m.camera + 1) * 3 * ih * iw];
            let name = format!("cam{}_{tag}.png", m.camera);
            write(&name, &overlay_png(img, m, max)?)?;
            overlays.push(name.clone());
            files.push(name);
        }
        summaries.push(SelectionSummary {
            selection: sel.to_string(),
            polar,
            overlays,
            max_intensity: profile.intensity.iter().cloned().fold(0.0, f64::max),
            camera_mass: maps.iter().map(Heatmap::mass).collect(),
        });
    }
    files.push("index.json".into());
    let index = AnalysisIndex { files, selections: summaries };
    write("index.json", serde_json::to_string_pretty(&index)?.as_bytes())?;
    Ok(index)
}
