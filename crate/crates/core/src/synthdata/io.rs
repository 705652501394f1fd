//! On-disk dataset layout:
//!
//! ```text
//! root/manifest.json            version, count, config echo, per-sample summary
//! root/sample_00000/cam_0.png   8-bit RGB, one per camera
//! root/sample_00000/calib.json  per-camera intrinsics and extrinsics
//! root/sample_00000/bev_gt.pgm  binary P5, 0 or 255, row 0 furthest forward
//! root/sample_00000/scene.json  box layout
//! ```

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{RenderedSample, SceneSpec};
use crate::config::Config;
use crate::error::{LaraError, Result};
use crate::geometry::CameraRig;

pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub dir: String,
    pub boxes: usize,
    /// Fraction of each box's silhouette hidden by other boxes.
    pub occlusion: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub count: usize,
    pub config: Config,
    pub samples: Vec<ManifestEntry>,
}

pub fn sample_dir_name(index: usize) -> String {
    format!("sample_{index:05}")
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a `3 × H × W` planar image as RGB PNG bytes.
pub fn encode_png(planar: &[f32], width: usize, height: usize) -> Result<Vec<u8>> {
    let n = width * height;
    let mut rgb = Vec::with_capacity(3 * n);
    for i in 0..n {
        for c in 0..3 {
            rgb.push(quantize(planar[c * n + i]));
        }
    }
    encode_rgb8(&rgb, width, height)
}

/// Encodes interleaved RGB bytes as PNG.
pub fn encode_rgb8(rgb: &[u8], width: usize, height: usize) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| LaraError::Dataset(e.to_string()))?;
    w.write_image_data(rgb).map_err(|e| LaraError::Dataset(e.to_string()))?;
    w.finish().map_err(|e| LaraError::Dataset(e.to_string()))?;
    Ok(out)
}

/// Decodes an 8-bit RGB PNG into a planar `3 × H × W` image in `[0, 1]`.
pub fn decode_png(bytes: &[u8]) -> std::result::Result<(Vec<f32>, usize, usize), String> {
    let dec = png::Decoder::new(Cursor::new(bytes));
    let mut reader = dec.read_info().map_err(|e| e.to_string())?;
    let size = reader.output_buffer_size().ok_or("image too large")?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(format!("expected 8-bit RGB, got {:?} {:?}", info.color_type, info.bit_depth));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let n = w * h;
    let mut planar = vec![0f32; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            planar[c * n + i] = buf[3 * i + c] as f32 / 255.0;
        }
    }
    Ok((planar, w, h))
}

pub fn encode_pgm(mask: &[u8], width: usize, height: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(mask.iter().map(|v| if *v != 0 { 255 } else { 0 }));
    out
}

/// Parses a binary P5 mask; any nonzero value reads as 1.
pub fn decode_pgm(bytes: &[u8]) -> std::result::Result<(Vec<u8>, usize, usize), String> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated PGM header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(format!("expected an 8-bit P5 image, got header {fields:?}"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|e| format!("bad PGM size `{s}`: {e}"));
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let data = &bytes[pos + 1..];
    if data.len() != w * h {
        return Err(format!("PGM payload has {} bytes, expected {}", data.len(), w * h));
    }
    Ok((data.iter().map(|v| (*v != 0) as u8).collect(), w, h))
}

fn write_file(path: PathBuf, bytes: &[u8]) -> Result<()> {
    fs::write(&path, bytes).map_err(LaraError::file(path))
}

/// Writes samples and a manifest under `root`, creating it if needed.
pub fn write_dataset(root: &Path, cfg: &Config, samples: &[RenderedSample]) -> Result<Manifest> {
    fs::create_dir_all(root).map_err(LaraError::file(root))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (index, s) in samples.iter().enumerate() {
        let ctx = |e: LaraError| LaraError::Sample { index, detail: e.to_string() };
        let dir = root.join(sample_dir_name(index));
        fs::create_dir_all(&dir).map_err(LaraError::file(&dir)).map_err(ctx)?;
        let (h, w) = s.rig.image_size();
        let per_cam = 3 * h * w;
        for (k, img) in s.images.chunks_exact(per_cam).enumerate() {
            let png = encode_png(img, w, h).map_err(ctx)?;
            write_file(dir.join(format!("cam_{k}.png")), &png).map_err(ctx)?;
        }
        write_file(dir.join("calib.json"), s.rig.to_json().map_err(ctx)?.as_bytes()).map_err(ctx)?;
        let pgm = encode_pgm(&s.bev_gt, cfg.model.bev_w, cfg.model.bev_h);
        write_file(dir.join("bev_gt.pgm"), &pgm).map_err(ctx)?;
        let scene = serde_json::to_string_pretty(&s.scene).map_err(LaraError::from).map_err(ctx)?;
        write_file(dir.join("scene.json"), scene.as_bytes()).map_err(ctx)?;
        entries.push(ManifestEntry {
            dir: sample_dir_name(index),
            boxes: s.scene.boxes.len(),
            occlusion: s.occlusion.clone(),
        });
    }
    let manifest = Manifest { version: DATASET_VERSION, count: samples.len(), config: cfg.clone(), samples: entries };
    write_file(root.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(LaraError::file(&path))?;
    let m: Manifest = serde_json::from_str(&text)
        .map_err(|e| LaraError::Dataset(format!("{}: malformed manifest: {e}", path.display())))?;
    if m.version != DATASET_VERSION {
        return Err(LaraError::Dataset(format!(
            "manifest version {} is not supported (expected {DATASET_VERSION})",
            m.version
        )));
    }
    if m.count != m.samples.len() {
        return Err(LaraError::Dataset(format!(
            "manifest count {} disagrees with its {} sample entries",
            m.count,
            m.samples.len()
        )));
    }
    Ok(m)
}

fn read_sample(root: &Path, m: &Manifest, index: usize) -> std::result::Result<RenderedSample, String> {
    let entry = &m.samples[index];
    let dir = root.join(&entry.dir);
    let read = |name: &str| fs::read(dir.join(name)).map_err(|e| format!("{name}: {e}"));
    let rig = CameraRig::from_json(&String::from_utf8_lossy(&read("calib.json")?)).map_err(|e| format!("calib.json: {e}"))?;
    let (h, w) = rig.image_size();
    let mut images = Vec::with_capacity(rig.len() * 3 * h * w);
    for k in 0..rig.len() {
        let name = format!("cam_{k}.png");
        let (img, iw, ih) = decode_png(&read(&name)?).map_err(|e| format!("{name}: {e}"))?;
        if (ih, iw) != (h, w) {
            return Err(format!("{name} is {iw}x{ih}, calibration says {w}x{h}"));
        }
        images.extend(img);
    }
    let (bev_gt, bw, bh) = decode_pgm(&read("bev_gt.pgm")?).map_err(|e| format!("bev_gt.pgm: {e}"))?;
    if (bh, bw) != (m.config.model.bev_h, m.config.model.bev_w) {
        return Err(format!("bev_gt.pgm is {bw}x{bh}, config says {}x{}", m.config.model.bev_w, m.config.model.bev_h));
    }
    let scene: SceneSpec =
        serde_json::from_slice(&read("scene.json")?).map_err(|e| format!("scene.json: {e}"))?;
    Ok(RenderedSample { images, rig, bev_gt, scene, occlusion: entry.occlusion.clone() })
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset(root: &Path) -> Result<(Manifest, Vec<RenderedSample>)> {
    let m = read_manifest(root)?;
    let samples = (0..m.count)
        .map(|index| read_sample(root, &m, index).map_err(|detail| LaraError::Sample { index, detail }))
        .collect::<Result<Vec<_>>>()?;
    Ok((m, samples))
}
