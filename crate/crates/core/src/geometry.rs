//! Pinhole camera model and per-pixel viewing rays.
//!
//! Frames: the ego frame has x forward, y left, z up. A camera frame has
//! x right, y down, z along the optical axis. Extrinsic rotations map
//! camera-frame vectors into the ego frame, and translations are the
//! optical centers in ego coordinates. Pixel `(u, v)` denotes the center of
//! column `u`, row `v`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, LaraError, Result};

/// Depth at or below which a point counts as behind the camera.
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite() && cx.is_finite() && cy.is_finite()) {
            return arg_err(format!("intrinsics need finite positive focal lengths, got fx={fx} fy={fy}"));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Closed-form inverse of [`matrix`](Self::matrix).
    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }
}

/// Intrinsics for a map downsampled by `stride`, keeping pixel centers
/// aligned: the center of an `s×s` block maps to the center of its cell.
pub fn scale_intrinsics(k: &CameraIntrinsics, stride: usize) -> Result<CameraIntrinsics> {
    if stride == 0 {
        return arg_err("stride must be positive");
    }
    let s = stride as f64;
    CameraIntrinsics::new(k.fx / s, k.fy / s, (k.cx + 0.5) / s - 0.5, (k.cy + 0.5) / s - 0.5)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraExtrinsics {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl CameraExtrinsics {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if !(ortho <= 1e-6 && (det - 1.0).abs() <= 1e-6) || !translation.iter().all(|v| v.is_finite()) {
            return arg_err(format!(
                "rotation must be orthonormal with det +1 (|RᵀR−I|={ortho:.2e}, det={det})"
            ));
        }
        Ok(Self { rotation, translation })
    }

    /// Camera looking horizontally along ego azimuth `yaw`, centered at `t`.
    pub fn looking_at_yaw(yaw: f64, translation: Vector3<f64>) -> Self {
        let (s, c) = yaw.sin_cos();
        #[rustfmt::skip]
        let rotation = Matrix3::new(
            s,   0.0, c,
            -c,  0.0, s,
            0.0, -1.0, 0.0,
        );
        Self { rotation, translation }
    }

    /// Ego-from-camera rotation.
    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    /// Optical center in ego coordinates.
    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub width: usize,
    pub height: usize,
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: CameraExtrinsics,
}

/// Cameras sharing one image size.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraRig {
    cameras: Vec<Camera>,
}

impl CameraRig {
    pub fn new(cameras: Vec<Camera>) -> Result<Self> {
        let Some(first) = cameras.first() else {
            return arg_err("a rig needs at least one camera");
        };
        if first.width == 0 || first.height == 0 {
            return arg_err("camera images must be non-empty");
        }
        if cameras.iter().any(|c| (c.width, c.height) != (first.width, first.height)) {
            return arg_err("all cameras in a rig must share one image size");
        }
        Ok(Self { cameras })
    }

    pub fn cameras(&self) -> &[Camera] {
        &self.cameras
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    /// `(height, width)` of every image.
    pub fn image_size(&self) -> (usize, usize) {
        (self.cameras[0].height, self.cameras[0].width)
    }

    /// The same rig with cameras reordered so that slot `i` holds `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.len()];
        if order.len() != self.len() || order.iter().any(|&i| i >= self.len() || std::mem::replace(&mut seen[i], true)) {
            return arg_err(format!("{order:?} is not a permutation of {} cameras", self.len()));
        }
        Ok(Self { cameras: order.iter().map(|&i| self.cameras[i]).collect() })
    }

    pub fn to_json(&self) -> Result<String> {
        let entries: Vec<CalibEntry> = self.cameras.iter().map(CalibEntry::from).collect();
        Ok(serde_json::to_string_pretty(&entries)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let entries: Vec<CalibEntry> = serde_json::from_str(text)?;
        Self::new(entries.into_iter().map(Camera::try_from).collect::<Result<_>>()?)
    }
}

/// Per-camera calibration record as stored on disk.
#[derive(Serialize, Deserialize)]
struct CalibEntry {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    /// Row-major ego-from-camera rotation.
    rotation: [f64; 9],
    translation: [f64; 3],
    width: usize,
    height: usize,
}

impl From<&Camera> for CalibEntry {
    fn from(c: &Camera) -> Self {
        let r = c.extrinsics.rotation();
        let t = c.extrinsics.translation();
        CalibEntry {
            fx: c.intrinsics.fx,
            fy: c.intrinsics.fy,
            cx: c.intrinsics.cx,
            cy: c.intrinsics.cy,
            rotation: std::array::from_fn(|i| r[(i / 3, i % 3)]),
            translation: [t.x, t.y, t.z],
            width: c.width,
            height: c.height,
        }
    }
}

impl TryFrom<CalibEntry> for Camera {
    type Error = LaraError;

    fn try_from(e: CalibEntry) -> Result<Self> {
        Ok(Camera {
            width: e.width,
            height: e.height,
            intrinsics: CameraIntrinsics::new(e.fx, e.fy, e.cx, e.cy)?,
            extrinsics: CameraExtrinsics::new(
                Matrix3::from_row_slice(&e.rotation),
                Vector3::from_column_slice(&e.translation),
            )?,
        })
    }
}

/// Ego-frame direction of the ray through pixel `x`, `R·K⁻¹·(x₀, x₁, 1)`.
/// Not normalized; its camera-frame depth component is 1.
pub fn pixel_ray_direction(x: [f64; 2], k: &CameraIntrinsics, r: &Matrix3<f64>) -> Vector3<f64> {
    r * (k.inverse_matrix() * Vector3::new(x[0], x[1], 1.0))
}

/// Result of projecting an ego-frame point into a camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Projection {
    Visible { pixel: [f64; 2], depth: f64 },
    Behind,
}

pub fn project_point(p: &Vector3<f64>, intrinsics: &CameraIntrinsics, extrinsics: &CameraExtrinsics) -> Projection {
    let cam = extrinsics.rotation().transpose() * (p - extrinsics.translation());
    let q = intrinsics.matrix() * cam;
    if q.z <= MIN_DEPTH {
        return Projection::Behind;
    }
    Projection::Visible { pixel: [q.x / q.z, q.y / q.z], depth: q.z }
}

/// Azimuth of an ego-frame vector in the ground plane, in `(-π, π]`.
pub fn azimuth(v: &Vector3<f64>) -> f64 {
    v.y.atan2(v.x)
}

/// Origins and directions of the rays through every feature-map cell.
/// Index `(k, i, j)` lives at `(k·h + i)·w + j`.
#[derive(Clone, Debug, PartialEq)]
pub struct RayField {
    pub cameras: usize,
    pub h: usize,
    pub w: usize,
    pub origins: Vec<Vector3<f64>>,
    pub directions: Vec<Vector3<f64>>,
}

impl RayField {
    pub fn index(&self, camera: usize, row: usize, col: usize) -> usize {
        (camera * self.h + row) * self.w + col
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    /// Row-major `len × 6` table of `origin ⊕ direction`.
    pub fn to_rows(&self, normalize: bool) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len() * 6);
        for (o, d) in self.origins.iter().zip(&self.directions) {
            let d = if normalize { d.normalize() } else { *d };
            out.extend_from_slice(&[o.x, o.y, o.z, d.x, d.y, d.z]);
        }
        out
    }
}

/// Rays for an `fh × fw` feature map of every camera, using intrinsics
/// rescaled by the implied stride.
pub fn rig_ray_field(rig: &CameraRig, fh: usize, fw: usize) -> Result<RayField> {
    let (h, w) = rig.image_size();
    if fh == 0 || fw == 0 || h % fh != 0 || w % fw != 0 || h / fh != w / fw {
        return arg_err(format!("feature map {fh}x{fw} is not an integral downsampling of {h}x{w}"));
    }
    let stride = h / fh;
    let n = rig.len() * fh * fw;
    let mut origins = Vec::with_capacity(n);
    let mut directions = Vec::with_capacity(n);
    for cam in rig.cameras() {
        let k = scale_intrinsics(&cam.intrinsics, stride)?;
        let r = cam.extrinsics.rotation();
        for i in 0..fh {
            for j in 0..fw {
                origins.push(*cam.extrinsics.translation());
                directions.push(pixel_ray_direction([j as f64, i as f64], &k, r));
            }
        }
    }
    Ok(RayField { cameras: rig.len(), h: fh, w: fw, origins, directions })
}

/// `count` cameras facing outward at yaws `k·2π/count`, each offset
/// `radius` from the rig axis at height `height`.
pub fn ring_rig(
    count: usize,
    width: usize,
    height_px: usize,
    intrinsics: CameraIntrinsics,
    radius: f64,
    height: f64,
) -> Result<CameraRig> {
    let cameras = (0..count)
        .map(|k| {
            let yaw = k as f64 * std::f64::consts::TAU / count as f64;
            let t = Vector3::new(radius * yaw.cos(), radius * yaw.sin(), height);
            Camera {
                width,
                height: height_px,
                intrinsics,
                extrinsics: CameraExtrinsics::looking_at_yaw(yaw, t),
            }
        })
        .collect();
    CameraRig::new(cameras)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn yaw_rotation_is_proper() {
        for yaw in [0.0, 0.7, -2.5, 3.1] {
            let e = CameraExtrinsics::looking_at_yaw(yaw, Vector3::zeros());
            CameraExtrinsics::new(*e.rotation(), Vector3::zeros()).unwrap();
            let fwd = e.rotation() * Vector3::z();
            assert!((azimuth(&fwd) - yaw.sin().atan2(yaw.cos())).abs() < 1e-12);
            // image "down" is ego "down"
            assert_eq!(e.rotation() * Vector3::y(), -Vector3::z());
        }
    }

    #[test]
    fn inverse_matrix_is_inverse() {
        let k = CameraIntrinsics::new(60.0, 55.0, 29.5, 13.5).unwrap();
        let prod = k.matrix() * k.inverse_matrix();
        assert!((prod - Matrix3::identity()).abs().max() < 1e-15);
    }
}
