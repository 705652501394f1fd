//! Procedural driving scenes: car-sized boxes on a checkered ground plane,
//! rendered by a small z-buffer rasterizer into every camera of a rig,
//! plus the matching top-down occupancy grid.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Config, DataConfig, ModelConfig};
use crate::error::{arg_err, Result};
use crate::geometry::{Camera, CameraIntrinsics, CameraRig, ring_rig};

pub mod io;

pub use io::{read_dataset, write_dataset, Manifest};

/// Length, width and height ranges of sampled boxes, in meters.
pub const BOX_LENGTH: (f64, f64) = (3.5, 5.5);
pub const BOX_WIDTH: (f64, f64) = (1.6, 2.2);
pub const BOX_HEIGHT: (f64, f64) = (1.4, 1.8);
/// Side of one ground checker square (two squares per period).
pub const CHECKER_M: f64 = 1.0;
/// Cameras clip geometry closer than this along the optical axis.
pub const NEAR_PLANE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    /// Footprint center `(x, y)` in the ego frame.
    pub center: [f64; 2],
    pub yaw: f64,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub albedo: [f32; 3],
}

impl BoxSpec {
    /// Box-local ground coordinates of an ego point.
    fn to_local(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        (c * dx + s * dy, -s * dx + c * dy)
    }

    /// Whether the ground point lies inside the closed footprint rectangle.
    pub fn footprint_contains(&self, x: f64, y: f64) -> bool {
        let (lx, ly) = self.to_local(x, y);
        lx.abs() <= self.length / 2.0 && ly.abs() <= self.width / 2.0
    }

    /// Distance from a ground point to the footprint (0 inside).
    pub fn footprint_distance(&self, x: f64, y: f64) -> f64 {
        let (lx, ly) = self.to_local(x, y);
        let dx = (lx.abs() - self.length / 2.0).max(0.0);
        let dy = (ly.abs() - self.width / 2.0).max(0.0);
        dx.hypot(dy)
    }

    /// Footprint corners, counter-clockwise seen from above.
    pub fn footprint(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.length / 2.0, self.width / 2.0);
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(a, b)| {
            [self.center[0] + c * a - s * b, self.center[1] + s * a + c * b]
        })
    }

    /// The 8 corners: footprint at ground level, then at the roof.
    pub fn corners(&self) -> [Vector3<f64>; 8] {
        let f = self.footprint();
        std::array::from_fn(|i| {
            let [x, y] = f[i % 4];
            Vector3::new(x, y, if i < 4 { 0.0 } else { self.height })
        })
    }

    /// 12 triangles as corner indices, each with its outward face normal.
    pub fn triangles(&self) -> Vec<([usize; 3], Vector3<f64>)> {
        let (s, c) = self.yaw.sin_cos();
        let front = Vector3::new(c, s, 0.0);
        let left = Vector3::new(-s, c, 0.0);
        let faces: [([usize; 4], Vector3<f64>); 6] = [
            ([0, 3, 7, 4], front),
            ([1, 2, 6, 5], -front),
            ([0, 1, 5, 4], left),
            ([3, 2, 6, 7], -left),
            ([4, 5, 6, 7], Vector3::z()),
            ([0, 1, 2, 3], -Vector3::z()),
        ];
        faces
            .iter()
            .flat_map(|([a, b, c, d], n)| [([*a, *b, *c], *n), ([*a, *c, *d], *n)])
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub boxes: Vec<BoxSpec>,
    pub ground_color: [f32; 3],
    pub seed: u64,
}

/// Box placement rules for [`sample_scene`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneSampler {
    /// Forward and lateral extent in meters, centered on the ego origin.
    pub extent: [f64; 2],
    /// Inclusive range of box counts.
    pub boxes: (usize, usize),
    /// Minimum distance from the ego origin to any footprint.
    pub clearance: f64,
}

impl SceneSampler {
    pub fn from_config(model: &ModelConfig, data: &DataConfig) -> Self {
        Self {
            extent: model.bev_extent_m(),
            boxes: (data.min_boxes, data.max_boxes),
            clearance: data.ego_clearance_m,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Draws a scene. Box centers are uniform over the extent and yaws uniform
/// in `[0, 2π)`; a draw whose footprint comes within `clearance` of the
/// ego origin is redrawn. Boxes may overlap each other.
pub fn sample_scene(seed: u64, sampler: &SceneSampler) -> Result<SceneSpec> {
    let [ex, ey] = sampler.extent;
    if !(ex > 0.0 && ey > 0.0 && ex.is_finite() && ey.is_finite()) {
        return arg_err(format!("scene extent {ex}x{ey} must be positive"));
    }
    if sampler.boxes.0 > sampler.boxes.1 {
        return arg_err(format!("box count range {:?} is empty", sampler.boxes));
    }
    // Half-diagonal of the largest box plus clearance must fit in the extent.
    let reach = BOX_LENGTH.1.hypot(BOX_WIDTH.1) / 2.0 + sampler.clearance;
    if sampler.boxes.1 > 0 && reach >= ex.max(ey) / 2.0 {
        return arg_err(format!("scene extent {ex}x{ey} leaves no room outside the ego clearance"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(sampler.boxes.0..=sampler.boxes.1);
    let ground = 0.35 + 0.2 * rng.random::<f32>();
    let ground_color = [ground, ground * (0.95 + 0.1 * rng.random::<f32>()), ground * 0.9];
    let mut boxes = Vec::with_capacity(n);
    while boxes.len() < n {
        let b = BoxSpec {
            center: [uniform(&mut rng, (-ex / 2.0, ex / 2.0)), uniform(&mut rng, (-ey / 2.0, ey / 2.0))],
            yaw: uniform(&mut rng, (0.0, std::f64::consts::TAU)),
            length: uniform(&mut rng, BOX_LENGTH),
            width: uniform(&mut rng, BOX_WIDTH),
            height: uniform(&mut rng, BOX_HEIGHT),
            albedo: random_albedo(&mut rng),
        };
        if b.footprint_distance(0.0, 0.0) >= sampler.clearance {
            boxes.push(b);
        }
    }
    Ok(SceneSpec { boxes, ground_color, seed })
}

/// A saturated color, so boxes stand out from the gray ground.
fn random_albedo(rng: &mut ChaCha8Rng) -> [f32; 3] {
    let hue = rng.random::<f32>() * 6.0;
    let x = 1.0 - ((hue % 2.0) - 1.0).abs();
    let (r, g, b) = match hue as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    let v = 0.55 + 0.4 * rng.random::<f32>();
    [0.1 + v * r * 0.9, 0.1 + v * g * 0.9, 0.1 + v * b * 0.9]
}

/// `count` outward-facing cameras at 1.5 m height, 0.3 m from the rig
/// axis, with horizontal field of view `fov_deg` and square pixels.
pub fn default_rig(count: usize, height: usize, width: usize, fov_deg: f64) -> Result<CameraRig> {
    rig_from_params(count, height, width, fov_deg, 0.3, 1.5)
}

pub fn rig_from_params(
    count: usize,
    height: usize,
    width: usize,
    fov_deg: f64,
    radius: f64,
    cam_height: f64,
) -> Result<CameraRig> {
    if !(fov_deg > 0.0 && fov_deg < 180.0) {
        return arg_err(format!("field of view {fov_deg} must lie in (0, 180) degrees"));
    }
    let fx = (width as f64 / 2.0) / (fov_deg.to_radians() / 2.0).tan();
    let k = CameraIntrinsics::new(fx, fx, width as f64 / 2.0 - 0.5, height as f64 / 2.0 - 0.5)?;
    ring_rig(count, width, height, k, radius, cam_height)
}

/// The rig described by a config.
pub fn config_rig(cfg: &Config) -> Result<CameraRig> {
    rig_from_params(
        cfg.model.cameras,
        cfg.model.image_h,
        cfg.model.image_w,
        cfg.data.fov_deg,
        cfg.data.rig_radius_m,
        cfg.data.cam_height_m,
    )
}

/// Direction of the sun (towards the light), ego frame.
pub fn sun_direction() -> Vector3<f64> {
    Vector3::new(0.4, 0.3, 0.85).normalize()
}

const AMBIENT: f64 = 0.35;
const SKY_HORIZON: [f32; 3] = [0.78, 0.85, 0.92];
const SKY_ZENITH: [f32; 3] = [0.45, 0.62, 0.88];

fn lambert(normal: &Vector3<f64>) -> f32 {
    (AMBIENT + (1.0 - AMBIENT) * normal.dot(&sun_direction()).max(0.0)) as f32
}

/// One camera's render.
#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub width: usize,
    pub height: usize,
    /// `3 × H × W` in `[0, 1]`.
    pub image: Vec<f32>,
    /// Camera-frame depth per pixel; infinite where only sky is seen.
    pub depth: Vec<f64>,
    /// Index of the box seen at each pixel, -1 for ground or sky.
    pub ids: Vec<i32>,
}

/// A camera-frame triangle vertex projected to the screen.
#[derive(Clone, Copy)]
struct ScreenVertex {
    u: f64,
    v: f64,
    inv_z: f64,
}

fn clip_near(poly: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    let mut out = Vec::with_capacity(poly.len() + 1);
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
        let (ina, inb) = (a.z >= NEAR_PLANE, b.z >= NEAR_PLANE);
        if ina {
            out.push(a);
        }
        if ina != inb {
            let t = (NEAR_PLANE - a.z) / (b.z - a.z);
            out.push(a + (b - a) * t);
        }
    }
    out
}

/// Calls `visit(pixel, depth)` for every pixel center inside the triangle.
/// Depth is interpolated as `1/z`, which is exact for planar geometry.
fn raster_triangle(tri: [ScreenVertex; 3], w: usize, h: usize, mut visit: impl FnMut(usize, f64)) {
    let [a, b, c] = tri;
    let area = (b.u - a.u) * (c.v - a.v) - (b.v - a.v) * (c.u - a.u);
    if area == 0.0 || !area.is_finite() {
        return;
    }
    let umin = a.u.min(b.u).min(c.u).ceil().max(0.0);
    let umax = a.u.max(b.u).max(c.u).floor().min(w as f64 - 1.0);
    let vmin = a.v.min(b.v).min(c.v).ceil().max(0.0);
    let vmax = a.v.max(b.v).max(c.v).floor().min(h as f64 - 1.0);
    if umin > umax || vmin > vmax {
        return;
    }
    let edge = |p: &ScreenVertex, q: &ScreenVertex, u: f64, v: f64| (q.u - p.u) * (v - p.v) - (q.v - p.v) * (u - p.u);
    for py in vmin as usize..=vmax as usize {
        let v = py as f64;
        for px in umin as usize..=umax as usize {
            let u = px as f64;
            let w0 = edge(&b, &c, u, v) / area;
            let w1 = edge(&c, &a, u, v) / area;
            let w2 = edge(&a, &b, u, v) / area;
            if w0 >= 0.0 && w1 >= 0.0 && w2 >= 0.0 {
                let inv_z = w0 * a.inv_z + w1 * b.inv_z + w2 * c.inv_z;
                visit(py * w + px, 1.0 / inv_z);
            }
        }
    }
}

/// Rasterizes a box's triangles into one camera, clipped at the near plane.
fn raster_box(b: &BoxSpec, cam: &Camera, mut visit: impl FnMut(usize, f64, &Vector3<f64>)) {
    let r = cam.extrinsics.rotation();
    let t = cam.extrinsics.translation();
    let k = &cam.intrinsics;
    let corners = b.corners().map(|p| r.transpose() * (p - t));
    for (idx, normal) in b.triangles() {
        let poly = clip_near(&idx.map(|i| corners[i]));
        let sv: Vec<ScreenVertex> = poly
            .iter()
            .map(|p| ScreenVertex { u: k.fx * p.x / p.z + k.cx, v: k.fy * p.y / p.z + k.cy, inv_z: 1.0 / p.z })
            .collect();
        for i in 1..sv.len().saturating_sub(1) {
            raster_triangle([sv[0], sv[i], sv[i + 1]], cam.width, cam.height, |px, z| visit(px, z, &normal));
        }
    }
}

fn render_view(scene: &SceneSpec, cam: &Camera) -> View {
    let (w, h) = (cam.width, cam.height);
    let n = w * h;
    let mut image = vec![0f32; 3 * n];
    let mut depth = vec![f64::INFINITY; n];
    let mut ids = vec![-1i32; n];
    let r = cam.extrinsics.rotation();
    let t = cam.extrinsics.translation();
    let kinv = cam.intrinsics.inverse_matrix();
    let ground_shade = lambert(&Vector3::z());
    for py in 0..h {
        for px in 0..w {
            let dir = r * (kinv * Vector3::new(px as f64, py as f64, 1.0));
            let i = py * w + px;
            let color = if dir.z < -1e-9 {
                let s = -t.z / dir.z;
                let hit = t + dir * s;
                depth[i] = s;
                let parity = ((hit.x / CHECKER_M).floor() + (hit.y / CHECKER_M).floor()).rem_euclid(2.0);
                let tone = if parity < 0.5 { 0.8 } else { 1.2 };
                scene.ground_color.map(|c| (c * tone * ground_shade).min(1.0))
            } else {
                let elev = (dir.z / dir.norm()).clamp(0.0, 1.0) as f32;
                std::array::from_fn(|c| SKY_HORIZON[c] + (SKY_ZENITH[c] - SKY_HORIZON[c]) * elev)
            };
            for c in 0..3 {
                image[c * n + i] = color[c];
            }
        }
    }
    for (id, b) in scene.boxes.iter().enumerate() {
        raster_box(b, cam, |i, z, normal| {
            if z < depth[i] {
                depth[i] = z;
                ids[i] = id as i32;
                let shade = lambert(normal);
                for c in 0..3 {
                    image[c * n + i] = (b.albedo[c] * shade).min(1.0);
                }
            }
        });
    }
    View { width: w, height: h, image, depth, ids }
}

/// Renders every camera of the rig.
pub fn render_cameras(scene: &SceneSpec, rig: &CameraRig) -> Vec<View> {
    rig.cameras().iter().map(|cam| render_view(scene, cam)).collect()
}

/// Pixels the box would cover in `cam` with nothing in front of it.
pub fn silhouette(b: &BoxSpec, cam: &Camera) -> Vec<bool> {
    let mut mask = vec![false; cam.width * cam.height];
    raster_box(b, cam, |i, _, _| mask[i] = true);
    mask
}

/// Per box, the fraction of its unoccluded silhouette (summed over cameras)
/// hidden by other boxes. Boxes seen by no camera count as fully occluded.
pub fn occlusion_fractions(scene: &SceneSpec, rig: &CameraRig, views: &[View]) -> Vec<f64> {
    (0..scene.boxes.len())
        .map(|id| {
            let (mut full, mut seen) = (0usize, 0usize);
            for (cam, view) in rig.cameras().iter().zip(views) {
                let mask = silhouette(&scene.boxes[id], cam);
                full += mask.iter().filter(|m| **m).count();
                seen += view.ids.iter().filter(|v| **v == id as i32).count();
            }
            if full == 0 {
                1.0
            } else {
                1.0 - seen as f64 / full as f64
            }
        })
        .collect()
}

/// Center of BEV cell `(i, j)` in the ego frame. Row 0 is furthest
/// forward and column 0 furthest left.
pub fn bev_cell_center(i: usize, j: usize, h: usize, w: usize, cell: f64) -> [f64; 2] {
    [
        (h as f64 / 2.0 - i as f64 - 0.5) * cell,
        (w as f64 / 2.0 - j as f64 - 0.5) * cell,
    ]
}

/// Row-major `h × w` occupancy: 1 where the cell center lies inside any
/// box footprint.
pub fn rasterize_bev_gt(scene: &SceneSpec, h: usize, w: usize, cell: f64) -> Vec<u8> {
    let mut grid = vec![0u8; h * w];
    for i in 0..h {
        for j in 0..w {
            let [x, y] = bev_cell_center(i, j, h, w, cell);
            grid[i * w + j] = scene.boxes.iter().any(|b| b.footprint_contains(x, y)) as u8;
        }
    }
    grid
}

/// A rendered scene with everything needed for training.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedSample {
    /// `C × 3 × H × W` in `[0, 1]`.
    pub images: Vec<f32>,
    pub rig: CameraRig,
    /// Row-major `h_bev × w_bev`, values 0 or 1.
    pub bev_gt: Vec<u8>,
    pub scene: SceneSpec,
    pub occlusion: Vec<f64>,
}

impl RenderedSample {
    pub fn targets(&self) -> Vec<f32> {
        self.bev_gt.iter().map(|v| *v as f32).collect()
    }
}

/// Samples and renders one scene.
pub fn generate_sample(cfg: &Config, rig: &CameraRig, seed: u64) -> Result<RenderedSample> {
    let scene = sample_scene(seed, &SceneSampler::from_config(&cfg.model, &cfg.data))?;
    let views = render_cameras(&scene, rig);
    let occlusion = occlusion_fractions(&scene, rig, &views);
    let images = views.iter().flat_map(|v| v.image.iter().copied()).collect();
    let bev_gt = rasterize_bev_gt(&scene, cfg.model.bev_h, cfg.model.bev_w, cfg.model.bev_cell_m);
    Ok(RenderedSample { images, rig: rig.clone(), bev_gt, scene, occlusion })
}

/// Seed of scene `index` in a dataset drawn with `seed`.
pub fn scene_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

/// `count` samples, a pure function of `(cfg, seed)`.
pub fn generate_dataset(cfg: &Config, count: usize, seed: u64) -> Result<Vec<RenderedSample>> {
    use rayon::prelude::*;
    cfg.validate()?;
    let rig = config_rig(cfg)?;
    (0..count)
        .into_par_iter()
        .map(|i| generate_sample(cfg, &rig, scene_seed(seed, i)))
        .collect()
}
