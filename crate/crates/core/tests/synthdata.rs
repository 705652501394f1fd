mod common;

use common::*;
use lara::config::Config;
use lara::geometry::{Camera, CameraExtrinsics, CameraIntrinsics};
use lara::synthdata::io::{decode_pgm, encode_pgm, read_manifest};
use lara::synthdata::*;
use nalgebra::Vector3;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn sampler(boxes: (usize, usize), clearance: f64) -> SceneSampler {
    SceneSampler { extent: [32.0, 32.0], boxes, clearance }
}

fn one_box(center: [f64; 2], yaw: f64, length: f64, width: f64, height: f64) -> SceneSpec {
    SceneSpec {
        boxes: vec![BoxSpec { center, yaw, length, width, height, albedo: [0.8, 0.2, 0.2] }],
        ground_color: [0.4, 0.4, 0.4],
        seed: 0,
    }
}

fn forward_camera(width: usize, height: usize, fov_deg: f64) -> Camera {
    let fx = (width as f64 / 2.0) / (fov_deg.to_radians() / 2.0).tan();
    Camera {
        width,
        height,
        intrinsics: CameraIntrinsics::new(fx, fx, width as f64 / 2.0 - 0.5, height as f64 / 2.0 - 0.5).unwrap(),
        extrinsics: CameraExtrinsics::looking_at_yaw(0.0, Vector3::new(0.3, 0.0, 1.5)),
    }
}

#[test]
fn scenes_are_deterministic_in_seed() {
    let s = sampler((2, 8), 0.8);
    assert_eq!(sample_scene(5, &s).unwrap(), sample_scene(5, &s).unwrap());
    assert_ne!(sample_scene(5, &s).unwrap(), sample_scene(6, &s).unwrap());
    let scene = sample_scene(7, &s).unwrap();
    assert!((2..=8).contains(&scene.boxes.len()));
    for b in &scene.boxes {
        assert!(b.center[0].abs() <= 16.0 && b.center[1].abs() <= 16.0);
        assert!(b.footprint_distance(0.0, 0.0) >= 0.8);
        assert!((BOX_LENGTH.0..=BOX_LENGTH.1).contains(&b.length));
        assert!((BOX_WIDTH.0..=BOX_WIDTH.1).contains(&b.width));
        assert!((BOX_HEIGHT.0..=BOX_HEIGHT.1).contains(&b.height));
        assert!((0.0..std::f64::consts::TAU).contains(&b.yaw));
    }
}

#[test]
fn invalid_sampler_is_rejected() {
    assert!(sample_scene(0, &SceneSampler { extent: [0.0, 10.0], boxes: (1, 2), clearance: 0.0 }).is_err());
    assert!(sample_scene(0, &sampler((3, 2), 0.0)).is_err());
    assert!(sample_scene(0, &SceneSampler { extent: [4.0, 4.0], boxes: (1, 1), clearance: 0.0 }).is_err());
}

#[test]
fn empty_scene_renders_ground_and_sky_only() {
    let scene = sample_scene(1, &sampler((0, 0), 0.8)).unwrap();
    assert!(scene.boxes.is_empty());
    let rig = default_rig(4, 48, 96, 100.0).unwrap();
    for view in render_cameras(&scene, &rig) {
        assert!(view.ids.iter().all(|id| *id == -1));
        let (rows, w) = (view.height, view.width);
        // Upper half sees sky, lower half ground.
        assert!(view.depth[..w].iter().all(|d| d.is_infinite()));
        assert!(view.depth[(rows - 1) * w..].iter().all(|d| d.is_finite() && *d > 0.0));
        assert!(view.image.iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert!(rasterize_bev_gt(&scene, 64, 64, 0.5).iter().all(|v| *v == 0));
}

#[test]
fn box_centers_are_uniform() {
    let s = sampler((1, 1), 0.0);
    let mut hist = [0usize; 16];
    for seed in 0..1000 {
        let c = sample_scene(seed, &s).unwrap().boxes[0].center;
        let bin = |v: f64| (((v + 16.0) / 8.0).floor() as usize).min(3);
        hist[bin(c[0]) * 4 + bin(c[1])] += 1;
    }
    let expect = 1000.0 / 16.0;
    let stat: f64 = hist.iter().map(|o| (*o as f64 - expect).powi(2) / expect).sum();
    let p = 1.0 - ChiSquared::new(15.0).unwrap().cdf(stat);
    assert!(p > 0.01, "chi2 {stat} p {p}");
}

#[test]
fn box_ahead_renders_centered() {
    let cam = forward_camera(112, 64, 90.0);
    let b = &one_box([5.0 + 2.25, 0.0], 0.0, 4.5, 1.8, 1.6).boxes[0];
    let mask = silhouette(b, &cam);
    let cols: Vec<f64> = mask.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| (i % 112) as f64).collect();
    assert!(!cols.is_empty());
    let mean = cols.iter().sum::<f64>() / cols.len() as f64;
    assert!((mean - 55.5).abs() < 0.5, "{mean}");
}

#[test]
fn silhouette_matches_projected_face_area() {
    // Taller than the camera and wider than the rig offset, so only the
    // near face is visible.
    let (w, h) = (448, 256);
    let cam = forward_camera(w, h, 90.0);
    let fx = cam.intrinsics.fx;
    let (face_x, length, width, height) = (8.0, 4.0, 2.0, 3.0);
    let b = &one_box([face_x + length / 2.0, 0.0], 0.0, length, width, height).boxes[0];
    let count = silhouette(b, &cam).iter().filter(|m| **m).count() as f64;
    let depth = face_x - 0.3;
    let analytic = (fx * width / depth) * (fx * height / depth);
    assert!((count / analytic - 1.0).abs() < 0.1, "{count} vs {analytic}");
}

#[test]
fn visible_boxes_have_silhouettes_and_positive_depth() {
    let cfg = Config::default();
    let rig = common::config_rig(&cfg);
    for seed in 0..6 {
        let scene = sample_scene(seed, &SceneSampler::from_config(&cfg.model, &cfg.data)).unwrap();
        let views = render_cameras(&scene, &rig);
        for (cam, view) in rig.cameras().iter().zip(&views) {
            for (d, id) in view.depth.iter().zip(&view.ids) {
                if *id >= 0 {
                    assert!(d.is_finite() && *d > 0.0);
                }
                assert!(*d > 0.0);
            }
            for b in &scene.boxes {
                let inside = b.corners().iter().all(|p| {
                    matches!(
                        lara::geometry::project_point(p, &cam.intrinsics, &cam.extrinsics),
                        lara::geometry::Projection::Visible { pixel, .. }
                            if pixel[0] >= 0.0 && pixel[1] >= 0.0
                                && pixel[0] <= cam.width as f64 - 1.0 && pixel[1] <= cam.height as f64 - 1.0
                    )
                });
                if inside {
                    assert!(silhouette(b, cam).iter().any(|m| *m));
                }
            }
        }
    }
}

#[test]
fn axis_aligned_box_on_grid_vertex_sets_four_cells() {
    let scene = one_box([0.0, 0.0], 0.0, 2.0, 2.0, 1.5);
    let grid = rasterize_bev_gt(&scene, 8, 8, 1.0);
    let set: Vec<usize> = (0..64).filter(|&p| grid[p] == 1).collect();
    assert_eq!(set, vec![3 * 8 + 3, 3 * 8 + 4, 4 * 8 + 3, 4 * 8 + 4]);
}

/// Even-odd ray casting against a closed polygon.
fn point_in_polygon(p: [f64; 2], poly: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) && p[0] < (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0] {
            inside = !inside;
        }
        j = i;
    }
    inside
}

#[test]
fn rotated_box_matches_polygon_oracle() {
    let (cx, cy, yaw, l, w) = (3.13, -2.71, std::f64::consts::FRAC_PI_4, 5.0, 2.0);
    let scene = one_box([cx, cy], yaw, l, w, 1.5);
    let (h, wd, cell) = (40, 40, 0.5);
    let grid = rasterize_bev_gt(&scene, h, wd, cell);
    let (s, c) = yaw.sin_cos();
    let poly: Vec<[f64; 2]> = [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)]
        .iter()
        .map(|(a, b)| {
            let (lx, ly) = (a * l / 2.0, b * w / 2.0);
            [cx + c * lx - s * ly, cy + s * lx + c * ly]
        })
        .collect();
    let mut count = 0;
    for i in 0..h {
        for j in 0..wd {
            let x = (h as f64 / 2.0 - i as f64 - 0.5) * cell;
            let y = (wd as f64 / 2.0 - j as f64 - 0.5) * cell;
            let expect = point_in_polygon([x, y], &poly);
            assert_eq!(grid[i * wd + j] == 1, expect, "cell ({i}, {j})");
            count += expect as usize;
        }
    }
    assert!(count > 20);
}

#[test]
fn bev_rows_run_forward_to_back() {
    assert_eq!(bev_cell_center(0, 0, 4, 4, 1.0), [1.5, 1.5]);
    assert_eq!(bev_cell_center(3, 3, 4, 4, 1.0), [-1.5, -1.5]);
    let grid = rasterize_bev_gt(&one_box([5.0, 0.0], 0.0, 2.0, 2.0, 1.5), 16, 16, 1.0);
    let rows: Vec<usize> = (0..256).filter(|p| grid[*p] == 1).map(|p| p / 16).collect();
    assert!(rows.iter().all(|r| *r < 8));
}

#[test]
fn generation_is_a_pure_function_of_seed_and_config() {
    let cfg = micro_config();
    let a = generate_dataset(&cfg, 3, 11).unwrap();
    assert_eq!(a, generate_dataset(&cfg, 3, 11).unwrap());
    assert_ne!(a[0].images, generate_dataset(&cfg, 1, 12).unwrap()[0].images);
    for s in &a {
        assert_eq!(s.images.len(), 2 * 3 * 32 * 64);
        assert_eq!(s.bev_gt, rasterize_bev_gt(&s.scene, 16, 16, 2.0));
        assert_eq!(s.occlusion.len(), s.scene.boxes.len());
    }
}

#[test]
fn dataset_round_trip() {
    let cfg = micro_config();
    let samples = generate_dataset(&cfg, 3, 21).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(dir.path(), &cfg, &samples).unwrap();
    assert_eq!(manifest.count, 3);
    let dirs = std::fs::read_dir(dir.path()).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
    assert_eq!(dirs, manifest.count);
    assert_eq!(read_manifest(dir.path()).unwrap(), manifest);

    let (_, back) = read_dataset(dir.path()).unwrap();
    for (a, b) in samples.iter().zip(&back) {
        assert_eq!(a.rig, b.rig);
        assert_eq!(a.bev_gt, b.bev_gt);
        assert_eq!(a.scene, b.scene);
        let err = a.images.iter().zip(&b.images).map(|(p, q)| (p - q).abs()).fold(0.0f32, f32::max);
        assert!(err <= 0.5 / 255.0 + 1e-6, "{err}");
    }
    let pgm = encode_pgm(&samples[0].bev_gt, 16, 16);
    assert_eq!(decode_pgm(&pgm).unwrap(), (samples[0].bev_gt.clone(), 16, 16));
}

#[test]
fn malformed_dataset_reports_sample() {
    let cfg = micro_config();
    let samples = generate_dataset(&cfg, 2, 22).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(dir.path(), &cfg, &samples).unwrap();
    std::fs::write(dir.path().join(&manifest.samples[1].dir).join("bev_gt.pgm"), b"P5 garbage").unwrap();
    let err = read_dataset(dir.path()).unwrap_err();
    assert!(matches!(err, lara::error::LaraError::Sample { index: 1, .. }), "{err}");
    assert!(read_dataset(&dir.path().join("missing")).is_err());
}
