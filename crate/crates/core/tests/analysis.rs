mod common;

use common::*;
use lara::analysis::*;
use lara::geometry::{project_point, CameraRig, Projection};
use lara::model::{token_index, token_position, LaRa, TokenIndex};
use lara::synthdata::{io::decode_png, rig_from_params};
use lara::tensor::{checkpoint::load_tensors, Graph, Tensor};
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::Rng;

const FH: usize = 4;
const FW: usize = 8;

/// Record over a rig of `cams` cameras at feature size `FH × FW`.
fn record(rig: CameraRig, heads: usize, latents: usize, fill: impl FnMut(usize) -> f64) -> AttentionRecord {
    let tokens = rig.len() * FH * FW;
    let mut weights: Vec<f64> = (0..heads * latents * tokens).map(fill).collect();
    for row in weights.chunks_mut(tokens) {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    AttentionRecord {
        heads,
        latents,
        tokens,
        weights,
        token_index: token_index(rig.len(), FH, FW),
        feature_h: FH,
        feature_w: FW,
        rig,
    }
}

fn rig(cams: usize, fov: f64, radius: f64) -> CameraRig {
    rig_from_params(cams, FH * 8, FW * 8, fov, radius, 1.5).unwrap()
}

fn random_record(seed: u64, heads: usize, latents: usize) -> AttentionRecord {
    let mut r = rng(seed);
    record(rig(4, 100.0, 0.3), heads, latents, |_| r.random::<f64>().powi(4))
}

fn one_hot(rig: CameraRig, target: TokenIndex) -> AttentionRecord {
    let pos = token_position(target, FH, FW);
    let tokens = rig.len() * FH * FW;
    record(rig, 1, 1, |i| (i % tokens == pos) as u8 as f64)
}

#[test]
fn captured_attention_rows_are_distributions() {
    let cfg = micro_config();
    let model = LaRa::new(&cfg.model).unwrap();
    let store = model.init_params(1).unwrap();
    let rig = config_rig(&cfg);
    let (rec, logits) = AttentionRecord::capture(&model, &store, &rig, &random_images(&cfg, 2)).unwrap();
    assert_eq!(logits.len(), 16 * 16);
    assert_eq!(rec.tokens, 2 * 4 * 8);
    assert_eq!((rec.heads, rec.latents), (2, 4));
    for h in 0..rec.heads {
        for n in 0..rec.latents {
            assert!((rec.row(h, n).iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }
    assert!((rec.select(Selection::AVG).unwrap().iter().sum::<f64>() - 1.0).abs() < 1e-5);

    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::zeros(&[2, 2]));
    assert!(AttentionRecord::from_graph(&g, x, &rig, 4, 8).is_err());
}

#[test]
fn selection_parsing() {
    let s: Selection = "n=10,h=5".parse().unwrap();
    assert_eq!(s, Selection { latent: Pick::Index(10), head: Pick::Index(5) });
    assert_eq!(s.tag(), "n10_h5");
    assert_eq!("n=avg".parse::<Selection>().unwrap(), Selection::AVG);
    assert_eq!("h=3".parse::<Selection>().unwrap(), Selection { latent: Pick::Avg, head: Pick::Index(3) });
    for bad in ["x=1", "n=-1", "n", "h=one"] {
        assert!(bad.parse::<Selection>().is_err(), "{bad}");
    }
    let rec = random_record(3, 2, 3);
    assert!(rec.select("n=3".parse().unwrap()).is_err());
    assert!(rec.select("h=2".parse().unwrap()).is_err());
}

#[test]
fn single_token_reprojects_to_one_cell() {
    let target = TokenIndex { camera: 2, row: 1, col: 5 };
    let maps = reproject_to_images(&one_hot(rig(4, 90.0, 0.3), target), Selection::AVG).unwrap();
    for m in &maps {
        let hot: Vec<usize> = (0..FH * FW).filter(|&p| m.values[p] != 0.0).collect();
        if m.camera == 2 {
            assert_eq!(hot, vec![1 * FW + 5]);
            assert_eq!(m.values[FW + 5], 1.0);
        } else {
            assert!(hot.is_empty());
        }
    }
}

#[test]
fn camera_mass_matches_group_sums() {
    let rec = random_record(4, 3, 5);
    for sel in ["n=avg", "n=2,h=1", "h=0"] {
        let sel: Selection = sel.parse().unwrap();
        let dist = rec.select(sel).unwrap();
        let maps = reproject_to_images(&rec, sel).unwrap();
        for (k, m) in maps.iter().enumerate() {
            let direct: f64 = rec.token_index.iter().zip(&dist).filter(|(t, _)| t.camera == k).map(|(_, v)| v).sum();
            assert!((m.mass() - direct).abs() < 1e-12);
        }
        assert!((maps.iter().map(|m| m.mass()).sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let up = reproject_to_images(&rec, Selection::AVG).unwrap()[0].upsample(8).unwrap();
    assert_eq!((up.h, up.w), (FH * 8, FW * 8));
}

#[test]
fn uniform_attention_gives_uniform_intensity() {
    let rec = record(rig(4, 90.0, 0.0), 2, 2, |_| 1.0);
    let p = polar_collapse(&rec, Selection::AVG, POLAR_BINS).unwrap();
    let mean = p.intensity.iter().sum::<f64>() / POLAR_BINS as f64;
    assert!(mean > 0.0);
    for v in &p.intensity {
        assert!((v / mean - 1.0).abs() < 0.05, "{v} vs {mean}");
    }
    assert!((p.total_mass() - 1.0).abs() < 1e-9);
    assert!((p.bucket_center(0) + std::f64::consts::PI - std::f64::consts::PI / 360.0).abs() < 1e-12);
}

#[test]
fn single_column_fills_one_bucket_group() {
    let r = rig(4, 90.0, 0.3);
    let (camera, col) = (1, 6);
    let tokens = 4 * FH * FW;
    let rec = record(r.clone(), 1, 1, |i| {
        let t = token_index(4, FH, FW)[i % tokens];
        (t.camera == camera && t.col == col) as u8 as f64
    });
    let p = polar_collapse(&rec, Selection::AVG, POLAR_BINS).unwrap();
    let hit: Vec<usize> = (0..POLAR_BINS).filter(|b| p.mass[*b] > 0.0).collect();
    assert!(!hit.is_empty());
    assert!(hit.windows(2).all(|w| w[1] == w[0] + 1), "{hit:?}");
    let (start, len) = column_interval(&r, camera, col, FH, FW).unwrap();
    assert!(hit.contains(&bucket_of(start + len / 2.0, POLAR_BINS)));
    assert!(hit.iter().all(|b| p.dominant_camera(*b) == Some(camera)));
}

#[test]
fn adjacent_cameras_share_buckets_at_equal_azimuth() {
    // Shared optical center, overlapping views.
    let r = rig(4, 110.0, 0.0);
    let az = -45f64.to_radians();
    let dir = Vector3::new(az.cos(), az.sin(), 0.0);
    let mut buckets = Vec::new();
    for camera in [0, 3] {
        let cam = &r.cameras()[camera];
        let point = cam.extrinsics.translation() + dir * 20.0;
        let Projection::Visible { pixel, .. } = project_point(&point, &cam.intrinsics, &cam.extrinsics) else {
            panic!("camera {camera} misses the direction")
        };
        let col = ((pixel[0] + 0.5) / 8.0).floor() as usize;
        let (start, len) = column_interval(&r, camera, col, FH, FW).unwrap();
        let off = (az - start).rem_euclid(std::f64::consts::TAU);
        assert!(off <= len + 1e-9, "camera {camera} column {col}");
        let p = polar_collapse(&one_hot(r.clone(), TokenIndex { camera, row: 0, col }), Selection::AVG, POLAR_BINS).unwrap();
        assert!(p.mass[bucket_of(az, POLAR_BINS)] > 0.0);
        buckets.push(bucket_of(az, POLAR_BINS));
    }
    assert_eq!(buckets[0], buckets[1]);
}

#[test]
fn head_averaging_commutes_with_collapse() {
    let rec = random_record(5, 3, 2);
    for n in 0..2 {
        let avg = polar_collapse(&rec, Selection { latent: Pick::Index(n), head: Pick::Avg }, 90).unwrap();
        let per: Vec<PolarProfile> = (0..3)
            .map(|h| polar_collapse(&rec, Selection { latent: Pick::Index(n), head: Pick::Index(h) }, 90).unwrap())
            .collect();
        for b in 0..90 {
            let mean_mass = per.iter().map(|p| p.mass[b]).sum::<f64>() / 3.0;
            let mean_int = per.iter().map(|p| p.intensity[b]).sum::<f64>() / 3.0;
            assert!((avg.mass[b] - mean_mass).abs() < 1e-14);
            assert!((avg.intensity[b] - mean_int).abs() < 1e-14);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn mass_is_conserved(seed in any::<u64>(), latent in prop::option::of(0usize..3), head in prop::option::of(0usize..2), bins in 1usize..400) {
        let rec = random_record(seed, 2, 3);
        let pick = |o: Option<usize>| o.map_or(Pick::Avg, Pick::Index);
        let sel = Selection { latent: pick(latent), head: pick(head) };
        let raw: f64 = rec.select(sel).unwrap().iter().sum();
        let reprojected: f64 = reproject_to_images(&rec, sel).unwrap().iter().map(|m| m.mass()).sum();
        let p = polar_collapse(&rec, sel, bins).unwrap();
        prop_assert!((raw - reprojected).abs() < 1e-6);
        prop_assert!((raw - p.total_mass()).abs() < 1e-6);
        let by_camera: f64 = p.camera_mass.iter().flatten().sum();
        prop_assert!((raw - by_camera).abs() < 1e-6);
        prop_assert!(p.intensity.iter().all(|v| *v >= 0.0));
    }
}

#[test]
fn svg_has_one_sample_per_bucket_and_is_deterministic() {
    let rec = random_record(6, 2, 2);
    for bins in [360, 17] {
        let p = polar_collapse(&rec, Selection::AVG, bins).unwrap();
        let svg = polar_svg(&p, "test <plot>");
        assert_eq!(svg.matches("class=\"sample\"").count(), bins);
        assert!(svg.contains("&lt;plot&gt;"));
        assert_eq!(svg, polar_svg(&polar_collapse(&rec, Selection::AVG, bins).unwrap(), "test <plot>"));
    }
}

#[test]
fn emitted_files_are_deterministic_and_sized() {
    let rec = random_record(7, 2, 3);
    let mut r = rng(8);
    let images: Vec<f32> = (0..4 * 3 * FH * 8 * FW * 8).map(|_| r.random()).collect();
    let sels: Vec<Selection> = vec![Selection::AVG, "n=1,h=0".parse().unwrap()];
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let index = emit_analysis(&rec, &images, &sels, 360, a.path()).unwrap();
    assert_eq!(emit_analysis(&rec, &images, &sels, 360, b.path()).unwrap(), index);
    assert!(index.files.contains(&"polar_n1_h0.svg".to_string()));
    assert!(index.files.contains(&"cam3_navg_havg.png".to_string()));
    for f in &index.files {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let (_, w, h) = decode_png(&std::fs::read(a.path().join("cam0_n1_h0.png")).unwrap()).unwrap();
    assert_eq!((h, w), (FH * 8, FW * 8));

    let saved = load_tensors(&a.path().join("attention.lara")).unwrap();
    assert_eq!(saved.len(), 2);
    assert_eq!(saved[1].0, "attn.input.head1");
    assert_eq!(saved[1].1.dims(), &[3, 4 * FH * FW]);
    let sidecar: Vec<TokenIndex> =
        serde_json::from_str(&std::fs::read_to_string(a.path().join("attention.tokens.json")).unwrap()).unwrap();
    assert_eq!(sidecar, rec.token_index);
}
