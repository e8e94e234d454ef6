//! Rendering checks against the analytic synthetic scene and structural
//! invariants of the hierarchical render loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use warpfield::cfw::{FeatureLevel, FeatureVolume};
use warpfield::config::{ModelConfig, RenderConfig};
use warpfield::dataio::synth::{
    generate_blob_dataset_with, oracle_render_image, random_scene_config, GenerateOptions,
};
use warpfield::dataio::TrackedFrame;
use warpfield::field::{FieldKind, LearnedField};
use warpfield::geometry::make_rays;
use warpfield::metrics::psnr;
use warpfield::params::ParamStore;
use warpfield::renderer::{composite, render_image_eval, render_rays_eval, AnalyticField, FieldEval};

#[test]
fn analytic_render_matches_dense_oracle() {
    let scene_cfg = random_scene_config(31, 2, 2);
    let opts = GenerateOptions { oracle_samples: 1024, ..GenerateOptions::default() };
    let scene = generate_blob_dataset_with(&scene_cfg, 2, (32, 32), &opts).unwrap();
    let frame = &scene.frames[0];
    let field = AnalyticField { cfg: &scene_cfg, delta: &frame.delta };

    let cfg = RenderConfig {
        n_coarse: 256,
        n_fine: 0,
        jitter: false,
        chunk_size: 256,
        ..RenderConfig::default()
    };
    let rays = make_rays(&frame.intrinsics, &frame.pose, 32, 32, scene.near, scene.far).unwrap();
    let (_, fine) = render_image_eval(&rays, 32, 32, &field, &field, &cfg);
    let p = psnr(&fine.rgb, &frame.image, 1.0).unwrap();
    assert!(p > 40.0, "analytic re-render PSNR {p:.2} dB");
}

#[test]
fn oracle_sample_count_is_converged() {
    // doubling the oracle's quadrature changes pixels by < 1e-4
    let scene_cfg = random_scene_config(32, 2, 2);
    let pose = warpfield::geometry::Pose::look_at_origin(0.8, 0.3, 4.0);
    let k = warpfield::geometry::Intrinsics { fx: 24.0, fy: 24.0, cx: 8.0, cy: 8.0 };
    let a = oracle_render_image(&scene_cfg, &[0.3, -0.5], &pose, &k, 16, 16, 2.5, 5.5, 1024)
        .unwrap();
    let b = oracle_render_image(&scene_cfg, &[0.3, -0.5], &pose, &k, 16, 16, 2.5, 5.5, 2048)
        .unwrap();
    let worst = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y).abs())
        .fold(0.0f64, f64::max);
    assert!(worst < 1e-4, "max pixel delta {worst}");
}

fn toy_learned_setup() -> (ModelConfig, ParamStore, TrackedFrame, Vec<FeatureVolume>) {
    let mut cfg = ModelConfig::compact(2);
    cfg.encoder_channels = vec![4, 8];
    cfg.latent_dim = 4;
    cfg.view_mlp_width = 12;
    cfg.view_mlp_depth = 1;
    cfg.trunk_width = 12;
    cfg.trunk_depth = 2;
    cfg.color_hidden = 8;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    warpfield::cfw::init_params(&cfg, &mut store, &mut rng);
    warpfield::field::init_params(&cfg, FieldKind::Coarse, &mut store, &mut rng);
    warpfield::field::init_params(&cfg, FieldKind::Fine, &mut store, &mut rng);

    let mut rng = ChaCha8Rng::seed_from_u64(78);
    let volume = FeatureVolume {
        levels: vec![
            FeatureLevel {
                data: ndarray::Array3::from_shape_fn((4, 16, 16), |_| rng.gen_range(-1.0..1.0)),
                scale: 0.5,
            },
            FeatureLevel {
                data: ndarray::Array3::from_shape_fn((8, 8, 8), |_| rng.gen_range(-1.0..1.0)),
                scale: 0.25,
            },
        ],
        pad: (0, 0),
        image_hw: (32, 32),
    };
    let frame = TrackedFrame {
        image: ndarray::Array3::zeros((32, 32, 3)),
        delta: vec![0.0, 0.0],
        pose: warpfield::geometry::Pose::look_at_origin(0.4, 0.2, 4.0),
        intrinsics: warpfield::geometry::Intrinsics { fx: 48.0, fy: 48.0, cx: 16.0, cy: 16.0 },
    };
    (cfg, store, frame, vec![volume])
}

#[test]
fn chunking_does_not_change_the_image() {
    let (cfg, store, frame, volumes) = toy_learned_setup();
    let pose = warpfield::geometry::Pose::look_at_origin(1.1, -0.2, 4.0);
    let k = frame.intrinsics;
    let rays = make_rays(&k, &pose, 8, 8, 2.5, 5.5).unwrap();

    for jitter in [false, true] {
        let mk = |chunk_size: usize| {
            let rc = RenderConfig {
                n_coarse: 6,
                n_fine: 4,
                jitter,
                chunk_size,
                seed: 11,
                ..RenderConfig::default()
            };
            let coarse_field = LearnedField {
                cfg: &cfg,
                store: &store,
                kind: FieldKind::Coarse,
                frames: vec![&frame],
                volumes: &volumes,
            };
            let fine_field = LearnedField {
                cfg: &cfg,
                store: &store,
                kind: FieldKind::Fine,
                frames: vec![&frame],
                volumes: &volumes,
            };
            render_image_eval(&rays, 8, 8, &coarse_field, &fine_field, &rc)
        };
        let (c1, f1) = mk(1);
        let (c64, f64_) = mk(64);
        let (c7, f7) = mk(7);
        for (a, b) in [(&c1, &c64), (&c1, &c7)] {
            let dc = a.rgb.iter().zip(b.rgb.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(dc < 1e-12, "coarse chunk mismatch {dc} (jitter={jitter})");
        }
        for (a, b) in [(&f1, &f64_), (&f1, &f7)] {
            let df = a.rgb.iter().zip(b.rgb.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(df < 1e-12, "fine chunk mismatch {df} (jitter={jitter})");
        }
        let (c_again, f_again) = mk(64);
        assert_eq!(c64.rgb, c_again.rgb, "render must be bit-stable");
        assert_eq!(f64_.rgb, f_again.rgb);
    }
}

#[test]
fn zero_fine_samples_reuse_coarse_depths() {
    let (cfg, store, frame, volumes) = toy_learned_setup();
    let pose = warpfield::geometry::Pose::look_at_origin(0.3, 0.1, 4.0);
    let rays = make_rays(&frame.intrinsics, &pose, 4, 4, 2.5, 5.5).unwrap();
    let rc = RenderConfig {
        n_coarse: 8,
        n_fine: 0,
        jitter: false,
        chunk_size: 999,
        ..RenderConfig::default()
    };
    let coarse_field = LearnedField {
        cfg: &cfg,
        store: &store,
        kind: FieldKind::Coarse,
        frames: vec![&frame],
        volumes: &volumes,
    };
    let fine_field = LearnedField {
        cfg: &cfg,
        store: &store,
        kind: FieldKind::Fine,
        frames: vec![&frame],
        volumes: &volumes,
    };
    let (_, fine) = render_rays_eval(&rays, &coarse_field, &fine_field, &rc, 0);

    // manual second compositing of the fine network over the coarse depths
    let depths = warpfield::renderer::coarse_depths(&rays, &rc, 0);
    for (i, ray) in rays.iter().enumerate() {
        let pts: Vec<_> = depths[i].iter().map(|&t| ray.origin + ray.direction * t).collect();
        let dirs = vec![ray.direction; pts.len()];
        let mut sigmas = vec![0.0; pts.len()];
        let mut colors = vec![[0.0; 3]; pts.len()];
        fine_field.eval(&pts, &dirs, &mut sigmas, &mut colors);
        let manual = composite(&depths[i], &sigmas, &colors, rc.background, ray.far).unwrap();
        for c in 0..3 {
            assert!((manual.rgb[c] - fine.rgb[i][c]).abs() < 1e-12);
        }
    }
}

#[test]
fn importance_concentrates_fine_samples_on_the_occupied_interval() {
    // a hot coarse bin must attract the importance samples in the union pass
    let scene_cfg = random_scene_config(33, 1, 2);
    let opts = GenerateOptions { oracle_samples: 256, ..GenerateOptions::default() };
    let scene = generate_blob_dataset_with(&scene_cfg, 1, (16, 16), &opts).unwrap();
    let frame = &scene.frames[0];
    let field = AnalyticField { cfg: &scene_cfg, delta: &frame.delta };
    // central ray points at the blob cloud
    let rays = make_rays(&frame.intrinsics, &frame.pose, 16, 16, scene.near, scene.far).unwrap();
    let center = rays[8 * 16 + 8];

    let rc = RenderConfig {
        n_coarse: 24,
        n_fine: 48,
        jitter: false,
        ..RenderConfig::default()
    };
    let coarse_t = warpfield::renderer::coarse_depths(&[center], &rc, 0);
    let mut sig = vec![0.0; 24];
    let mut col = vec![[0.0; 3]; 24];
    let pts: Vec<_> = coarse_t[0].iter().map(|&t| center.origin + center.direction * t).collect();
    field.eval(&pts, &vec![center.direction; 24], &mut sig, &mut col);
    let weights: Vec<Vec<f64>> =
        vec![composite(&coarse_t[0], &sig, &col, [0.0; 3], center.far).unwrap().weights];
    let union = warpfield::renderer::union_depths(&[center], &coarse_t, &weights, &rc, 0);

    // occupied interval = where coarse weight mass sits
    let hot: Vec<f64> = coarse_t[0]
        .iter()
        .zip(weights[0].iter())
        .filter(|(_, &w)| w > 1e-4)
        .map(|(&t, _)| t)
        .collect();
    assert!(!hot.is_empty(), "ray misses the blobs; bad test geometry");
    let (lo, hi) = (hot[0] - 0.3, hot[hot.len() - 1] + 0.3);
    let inside = union[0].iter().filter(|&&t| t >= lo && t <= hi).count();
    // union holds 24 coarse + 48 fine samples; most fine samples must land
    // inside the occupied interval
    assert!(
        inside >= 48,
        "only {inside} of {} union samples inside the occupied interval",
        union[0].len()
    );
}
