use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use warpfield::config::{ModelConfig, RenderConfig};
use warpfield::dataio::synth::random_scene_config;
use warpfield::field::FieldKind;
use warpfield::geometry::make_rays;
use warpfield::params::ParamStore;
use warpfield::renderer::{composite, render_image_eval, AnalyticField};

fn bench_composite(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 256;
    let t: Vec<f64> = (0..n).map(|i| 2.0 + i as f64 * 0.015).collect();
    let sigmas: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..3.0)).collect();
    let colors: Vec<[f64; 3]> = (0..n)
        .map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)])
        .collect();
    c.bench_function("composite_256", |b| {
        b.iter(|| composite(&t, &sigmas, &colors, [0.0; 3], 6.5).unwrap())
    });
}

fn bench_analytic_render(c: &mut Criterion) {
    let scene_cfg = random_scene_config(2, 2, 2);
    let pose = warpfield::geometry::Pose::look_at_origin(0.4, 0.2, 4.0);
    let k = warpfield::geometry::Intrinsics { fx: 48.0, fy: 48.0, cx: 16.0, cy: 16.0 };
    let rays = make_rays(&k, &pose, 32, 32, 2.5, 5.5).unwrap();
    let field = AnalyticField { cfg: &scene_cfg, delta: &[0.2, -0.3] };
    let cfg = RenderConfig { n_coarse: 64, n_fine: 64, jitter: false, ..RenderConfig::default() };
    c.bench_function("analytic_render_32x32", |b| {
        b.iter(|| render_image_eval(&rays, 32, 32, &field, &field, &cfg))
    });
}

fn bench_encoder(c: &mut Criterion) {
    let cfg = ModelConfig::compact(2);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    warpfield::cfw::init_params(&cfg, &mut store, &mut rng);
    warpfield::field::init_params(&cfg, FieldKind::Coarse, &mut store, &mut rng);
    warpfield::field::init_params(&cfg, FieldKind::Fine, &mut store, &mut rng);
    let image = ndarray::Array3::from_shape_fn((64, 64, 3), |_| rng.gen_range(0.0..1.0));
    c.bench_function("encode_image_64x64", |b| {
        b.iter(|| warpfield::cfw::encode_image(&cfg, &store, &image).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_composite, bench_analytic_render, bench_encoder
}
criterion_main!(benches);
