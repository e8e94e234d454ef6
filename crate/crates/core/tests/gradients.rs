//! Finite-difference oracles for every analytic gradient the training path
//! relies on: compositing, flow prediction, feature warping, and the full
//! end-to-end training step.

use ndarray::{Array1, Array2, Array3, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;
use warpfield::cfw::{self, FeatureLevel, FeatureVolume, TapeVolume};
use warpfield::config::{ModelConfig, TrainConfig};
use warpfield::dataio::synth::{generate_blob_dataset_with, random_scene_config, GenerateOptions};
use warpfield::diff::fd::rel_err;
use warpfield::diff::{Arr, Tape};
use warpfield::field::FieldKind;
use warpfield::params::ParamStore;
use warpfield::training::{self, StepOptions, StepPlan};

fn toy_volume(channels: &[usize], hw: usize, seed: u64) -> FeatureVolume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FeatureVolume {
        levels: channels
            .iter()
            .enumerate()
            .map(|(i, &c)| FeatureLevel {
                data: Array3::from_shape_fn((c, hw >> (i + 1), hw >> (i + 1)), |_| {
                    rng.gen_range(-1.0..1.0)
                }),
                scale: 1.0 / (1 << (i + 1)) as f64,
            })
            .collect(),
        pad: (0, 0),
        image_hw: (hw, hw),
    }
}

fn toy_cfg() -> ModelConfig {
    let mut cfg = ModelConfig::compact(2);
    cfg.encoder_channels = vec![4, 8];
    cfg.latent_dim = 6;
    cfg.semantic_hidden = 8;
    cfg.view_mlp_width = 16;
    cfg.view_mlp_depth = 1;
    cfg.trunk_width = 16;
    cfg.trunk_depth = 2;
    cfg.color_hidden = 8;
    cfg
}

fn init_store(cfg: &ModelConfig, seed: u64, randomize_heads: bool) -> ParamStore {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    cfw::init_params(cfg, &mut store, &mut rng);
    warpfield::field::init_params(cfg, FieldKind::Coarse, &mut store, &mut rng);
    warpfield::field::init_params(cfg, FieldKind::Fine, &mut store, &mut rng);
    if randomize_heads {
        cfw::randomize_for_tests(cfg, &mut store, &mut rng);
    }
    store
}

#[test]
fn composite_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let (r, s) = (4, 8);
    let sigma0 = Array2::from_shape_fn((r, s), |_| rng.gen_range(0.05..2.5));
    let color0 = Array3::from_shape_fn((r, s, 3), |_| rng.gen_range(0.05..0.95));
    let mut t = Array2::<f64>::zeros((r, s));
    for ri in 0..r {
        let mut acc = 2.0;
        for k in 0..s {
            acc += rng.gen_range(0.1..0.5);
            t[(ri, k)] = acc;
        }
    }
    let t = Arc::new(t);
    let far = Arc::new(Array1::from_elem(r, 6.8));
    let readout = Arr::from_shape_fn(IxDyn(&[r, 5 + s]), |_| rng.gen_range(-1.0..1.0));

    // forward pass used by both routes
    let forward = |sigma: &Arr, color: &Arr| -> (f64, Option<(Arr, Arr)>, bool) {
        let mut tape = Tape::new();
        let sv = tape.leaf(sigma.clone());
        let cv = tape.leaf(color.clone());
        let packed = tape.composite_pack(sv, cv, t.clone(), far.clone(), [0.1, 0.2, 0.3]);
        let ro = tape.constant(readout.clone());
        let prod = tape.mul(packed, ro);
        let loss = tape.sum_all(prod);
        let value = tape.value(loss)[[0]];
        let mut grads = tape.backward(loss);
        let gs = grads.take(sv).unwrap();
        let gc = grads.take(cv).unwrap();
        (value, Some((gs, gc)), true)
    };

    let sigma_arr = sigma0.clone().into_dyn();
    let color_arr = color0.clone().into_dyn();
    let (_, grads, _) = forward(&sigma_arr, &color_arr);
    let (gs, gc) = grads.unwrap();

    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for (arr, analytic, is_sigma) in [(&sigma_arr, &gs, true), (&color_arr, &gc, false)] {
        for idx in 0..arr.len() {
            let mut plus = arr.clone();
            plus.as_slice_mut().unwrap()[idx] += eps;
            let mut minus = arr.clone();
            minus.as_slice_mut().unwrap()[idx] -= eps;
            let (fp, fm) = if is_sigma {
                (forward(&plus, &color_arr).0, forward(&minus, &color_arr).0)
            } else {
                (forward(&sigma_arr, &plus).0, forward(&sigma_arr, &minus).0)
            };
            let numeric = (fp - fm) / (2.0 * eps);
            let analytic_v = analytic.as_slice().unwrap()[idx];
            worst = worst.max(rel_err(analytic_v, numeric, 1e-6));
        }
    }
    assert!(worst < 1e-4, "composite gradient rel err {worst}");
}

#[test]
fn predict_flow_gradients_wrt_omega() {
    let cfg = toy_cfg();
    let store = init_store(&cfg, 3, true);
    let vol = toy_volume(&cfg.encoder_channels, 8, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let omega0: Vec<f64> = (0..2 * cfg.latent_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let readouts: Vec<Array3<f64>> = vol
        .levels
        .iter()
        .map(|l| {
            Array3::from_shape_fn((2, l.data.dim().1, l.data.dim().2), |_| {
                rng.gen_range(-1.0..1.0)
            })
        })
        .collect();

    let forward = |omega: &[f64], want_grad: bool| -> (f64, Option<Arr>) {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let tv = TapeVolume::constant(&mut tape, &vol);
        let omega_arr = Arr::from_shape_vec(IxDyn(&[1, omega.len()]), omega.to_vec()).unwrap();
        let ov = tape.leaf(omega_arr);
        let flows = cfw::predict_flow_tape(&mut tape, &bound, &cfg, &tv, ov);
        let mut loss = None;
        for (flow, ro) in flows.iter().zip(readouts.iter()) {
            let rv = tape.constant(ro.clone().into_dyn());
            let prod = tape.mul(*flow, rv);
            let s = tape.sum_all(prod);
            loss = Some(match loss {
                None => s,
                Some(acc) => tape.add(acc, s),
            });
        }
        let loss = loss.unwrap();
        let value = tape.value(loss)[[0]];
        let grad = want_grad.then(|| tape.backward(loss).take(ov).unwrap());
        (value, grad)
    };

    let (_, grad) = forward(&omega0, true);
    let grad = grad.unwrap();
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..omega0.len() {
        let mut plus = omega0.clone();
        plus[i] += eps;
        let mut minus = omega0.clone();
        minus[i] -= eps;
        let numeric = (forward(&plus, false).0 - forward(&minus, false).0) / (2.0 * eps);
        worst = worst.max(rel_err(grad[[0, i]], numeric, 1e-6));
    }
    assert!(worst < 1e-4, "flow/omega gradient rel err {worst}");
}

#[test]
fn warp_to_target_gradients_wrt_encoder_params() {
    let cfg = toy_cfg();
    // fresh flow heads stay zero, so sampling positions sit exactly on the
    // grid and the loss is smooth in the encoder parameters
    let store = init_store(&cfg, 7, false);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let image = Array3::from_shape_fn((32, 32, 3), |_| rng.gen_range(0.0..1.0));
    let frame = warpfield::dataio::TrackedFrame {
        image,
        delta: vec![0.2, -0.4],
        pose: warpfield::geometry::Pose::identity(),
        intrinsics: warpfield::geometry::Intrinsics { fx: 48.0, fy: 48.0, cx: 16.0, cy: 16.0 },
    };
    let target = cfw::TargetSpec::Delta(vec![-0.6, 0.3]);
    let readouts: Vec<Array3<f64>> = cfg
        .encoder_channels
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            Array3::from_shape_fn((c, 16 >> i, 16 >> i), |_| rng.gen_range(-1.0..1.0))
        })
        .collect();

    let forward = |params: &ParamStore, want_grads: bool| {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let vols =
            cfw::warp_to_target_tape(&mut tape, &bound, &cfg, &[&frame], &target).unwrap();
        let mut loss = None;
        for (level, ro) in vols[0].levels.iter().zip(readouts.iter()) {
            let rv = tape.constant(ro.clone().into_dyn());
            let prod = tape.mul(*level, rv);
            let s = tape.sum_all(prod);
            loss = Some(match loss {
                None => s,
                Some(acc) => tape.add(acc, s),
            });
        }
        let loss = loss.unwrap();
        let value = tape.value(loss)[[0]];
        let grads = want_grads.then(|| {
            let mut g = tape.backward(loss);
            bound.collect_grads(params, &mut g)
        });
        (value, grads)
    };

    let (_, grads) = forward(&store, true);
    let grads = grads.unwrap();

    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let enc_names: Vec<String> = store
        .names()
        .iter()
        .filter(|n| n.starts_with("cfw.enc."))
        .cloned()
        .collect();
    for name in &enc_names {
        let len = store.get(name).len();
        for _ in 0..3 {
            let idx = rng.gen_range(0..len);
            let mut probe = store.clone();
            probe.get_mut(name).as_slice_mut().unwrap()[idx] += eps;
            let fp = forward(&probe, false).0;
            probe.get_mut(name).as_slice_mut().unwrap()[idx] -= 2.0 * eps;
            let fm = forward(&probe, false).0;
            let numeric = (fp - fm) / (2.0 * eps);
            let analytic = grads.get(name).as_slice().unwrap()[idx];
            let e = rel_err(analytic, numeric, 1e-6);
            assert!(e < 1e-4, "{name}[{idx}]: rel err {e} ({analytic} vs {numeric})");
            worst = worst.max(e);
        }
    }
    assert!(!enc_names.is_empty());
    println!("warp_to_target encoder gradient worst rel err: {worst:.3e}");
}

#[test]
fn train_step_end_to_end_gradients() {
    let mut cfg = toy_cfg();
    cfg.seed = 11;
    let scene_cfg = random_scene_config(12, 2, 2);
    let opts = GenerateOptions { oracle_samples: 96, ..GenerateOptions::default() };
    let scene = generate_blob_dataset_with(&scene_cfg, 4, (32, 32), &opts).unwrap();
    let scenes = [scene];

    let train_cfg = TrainConfig {
        rays_per_step: 10,
        n_coarse: 6,
        // keep fine-pass depths parameter-independent: importance-sampled
        // positions are detached from the graph by design
        n_fine: 0,
        chunks_per_step: 2,
        seed: 13,
        iterations: 0,
        ..TrainConfig::default()
    };
    let mut state = training::init_state(cfg.clone(), train_cfg.clone());
    {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        cfw::randomize_for_tests(&cfg, &mut state.params, &mut rng);
    }
    // a few updates move the state off its symmetric init
    for _ in 0..3 {
        training::train_step(&mut state, &scenes).unwrap();
    }

    let plan: StepPlan = training::plan_step(&scenes, &train_cfg, state.iteration).unwrap();
    let fwd = training::step_forward(
        &state.params,
        &cfg,
        &train_cfg,
        &scenes,
        &plan,
        StepOptions { compute_grads: true, bypass_warp: false },
    )
    .unwrap();
    let grads = fwd.grads.as_ref().unwrap();
    let weights = train_cfg.coarse_fine_loss_weights;

    let loss_of = |params: &ParamStore| -> f64 {
        training::step_forward(
            params,
            &cfg,
            &train_cfg,
            &scenes,
            &plan,
            StepOptions { compute_grads: false, bypass_warp: false },
        )
        .unwrap()
        .total(weights)
    };

    // sample parameters across every subsystem
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let groups = [
        "cfw.enc.stage0",
        "cfw.map.",
        "cfw.flow.dec",
        "cfw.flow.head",
        "field.coarse.trunk0",
        "field.coarse.sigma",
        "field.fine.view0",
        "field.fine.color1",
    ];
    let eps = 1e-5;
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for group in groups {
        let names: Vec<String> = state
            .params
            .names()
            .iter()
            .filter(|n| n.starts_with(group))
            .cloned()
            .collect();
        assert!(!names.is_empty(), "no parameters match {group}");
        let name = &names[0];
        let len = state.params.get(name).len();
        for _ in 0..2 {
            let idx = rng.gen_range(0..len);
            let mut probe = state.params.clone();
            probe.get_mut(name).as_slice_mut().unwrap()[idx] += eps;
            let fp = loss_of(&probe);
            probe.get_mut(name).as_slice_mut().unwrap()[idx] -= 2.0 * eps;
            let fm = loss_of(&probe);
            let numeric = (fp - fm) / (2.0 * eps);
            let analytic = grads.get(name).as_slice().unwrap()[idx];
            let e = rel_err(analytic, numeric, 1e-7);
            assert!(
                e < 1e-3,
                "{name}[{idx}]: rel err {e} (analytic {analytic} vs numeric {numeric})"
            );
            worst = worst.max(e);
            checked += 1;
        }
    }
    assert!(checked >= 16);
    println!("end-to-end gradient worst rel err over {checked} params: {worst:.3e}");
}

#[test]
fn sigma_is_exactly_independent_of_direction() {
    let cfg = toy_cfg();
    let store = init_store(&cfg, 21, false);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let views: Vec<warpfield::field::ViewFeature> = (0..3)
        .map(|_| warpfield::field::ViewFeature {
            v: (0..cfg.feature_len()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            valid: true,
        })
        .collect();
    let x = nalgebra::Vector3::new(0.1, -0.2, 0.3);
    let d = nalgebra::Vector3::new(0.6, 0.0, 0.8);

    let base = warpfield::field::query_field(&cfg, &store, FieldKind::Coarse, &x, &d, &views)
        .unwrap();
    // finite differences of sigma w.r.t. every direction entry are exactly 0
    let eps = 1e-4;
    for i in 0..3 {
        let mut dp = d;
        dp[i] += eps;
        let dp = dp.normalize();
        let mut dm = d;
        dm[i] -= eps;
        let dm = dm.normalize();
        let sp = warpfield::field::query_field(&cfg, &store, FieldKind::Coarse, &x, &dp, &views)
            .unwrap();
        let sm = warpfield::field::query_field(&cfg, &store, FieldKind::Coarse, &x, &dm, &views)
            .unwrap();
        let fd = (sp.sigma - sm.sigma) / (2.0 * eps);
        assert!(fd.abs() < 1e-9, "d-sensitivity {fd} on axis {i}");
        assert_eq!(sp.sigma, base.sigma, "sigma must be bitwise identical");
    }
}
