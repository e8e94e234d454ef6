use crate::Command;
use serde::Deserialize;
use std::path::Path;
use warpfield::cfw::TargetSpec;
use warpfield::config::{ModelConfig, RenderConfig, TrainConfig};
use warpfield::dataio::{self, Scene, Splits};
use warpfield::error::{Error, Result};
use warpfield::geometry::{Intrinsics, Pose};
use warpfield::metrics::{psnr, ssim, FrameMetrics, MetricReport};
use warpfield::training::{self, TrainState};

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData { out, frames, size, seed, blobs, expr_dim, val_frames } => {
            gen_data(&out, frames, size, seed, blobs, expr_dim, val_frames)
        }
        Command::Train {
            manifest,
            checkpoint,
            iterations,
            lr,
            rays_per_step,
            n_coarse,
            n_fine,
            seed,
            inputs,
            m_min,
            m_max,
            log,
            resume,
            preset,
            log_every,
        } => train(
            &manifest, &checkpoint, iterations, lr, rays_per_step, n_coarse, n_fine, seed,
            inputs, m_min, m_max, log.as_deref(), resume.as_deref(), &preset, log_every,
        ),
        Command::Render {
            checkpoint, manifest, inputs, pose_file, pose_frames, out, seed, size,
            n_coarse, n_fine,
        } => {
            let (state, scene) = load_pair(&checkpoint, &manifest)?;
            let delta = scene.frame(inputs[0])?.delta.clone();
            let views = resolve_views(&scene, pose_file.as_deref(), pose_frames.as_deref())?;
            render_series(
                &state, &scene, &inputs, &TargetSpec::Delta(delta), &views, &out, size,
                render_cfg(n_coarse, n_fine, seed), "view",
            )
        }
        Command::Edit {
            checkpoint, manifest, inputs, delta, pose_file, pose_frames, out, seed, size,
            n_coarse, n_fine,
        } => {
            let (state, scene) = load_pair(&checkpoint, &manifest)?;
            let delta = parse_delta(&delta, scene.expr_dim())?;
            let views = resolve_views(&scene, pose_file.as_deref(), pose_frames.as_deref())?;
            render_series(
                &state, &scene, &inputs, &TargetSpec::Delta(delta), &views, &out, size,
                render_cfg(n_coarse, n_fine, seed), "edit",
            )
        }
        Command::Reenact {
            checkpoint, manifest, inputs, driver, window, pose_file, pose_frames, out, seed,
            size, n_coarse, n_fine,
        } => reenact(
            &checkpoint, &manifest, &inputs, &driver, window, pose_file.as_deref(),
            pose_frames.as_deref(), &out, size, render_cfg(n_coarse, n_fine, seed),
        ),
        Command::Eval { checkpoint, manifest, inputs, split, out, seed, n_coarse, n_fine } => {
            eval(&checkpoint, &manifest, &inputs, &split, &out, render_cfg(n_coarse, n_fine, seed))
        }
    }
}

fn render_cfg(n_coarse: usize, n_fine: usize, seed: u64) -> RenderConfig {
    RenderConfig {
        n_coarse,
        n_fine,
        jitter: false,
        seed,
        ..RenderConfig::default()
    }
}

#[allow(clippy::too_many_arguments)]
fn gen_data(
    out: &Path,
    frames: usize,
    size: usize,
    seed: u64,
    blobs: usize,
    expr_dim: usize,
    val_frames: usize,
) -> Result<()> {
    let cfg = dataio::synth::random_scene_config(seed, blobs, expr_dim);
    let mut scene = dataio::synth::generate_blob_dataset(&cfg, frames, (size, size))?;
    let n_val = val_frames.min(frames.saturating_sub(2));
    scene.splits = Splits {
        train: (0..frames - n_val).collect(),
        val: (frames - n_val..frames).collect(),
    };
    dataio::write_scene(&scene, out)?;
    let cfg_path = out.join("synth_config.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg)?)?;
    println!(
        "wrote {} frames ({}x{}) to {} (val split: {:?})",
        frames,
        size,
        size,
        out.display(),
        scene.splits.val
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    manifest: &Path,
    checkpoint: &Path,
    iterations: u64,
    lr: f64,
    rays_per_step: usize,
    n_coarse: usize,
    n_fine: usize,
    seed: u64,
    inputs: Option<Vec<usize>>,
    m_min: usize,
    m_max: usize,
    log: Option<&Path>,
    resume: Option<&Path>,
    preset: &str,
    log_every: u64,
) -> Result<()> {
    if m_min < 1 || m_min > m_max {
        return Err(Error::invalid("require 1 <= m-min <= m-max"));
    }
    let scene = dataio::load_scene(manifest)?;
    let train_cfg = TrainConfig {
        lr,
        m_min,
        m_max,
        rays_per_step,
        iterations,
        seed,
        fixed_inputs: inputs,
        n_coarse,
        n_fine,
        ..TrainConfig::default()
    };
    let mut state = match resume {
        Some(path) => {
            let mut state = training::load_checkpoint(path)?;
            check_expr_dim(&state, &scene)?;
            state.train_cfg = train_cfg;
            state
        }
        None => {
            let model_cfg = match preset {
                "compact" => ModelConfig { seed, ..ModelConfig::compact(scene.expr_dim()) },
                _ => ModelConfig { seed, ..ModelConfig::with_expr_dim(scene.expr_dim()) },
            };
            training::init_state(model_cfg, train_cfg)
        }
    };

    let scenes = [scene];
    training::train_loop(&mut state, &scenes, log, |stats| {
        if log_every > 0 && stats.iteration % log_every == 0 {
            println!(
                "iter {:6}  loss_coarse {:.6}  loss_fine {:.6}  M={}",
                stats.iteration, stats.loss_coarse, stats.loss_fine, stats.m
            );
        }
    })?;
    training::save_checkpoint(&state, checkpoint)?;
    println!("saved checkpoint to {}", checkpoint.display());
    Ok(())
}

fn load_pair(checkpoint: &Path, manifest: &Path) -> Result<(TrainState, Scene)> {
    let scene = dataio::load_scene(manifest)?;
    let state = training::load_checkpoint(checkpoint)?;
    check_expr_dim(&state, &scene)?;
    Ok((state, scene))
}

fn check_expr_dim(state: &TrainState, scene: &Scene) -> Result<()> {
    if state.model_cfg.expr_dim != scene.expr_dim() {
        return Err(Error::manifest(format!(
            "checkpoint expression dimension E={} is incompatible with manifest E={}",
            state.model_cfg.expr_dim,
            scene.expr_dim()
        )));
    }
    Ok(())
}

fn parse_delta(text: &str, expr_dim: usize) -> Result<Vec<f64>> {
    let values: std::result::Result<Vec<f64>, _> =
        text.split(',').map(|s| s.trim().parse::<f64>()).collect();
    let values =
        values.map_err(|e| Error::invalid(format!("cannot parse --delta {text:?}: {e}")))?;
    if values.len() != expr_dim {
        return Err(Error::invalid(format!(
            "--delta has {} components but the dataset's expression dimension is {expr_dim}",
            values.len()
        )));
    }
    Ok(values)
}

#[derive(Deserialize)]
struct PoseRecord {
    #[serde(rename = "pose_R")]
    pose_r: [f64; 9],
    pose_t: [f64; 3],
}

/// Poses to render: an explicit pose file wins, then borrowed frame poses.
fn resolve_views(
    scene: &Scene,
    pose_file: Option<&Path>,
    pose_frames: Option<&[usize]>,
) -> Result<Vec<Pose>> {
    if let Some(path) = pose_file {
        let text = std::fs::read_to_string(path)?;
        let records: Vec<PoseRecord> = serde_json::from_str(&text)
            .map_err(|e| Error::manifest(format!("bad pose file: {e}")))?;
        if records.is_empty() {
            return Err(Error::manifest("pose file has no poses"));
        }
        return Ok(records
            .iter()
            .map(|r| Pose {
                rotation: warpfield::nalgebra::Matrix3::new(
                    r.pose_r[0], r.pose_r[1], r.pose_r[2], r.pose_r[3], r.pose_r[4],
                    r.pose_r[5], r.pose_r[6], r.pose_r[7], r.pose_r[8],
                ),
                translation: warpfield::nalgebra::Vector3::new(r.pose_t[0], r.pose_t[1], r.pose_t[2]),
            })
            .collect());
    }
    if let Some(frames) = pose_frames {
        let mut poses = Vec::with_capacity(frames.len());
        for &i in frames {
            poses.push(scene.frame(i)?.pose);
        }
        return Ok(poses);
    }
    Err(Error::invalid("provide --pose-file or --pose-frames"))
}

fn scaled_camera(base: &Intrinsics, orig_hw: (usize, usize), size: Option<usize>) -> (Intrinsics, usize, usize) {
    match size {
        None => (*base, orig_hw.0, orig_hw.1),
        Some(s) => {
            let sx = s as f64 / orig_hw.1 as f64;
            let sy = s as f64 / orig_hw.0 as f64;
            (
                Intrinsics {
                    fx: base.fx * sx,
                    fy: base.fy * sy,
                    cx: base.cx * sx,
                    cy: base.cy * sy,
                },
                s,
                s,
            )
        }
    }
}

fn gather_inputs<'a>(scene: &'a Scene, inputs: &[usize]) -> Result<Vec<&'a dataio::TrackedFrame>> {
    if inputs.is_empty() {
        return Err(Error::invalid("need at least one input frame id"));
    }
    inputs.iter().map(|&i| scene.frame(i)).collect()
}

#[allow(clippy::too_many_arguments)]
fn render_series(
    state: &TrainState,
    scene: &Scene,
    inputs: &[usize],
    target: &TargetSpec,
    poses: &[Pose],
    out: &Path,
    size: Option<usize>,
    cfg: RenderConfig,
    prefix: &str,
) -> Result<()> {
    let frames = gather_inputs(scene, inputs)?;
    std::fs::create_dir_all(out)?;
    let base = frames[0];
    let (k, h, w) = scaled_camera(&base.intrinsics, (base.height(), base.width()), size);
    for (i, pose) in poses.iter().enumerate() {
        let (_, fine) = training::render_view(
            state, &frames, target, pose, &k, h, w, scene.near, scene.far, &cfg,
        )?;
        let img_path = out.join(format!("{prefix}_{i:04}.png"));
        dataio::save_image_png(&fine.rgb, &img_path)?;
        dataio::save_depth_png(
            &fine.depth,
            scene.near,
            scene.far,
            &out.join(format!("{prefix}_{i:04}_depth.png")),
        )?;
        println!("wrote {}", img_path.display());
    }
    Ok(())
}

fn parse_driver(path: &Path, expr_dim: usize) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|s| s.trim().parse::<f64>()).collect();
        match parsed {
            Ok(row) => {
                if row.len() != expr_dim {
                    return Err(Error::manifest(format!(
                        "driver line {}: {} columns, expected {expr_dim}",
                        lineno + 1,
                        row.len()
                    )));
                }
                rows.push(row);
            }
            Err(e) => {
                // a non-numeric first line is an optional header
                if lineno == 0 {
                    continue;
                }
                return Err(Error::manifest(format!("driver line {}: {e}", lineno + 1)));
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::manifest("empty driver sequence"));
    }
    Ok(rows)
}

#[allow(clippy::too_many_arguments)]
fn reenact(
    checkpoint: &Path,
    manifest: &Path,
    inputs: &[usize],
    driver: &Path,
    window: usize,
    pose_file: Option<&Path>,
    pose_frames: Option<&[usize]>,
    out: &Path,
    size: Option<usize>,
    cfg: RenderConfig,
) -> Result<()> {
    let (state, scene) = load_pair(checkpoint, manifest)?;
    let sequence = parse_driver(driver, scene.expr_dim())?;
    let poses = resolve_views(&scene, pose_file, pose_frames)?;
    let frames = gather_inputs(&scene, inputs)?;
    std::fs::create_dir_all(out)?;
    let base = frames[0];
    let (k, h, w) = scaled_camera(&base.intrinsics, (base.height(), base.width()), size);
    for t in 0..sequence.len() {
        let target = TargetSpec::Window {
            sequence: sequence.clone(),
            center: t,
            radius: window,
        };
        let pose = poses[t % poses.len()];
        let (_, fine) = training::render_view(
            &state, &frames, &target, &pose, &k, h, w, scene.near, scene.far, &cfg,
        )?;
        dataio::save_image_png(&fine.rgb, &out.join(format!("frame_{t:04}.png")))?;
    }
    println!("wrote {} reenacted frames to {}", sequence.len(), out.display());
    Ok(())
}

fn eval(
    checkpoint: &Path,
    manifest: &Path,
    inputs: &[usize],
    split: &str,
    out: &Path,
    cfg: RenderConfig,
) -> Result<()> {
    let (state, scene) = load_pair(checkpoint, manifest)?;
    let frames = gather_inputs(&scene, inputs)?;
    let ids: &[usize] = match split {
        "train" => &scene.splits.train,
        _ => &scene.splits.val,
    };
    if ids.is_empty() {
        return Err(Error::EmptySplit);
    }
    let mut rows = Vec::with_capacity(ids.len());
    for &id in ids {
        let frame = scene.frame(id)?;
        let (_, fine) = training::render_view(
            &state,
            &frames,
            &TargetSpec::Delta(frame.delta.clone()),
            &frame.pose,
            &frame.intrinsics,
            frame.height(),
            frame.width(),
            scene.near,
            scene.far,
            &cfg,
        )?;
        let row = FrameMetrics {
            frame: id,
            psnr: psnr(&fine.rgb, &frame.image, 1.0)?,
            ssim: ssim(&fine.rgb, &frame.image)?,
        };
        println!("frame {:4}  psnr {:7.3}  ssim {:.4}", row.frame, row.psnr, row.ssim);
        rows.push(row);
    }
    let report = MetricReport::from_rows(rows);
    report.write_json(out)?;
    println!(
        "mean psnr {:.3}  mean ssim {:.4}  ({} frames) -> {}",
        report.mean_psnr,
        report.mean_ssim,
        report.per_frame.len(),
        out.display()
    );
    Ok(())
}
