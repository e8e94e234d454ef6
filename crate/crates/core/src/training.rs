//! Few-shot training: tuple sampling with random M, photometric loss over
//! hierarchical renders, optimization and checkpointing.

use crate::cfw::{self, TapeVolume, TargetSpec};
use crate::config::{ModelConfig, TrainConfig};
use crate::dataio::Scene;
use crate::diff::{Arr, Tape};
use crate::error::{Error, Result};
use crate::field::{self, FieldKind};
use crate::geometry::pixel_ray;
use crate::params::{Adam, GradMap, ParamStore};
use crate::renderer;
use ndarray::{Array1, Array2, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Mutable training state; everything a checkpoint persists.
pub struct TrainState {
    pub model_cfg: ModelConfig,
    pub train_cfg: TrainConfig,
    pub params: ParamStore,
    pub adam: Adam,
    pub iteration: u64,
}

/// Fresh state with seeded parameter init for the warping module and both
/// field networks.
pub fn init_state(model_cfg: ModelConfig, train_cfg: TrainConfig) -> TrainState {
    let mut params = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(model_cfg.seed);
    cfw::init_params(&model_cfg, &mut params, &mut rng);
    field::init_params(&model_cfg, FieldKind::Coarse, &mut params, &mut rng);
    field::init_params(&model_cfg, FieldKind::Fine, &mut params, &mut rng);
    let adam = Adam::new(&params);
    TrainState {
        model_cfg,
        train_cfg,
        params,
        adam,
        iteration: 0,
    }
}

fn stream_rng(seed: u64, hi: u64, lo: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((hi << 24) | lo);
    rng
}

/// Frames eligible for tuple sampling: the train split, or every frame when
/// no split is declared.
fn eligible_frames(scene: &Scene) -> Vec<usize> {
    if scene.splits.train.is_empty() {
        (0..scene.frames.len()).collect()
    } else {
        scene.splits.train.clone()
    }
}

/// Uniformly samples M in [m_min, min(m_max, n-1)], M distinct input frames
/// and one further target frame.
pub fn sample_tuple<R: Rng>(
    scene: &Scene,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<(Vec<usize>, usize)> {
    let pool = eligible_frames(scene);
    let n = pool.len();
    if n < cfg.m_min + 1 {
        return Err(Error::invalid(format!(
            "video too small: {n} frames, need at least {}",
            cfg.m_min + 1
        )));
    }
    let m_hi = cfg.m_max.min(n - 1);
    let m = rng.gen_range(cfg.m_min..=m_hi);
    let mut indices: Vec<usize> = pool.clone();
    // partial Fisher-Yates: first m+1 entries become inputs + target
    for i in 0..=m {
        let j = rng.gen_range(i..indices.len());
        indices.swap(i, j);
    }
    let inputs = indices[..m].to_vec();
    let target = indices[m];
    Ok((inputs, target))
}

/// Mean over rays of the squared L2 color error (summed over channels).
pub fn photometric_loss(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::invalid("photometric loss shape mismatch"));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = pred
        .iter()
        .zip(gt.iter())
        .map(|(p, g)| (0..3).map(|c| (p[c] - g[c]) * (p[c] - g[c])).sum::<f64>())
        .sum();
    Ok(total / pred.len() as f64)
}

/// Everything that defines one optimization step, fixed before any compute.
#[derive(Clone, Debug)]
pub struct StepPlan {
    pub iteration: u64,
    pub scene_idx: usize,
    pub inputs: Vec<usize>,
    pub target: usize,
    /// (u, v) pixel indices of the supervised rays.
    pub pixels: Vec<(usize, usize)>,
}

/// Deterministically plans step `iteration` over the given scenes.
pub fn plan_step(scenes: &[Scene], cfg: &TrainConfig, iteration: u64) -> Result<StepPlan> {
    if scenes.is_empty() {
        return Err(Error::invalid("no scenes to train on"));
    }
    let mut rng = stream_rng(cfg.seed, iteration + 1, 0);
    let scene_idx = rng.gen_range(0..scenes.len());
    let scene = &scenes[scene_idx];

    let (inputs, target) = match &cfg.fixed_inputs {
        Some(fixed) => {
            for &i in fixed {
                scene.frame(i)?;
            }
            let pool = eligible_frames(scene);
            let candidates: Vec<usize> =
                pool.into_iter().filter(|i| !fixed.contains(i)).collect();
            if candidates.is_empty() {
                return Err(Error::invalid("no target frames outside fixed inputs"));
            }
            let target = candidates[rng.gen_range(0..candidates.len())];
            (fixed.clone(), target)
        }
        None => sample_tuple(scene, cfg, &mut rng)?,
    };

    let frame = scene.frame(target)?;
    let (h, w) = (frame.height(), frame.width());
    let pixels = (0..cfg.rays_per_step)
        .map(|_| {
            let idx = rng.gen_range(0..h * w);
            (idx % w, idx / w)
        })
        .collect();
    Ok(StepPlan {
        iteration,
        scene_idx,
        inputs,
        target,
        pixels,
    })
}

#[derive(Clone, Copy, Debug, Default)]
pub struct StepOptions {
    pub compute_grads: bool,
    /// Skip the flow/warp stage and feed unwarped features to the field;
    /// ablation and equivalence testing.
    pub bypass_warp: bool,
}

#[derive(Debug)]
pub struct StepForward {
    pub loss_coarse: f64,
    pub loss_fine: f64,
    pub grads: Option<GradMap>,
}

impl StepForward {
    pub fn total(&self, weights: (f64, f64)) -> f64 {
        weights.0 * self.loss_coarse + weights.1 * self.loss_fine
    }
}

struct ChunkResult {
    loss_coarse_sum: f64,
    loss_fine_sum: f64,
    grads: Option<GradMap>,
}

/// Renders the planned rays through the full differentiable pipeline and
/// returns per-pass photometric losses (mean over rays), optionally with
/// parameter gradients. Ray chunks are processed independently (one tape
/// each) and reduced in fixed order, so results do not depend on the
/// parallel schedule.
pub fn step_forward(
    params: &ParamStore,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    scenes: &[Scene],
    plan: &StepPlan,
    opts: StepOptions,
) -> Result<StepForward> {
    let scene = &scenes[plan.scene_idx];
    let target_frame = scene.frame(plan.target)?;
    let input_frames: Vec<&crate::dataio::TrackedFrame> = plan
        .inputs
        .iter()
        .map(|&i| scene.frame(i))
        .collect::<Result<_>>()?;
    let target_spec = TargetSpec::Delta(target_frame.delta.clone());

    let n_rays = plan.pixels.len();
    let chunk_size = n_rays.div_ceil(cfg.chunks_per_step.max(1));
    let chunks: Vec<(usize, &[(usize, usize)])> = plan
        .pixels
        .chunks(chunk_size)
        .enumerate()
        .map(|(i, c)| (i * chunk_size, c))
        .collect();

    let results: Vec<Result<ChunkResult>> = chunks
        .par_iter()
        .map(|&(ray_offset, pixels)| {
            run_chunk(
                params,
                model_cfg,
                cfg,
                scene,
                &input_frames,
                target_frame,
                &target_spec,
                plan.iteration,
                ray_offset,
                pixels,
                opts,
            )
        })
        .collect();

    let mut loss_coarse_sum = 0.0;
    let mut loss_fine_sum = 0.0;
    let mut grads = opts.compute_grads.then(|| GradMap::zeros_like(params));
    for r in results {
        let r = r?;
        loss_coarse_sum += r.loss_coarse_sum;
        loss_fine_sum += r.loss_fine_sum;
        if let (Some(acc), Some(g)) = (grads.as_mut(), r.grads.as_ref()) {
            acc.add_assign(g);
        }
    }
    if let Some(g) = grads.as_mut() {
        g.scale(1.0 / n_rays as f64);
    }
    Ok(StepForward {
        loss_coarse: loss_coarse_sum / n_rays as f64,
        loss_fine: loss_fine_sum / n_rays as f64,
        grads,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_chunk(
    params: &ParamStore,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    scene: &Scene,
    input_frames: &[&crate::dataio::TrackedFrame],
    target_frame: &crate::dataio::TrackedFrame,
    target_spec: &TargetSpec,
    iteration: u64,
    ray_offset: usize,
    pixels: &[(usize, usize)],
    opts: StepOptions,
) -> Result<ChunkResult> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);

    // warp every input's features toward the target expression
    let volumes: Vec<TapeVolume> = if opts.bypass_warp {
        input_frames
            .iter()
            .map(|f| cfw::encode_tape(&mut tape, &bound, model_cfg, &f.image))
            .collect::<Result<_>>()?
    } else {
        cfw::warp_to_target_tape(&mut tape, &bound, model_cfg, input_frames, target_spec)?
    };

    // supervised rays and their ground-truth colors
    let n = pixels.len();
    let mut rays = Vec::with_capacity(n);
    let mut gt = Vec::with_capacity(n * 3);
    for &(u, v) in pixels {
        rays.push(pixel_ray(
            &target_frame.intrinsics,
            &target_frame.pose,
            u as f64 + 0.5,
            v as f64 + 0.5,
            scene.near,
            scene.far,
        ));
        for c in 0..3 {
            gt.push(target_frame.image[(v, u, c)]);
        }
    }
    let gt = Arr::from_shape_vec(IxDyn(&[n, 3]), gt).unwrap();
    let gt_var = tape.constant(gt);

    // coarse pass
    let coarse_t: Vec<Vec<f64>> = rays
        .iter()
        .enumerate()
        .map(|(i, ray)| {
            let mut rng = stream_rng(
                cfg.seed,
                iteration + 1,
                1 + 2 * (ray_offset + i) as u64,
            );
            crate::geometry::stratified_sample(ray.near, ray.far, cfg.n_coarse, true, &mut rng)
                .t_values
        })
        .collect();
    let (coarse_rgb, coarse_weights) = render_pass(
        &mut tape,
        &bound,
        model_cfg,
        FieldKind::Coarse,
        &rays,
        &coarse_t,
        input_frames,
        &volumes,
        scene.far,
    )?;

    // fine pass over the union of coarse and importance samples
    let union_t: Vec<Vec<f64>> = rays
        .iter()
        .enumerate()
        .map(|(i, ray)| {
            let mut merged = coarse_t[i].clone();
            if cfg.n_fine > 0 {
                let mut rng = stream_rng(
                    cfg.seed,
                    iteration + 1,
                    2 + 2 * (ray_offset + i) as u64,
                );
                let step = (ray.far - ray.near) / cfg.n_coarse as f64;
                let bins = crate::geometry::SampleBins {
                    t_values: coarse_t[i].clone(),
                    bin_edges: (0..=cfg.n_coarse)
                        .map(|k| ray.near + step * k as f64)
                        .collect(),
                };
                let fine = crate::geometry::importance_sample(
                    &bins,
                    &coarse_weights[i],
                    cfg.n_fine,
                    true,
                    &mut rng,
                );
                merged.extend(fine.t_values);
                merged.sort_by(|a, b| a.partial_cmp(b).unwrap());
            }
            merged
        })
        .collect();
    let (fine_rgb, _) = render_pass(
        &mut tape,
        &bound,
        model_cfg,
        FieldKind::Fine,
        &rays,
        &union_t,
        input_frames,
        &volumes,
        scene.far,
    )?;

    // summed (not yet mean) photometric losses
    let coarse_diff = tape.sub(coarse_rgb, gt_var);
    let coarse_sq = tape.mul(coarse_diff, coarse_diff);
    let loss_c = tape.sum_all(coarse_sq);
    let fine_diff = tape.sub(fine_rgb, gt_var);
    let fine_sq = tape.mul(fine_diff, fine_diff);
    let loss_f = tape.sum_all(fine_sq);

    let (wc, wf) = cfg.coarse_fine_loss_weights;
    let loss_c_scaled = tape.scale(loss_c, wc);
    let loss_f_scaled = tape.scale(loss_f, wf);
    let total = tape.add(loss_c_scaled, loss_f_scaled);

    let loss_coarse_sum = tape.value(loss_c)[[0]];
    let loss_fine_sum = tape.value(loss_f)[[0]];
    let grads = if opts.compute_grads {
        let mut g = tape.backward(total);
        Some(bound.collect_grads(params, &mut g))
    } else {
        None
    };
    Ok(ChunkResult {
        loss_coarse_sum,
        loss_fine_sum,
        grads,
    })
}

/// One field evaluation + compositing pass over per-ray depth lists.
/// Returns the `[R,3]` rgb var and the detached per-ray weights.
#[allow(clippy::too_many_arguments)]
fn render_pass(
    tape: &mut Tape,
    bound: &crate::params::Bound,
    model_cfg: &ModelConfig,
    kind: FieldKind,
    rays: &[crate::geometry::Ray],
    depths: &[Vec<f64>],
    frames: &[&crate::dataio::TrackedFrame],
    volumes: &[TapeVolume],
    far: f64,
) -> Result<(crate::diff::Var, Vec<Vec<f64>>)> {
    let r = rays.len();
    let s = depths[0].len();
    debug_assert!(depths.iter().all(|d| d.len() == s));
    let mut points = Vec::with_capacity(r * s);
    let mut dirs = Vec::with_capacity(r * s);
    let mut t_mat = Array2::<f64>::zeros((r, s));
    for (i, (ray, ts)) in rays.iter().zip(depths.iter()).enumerate() {
        for (k, &t) in ts.iter().enumerate() {
            points.push(ray.origin + ray.direction * t);
            dirs.push(ray.direction);
            t_mat[(i, k)] = t;
        }
    }
    let (sigma, color) = field::field_forward(
        tape, bound, model_cfg, kind, &points, &dirs, frames, volumes,
    )?;
    let sigma_rs = tape.reshape(sigma, &[r, s]);
    let color_rs3 = tape.reshape(color, &[r, s, 3]);
    let packed = tape.composite_pack(
        sigma_rs,
        color_rs3,
        Arc::new(t_mat),
        Arc::new(Array1::from_elem(r, far)),
        [0.0, 0.0, 0.0],
    );
    let layout = crate::diff::CompositeLayout { n_samples: s };
    let rgb = tape.slice_cols(packed, layout.rgb().start, layout.rgb().end);

    let packed_vals = tape.value(packed);
    let weights: Vec<Vec<f64>> = (0..r)
        .map(|i| {
            layout
                .weights()
                .map(|col| packed_vals[[i, col]].max(0.0))
                .collect()
        })
        .collect();
    Ok((rgb, weights))
}

#[derive(Clone, Debug)]
pub struct StepStats {
    pub iteration: u64,
    pub loss_coarse: f64,
    pub loss_fine: f64,
    pub m: usize,
    pub wall_ms: u128,
}

/// One optimizer update: plan, forward+backward, Adam.
pub fn train_step(state: &mut TrainState, scenes: &[Scene]) -> Result<StepStats> {
    let start = std::time::Instant::now();
    let plan = plan_step(scenes, &state.train_cfg, state.iteration)?;
    let fwd = step_forward(
        &state.params,
        &state.model_cfg,
        &state.train_cfg,
        scenes,
        &plan,
        StepOptions { compute_grads: true, bypass_warp: false },
    )?;
    let grads = fwd.grads.as_ref().expect("gradients requested");

    if !(fwd.loss_coarse.is_finite() && fwd.loss_fine.is_finite()) || !grads.all_finite() {
        return Err(Error::NonFiniteLoss {
            iteration: state.iteration,
            detail: format!("inputs {:?}, target {}", plan.inputs, plan.target),
        });
    }
    state
        .adam
        .step(&mut state.params, grads, state.train_cfg.lr);
    if state.train_cfg.check_finite && !state.params.all_finite() {
        return Err(Error::NonFiniteLoss {
            iteration: state.iteration,
            detail: "parameters became non-finite after the update".into(),
        });
    }
    let stats = StepStats {
        iteration: state.iteration,
        loss_coarse: fwd.loss_coarse,
        loss_fine: fwd.loss_fine,
        m: plan.inputs.len(),
        wall_ms: start.elapsed().as_millis(),
    };
    state.iteration += 1;
    Ok(stats)
}

/// Runs `train_cfg.iterations` steps, optionally appending a CSV log
/// (iteration, loss_coarse, loss_fine, M, wall_ms).
pub fn train_loop(
    state: &mut TrainState,
    scenes: &[Scene],
    log_path: Option<&Path>,
    mut on_step: impl FnMut(&StepStats),
) -> Result<Vec<StepStats>> {
    let mut log = match log_path {
        Some(p) => {
            let mut f = std::fs::File::create(p)?;
            writeln!(f, "iteration,loss_coarse,loss_fine,M,wall_ms")?;
            Some(f)
        }
        None => None,
    };
    let mut history = Vec::with_capacity(state.train_cfg.iterations as usize);
    for _ in 0..state.train_cfg.iterations {
        let stats = train_step(state, scenes)?;
        if let Some(f) = log.as_mut() {
            writeln!(
                f,
                "{},{:.12e},{:.12e},{},{}",
                stats.iteration, stats.loss_coarse, stats.loss_fine, stats.m, stats.wall_ms
            )?;
        }
        on_step(&stats);
        history.push(stats);
    }
    Ok(history)
}

// ---- checkpointing ---------------------------------------------------------

fn write_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn write_bytes(out: &mut Vec<u8>, data: &[u8]) {
    write_u64(out, data.len() as u64);
    out.extend_from_slice(data);
}

fn write_arr(out: &mut Vec<u8>, arr: &Arr) {
    write_u64(out, arr.ndim() as u64);
    for &d in arr.shape() {
        write_u64(out, d as u64);
    }
    for &v in arr.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::checkpoint("file truncated"));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }

    fn arr(&mut self) -> Result<Arr> {
        let ndim = self.u64()? as usize;
        if ndim > 8 {
            return Err(Error::checkpoint("implausible tensor rank"));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = self.take(len * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Arr::from_shape_vec(IxDyn(&shape), data)
            .map_err(|_| Error::checkpoint("tensor shape mismatch"))
    }
}

#[derive(serde::Serialize, serde::Deserialize)]
struct CheckpointConfigs {
    model: ModelConfig,
    train: TrainConfig,
}

/// Single versioned binary file: configs, iteration counter, parameters and
/// optimizer state. save -> load -> save is byte-identical.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let configs = CheckpointConfigs {
        model: state.model_cfg.clone(),
        train: state.train_cfg.clone(),
    };
    write_bytes(&mut out, serde_json::to_string(&configs)?.as_bytes());
    write_u64(&mut out, state.iteration);

    write_u64(&mut out, state.params.len() as u64);
    for (name, arr) in state.params.iter() {
        write_bytes(&mut out, name.as_bytes());
        write_arr(&mut out, arr);
    }
    write_u64(&mut out, state.adam.step_count);
    for arr in state.adam.m.iter().chain(state.adam.v.iter()) {
        write_arr(&mut out, arr);
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let data = std::fs::read(path)?;
    let mut r = Reader { data: &data, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::checkpoint("bad magic; not a checkpoint file"));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::checkpoint(format!(
            "version {version} unsupported; this build reads version {CHECKPOINT_VERSION}"
        )));
    }
    let configs: CheckpointConfigs = serde_json::from_slice(r.bytes()?)
        .map_err(|e| Error::checkpoint(format!("bad config block: {e}")))?;
    let iteration = r.u64()?;

    let n_params = r.u64()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..n_params {
        let name = String::from_utf8(r.bytes()?.to_vec())
            .map_err(|_| Error::checkpoint("parameter name is not utf-8"))?;
        params.insert(name, r.arr()?);
    }
    let step_count = r.u64()?;
    let mut m = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        m.push(r.arr()?);
    }
    let mut v = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        v.push(r.arr()?);
    }
    if r.pos != data.len() {
        return Err(Error::checkpoint("trailing bytes after checkpoint payload"));
    }
    Ok(TrainState {
        model_cfg: configs.model,
        train_cfg: configs.train,
        params,
        adam: Adam { m, v, step_count },
        iteration,
    })
}

/// Convenience wrapper for rendering with a trained state; see
/// [`renderer::render_view`].
pub fn render_view(
    state: &TrainState,
    frames: &[&crate::dataio::TrackedFrame],
    target: &TargetSpec,
    pose: &crate::geometry::Pose,
    intrinsics: &crate::geometry::Intrinsics,
    h: usize,
    w: usize,
    near: f64,
    far: f64,
    render_cfg: &crate::config::RenderConfig,
) -> Result<(renderer::RenderOutput, renderer::RenderOutput)> {
    renderer::render_view(
        &state.model_cfg,
        &state.params,
        frames,
        target,
        pose,
        intrinsics,
        h,
        w,
        near,
        far,
        render_cfg,
    )
}
