//! Volumetric rendering: quadrature compositing along rays and the
//! coarse-to-fine hierarchical render loop.

use crate::config::RenderConfig;
use crate::error::{Error, Result};
use crate::geometry::{importance_sample, stratified_sample, Ray};
use nalgebra::Vector3;
use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Floor for the depth normalizer `depth = sum(w t) / max(sum w, ..)`.
pub use crate::diff::sample::DEPTH_EPS;

#[derive(Clone, Debug)]
pub struct CompositedRay {
    pub rgb: [f64; 3],
    pub depth: f64,
    pub acc: f64,
    pub weights: Vec<f64>,
}

/// Discrete quadrature of the volume rendering integral.
///
/// `delta_k = t_{k+1} - t_k` (the last interval closes at `far`),
/// `alpha_k = 1 - exp(-sigma_k delta_k)`, `w_k = alpha_k prod_{j<k}(1 - alpha_j)`;
/// rgb blends the residual transmittance with `background`.
pub fn composite(
    t: &[f64],
    sigmas: &[f64],
    colors: &[[f64; 3]],
    background: [f64; 3],
    far: f64,
) -> Result<CompositedRay> {
    let n = t.len();
    if sigmas.len() != n || colors.len() != n {
        return Err(Error::invalid("composite inputs must have equal length"));
    }
    if t.windows(2).any(|p| p[0] > p[1]) {
        return Err(Error::invalid("composite requires sorted sample depths"));
    }
    let mut weights = vec![0.0f64; n];
    let mut transmittance = 1.0;
    let mut rgb = [0.0f64; 3];
    let mut acc = 0.0;
    let mut depth_num = 0.0;
    for k in 0..n {
        let delta = if k + 1 < n {
            t[k + 1] - t[k]
        } else {
            (far - t[k]).max(0.0)
        };
        let alpha = 1.0 - (-sigmas[k] * delta).exp();
        let w = alpha * transmittance;
        transmittance *= 1.0 - alpha;
        weights[k] = w;
        acc += w;
        depth_num += w * t[k];
        for c in 0..3 {
            rgb[c] += w * colors[k][c];
        }
    }
    for c in 0..3 {
        rgb[c] += (1.0 - acc) * background[c];
    }
    Ok(CompositedRay {
        rgb,
        depth: depth_num / acc.max(DEPTH_EPS),
        acc,
        weights,
    })
}

/// A radiance field that can be queried for batched points.
pub trait FieldEval: Sync {
    /// Fills `sigmas` (nonnegative) and `colors` (in [0,1]) for each point
    /// with its matching unit view direction.
    fn eval(
        &self,
        points: &[Vector3<f64>],
        dirs: &[Vector3<f64>],
        sigmas: &mut [f64],
        colors: &mut [[f64; 3]],
    );
}

/// The synthetic scene's analytic field; bypasses all learned networks.
pub struct AnalyticField<'a> {
    pub cfg: &'a crate::dataio::synth::SyntheticSceneConfig,
    pub delta: &'a [f64],
}

impl FieldEval for AnalyticField<'_> {
    fn eval(
        &self,
        points: &[Vector3<f64>],
        _dirs: &[Vector3<f64>],
        sigmas: &mut [f64],
        colors: &mut [[f64; 3]],
    ) {
        for (i, p) in points.iter().enumerate() {
            let (s, c) = crate::dataio::synth::synth_density_color(p, self.delta, self.cfg);
            sigmas[i] = s;
            colors[i] = c;
        }
    }
}

/// Per-ray outputs of one render pass.
#[derive(Clone, Debug, Default)]
pub struct RayBatch {
    pub rgb: Vec<[f64; 3]>,
    pub depth: Vec<f64>,
    pub acc: Vec<f64>,
}

impl RayBatch {
    fn with_capacity(n: usize) -> Self {
        RayBatch {
            rgb: Vec::with_capacity(n),
            depth: Vec::with_capacity(n),
            acc: Vec::with_capacity(n),
        }
    }
}

/// Sample layout of one hierarchical render: coarse depths, their bins and
/// weights, and the sorted union evaluated by the fine pass.
pub struct HierarchicalSamples {
    pub coarse_t: Vec<Vec<f64>>,
    pub union_t: Vec<Vec<f64>>,
}

/// Draws coarse depths for each ray; rng stream is keyed by the ray's global
/// index so results are chunking- and schedule-invariant.
pub fn coarse_depths(rays: &[Ray], cfg: &RenderConfig, ray_offset: u64) -> Vec<Vec<f64>> {
    rays.iter()
        .enumerate()
        .map(|(i, ray)| {
            let mut rng = ray_rng(cfg.seed, ray_offset + i as u64, 0);
            stratified_sample(ray.near, ray.far, cfg.n_coarse, cfg.jitter, &mut rng).t_values
        })
        .collect()
}

/// Importance-samples fine depths from coarse weights and merges them with
/// the coarse depths into a sorted union.
pub fn union_depths(
    rays: &[Ray],
    coarse_t: &[Vec<f64>],
    coarse_weights: &[Vec<f64>],
    cfg: &RenderConfig,
    ray_offset: u64,
) -> Vec<Vec<f64>> {
    rays.iter()
        .enumerate()
        .map(|(i, ray)| {
            let mut merged = coarse_t[i].clone();
            if cfg.n_fine > 0 {
                let mut rng = ray_rng(cfg.seed, ray_offset + i as u64, 1);
                // reconstruct the stratified bins the coarse pass used
                let step = (ray.far - ray.near) / cfg.n_coarse as f64;
                let bins = crate::geometry::SampleBins {
                    t_values: coarse_t[i].clone(),
                    bin_edges: (0..=cfg.n_coarse)
                        .map(|k| ray.near + step * k as f64)
                        .collect(),
                };
                let fine =
                    importance_sample(&bins, &coarse_weights[i], cfg.n_fine, cfg.jitter, &mut rng);
                merged.extend(fine.t_values);
                merged.sort_by(|a, b| a.partial_cmp(b).unwrap());
            }
            merged
        })
        .collect()
}

fn ray_rng(seed: u64, ray_index: u64, phase: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((ray_index << 1) | phase);
    rng
}

fn eval_and_composite<F: FieldEval>(
    rays: &[Ray],
    depths: &[Vec<f64>],
    field: &F,
    background: [f64; 3],
) -> (RayBatch, Vec<Vec<f64>>) {
    let total: usize = depths.iter().map(|d| d.len()).sum();
    let mut points = Vec::with_capacity(total);
    let mut dirs = Vec::with_capacity(total);
    for (ray, ts) in rays.iter().zip(depths.iter()) {
        for &t in ts {
            points.push(ray.origin + ray.direction * t);
            dirs.push(ray.direction);
        }
    }
    let mut sigmas = vec![0.0f64; total];
    let mut colors = vec![[0.0f64; 3]; total];
    field.eval(&points, &dirs, &mut sigmas, &mut colors);

    let mut batch = RayBatch::with_capacity(rays.len());
    let mut weights = Vec::with_capacity(rays.len());
    let mut offset = 0;
    for (ray, ts) in rays.iter().zip(depths.iter()) {
        let n = ts.len();
        let out = composite(
            ts,
            &sigmas[offset..offset + n],
            &colors[offset..offset + n],
            background,
            ray.far,
        )
        .expect("hierarchical depths are sorted");
        batch.rgb.push(out.rgb);
        batch.depth.push(out.depth);
        batch.acc.push(out.acc);
        weights.push(out.weights);
        offset += n;
    }
    (batch, weights)
}

/// Hierarchical render of a ray batch: stratified coarse pass, then a fine
/// pass over the sorted union of coarse and importance samples. Both passes
/// are returned; training supervises both.
pub fn render_rays_eval<C: FieldEval, F: FieldEval>(
    rays: &[Ray],
    coarse_field: &C,
    fine_field: &F,
    cfg: &RenderConfig,
    ray_offset: u64,
) -> (RayBatch, RayBatch) {
    let coarse_t = coarse_depths(rays, cfg, ray_offset);
    let (coarse_out, coarse_w) = eval_and_composite(rays, &coarse_t, coarse_field, cfg.background);
    let union_t = union_depths(rays, &coarse_t, &coarse_w, cfg, ray_offset);
    let (fine_out, _) = eval_and_composite(rays, &union_t, fine_field, cfg.background);
    (coarse_out, fine_out)
}

/// Full images of one render pass.
#[derive(Clone, Debug)]
pub struct RenderOutput {
    pub rgb: Array3<f64>,
    pub depth: Array2<f64>,
    pub acc: Array2<f64>,
}

impl RenderOutput {
    fn from_rows(batch: &RayBatch, h: usize, w: usize) -> Self {
        let mut rgb = Array3::<f64>::zeros((h, w, 3));
        let mut depth = Array2::<f64>::zeros((h, w));
        let mut acc = Array2::<f64>::zeros((h, w));
        for i in 0..h * w {
            let (y, x) = (i / w, i % w);
            for c in 0..3 {
                rgb[(y, x, c)] = batch.rgb[i][c].clamp(0.0, 1.0);
            }
            depth[(y, x)] = batch.depth[i];
            acc[(y, x)] = batch.acc[i];
        }
        RenderOutput { rgb, depth, acc }
    }
}

/// Renders a full image by chunking rays; the result is identical to an
/// unchunked render because each ray's rng is keyed by its pixel index.
pub fn render_image_eval<C: FieldEval, F: FieldEval>(
    rays: &[Ray],
    h: usize,
    w: usize,
    coarse_field: &C,
    fine_field: &F,
    cfg: &RenderConfig,
) -> (RenderOutput, RenderOutput) {
    assert_eq!(rays.len(), h * w, "one ray per pixel");
    let chunk = cfg.chunk_size.max(1);
    let pieces: Vec<(usize, RayBatch, RayBatch)> = rays
        .par_chunks(chunk)
        .enumerate()
        .map(|(ci, rays_chunk)| {
            let offset = (ci * chunk) as u64;
            let (c, f) = render_rays_eval(rays_chunk, coarse_field, fine_field, cfg, offset);
            (ci * chunk, c, f)
        })
        .collect();

    let mut coarse = RayBatch {
        rgb: vec![[0.0; 3]; rays.len()],
        depth: vec![0.0; rays.len()],
        acc: vec![0.0; rays.len()],
    };
    let mut fine = coarse.clone();
    for (start, c, f) in pieces {
        for i in 0..c.rgb.len() {
            coarse.rgb[start + i] = c.rgb[i];
            coarse.depth[start + i] = c.depth[i];
            coarse.acc[start + i] = c.acc[i];
            fine.rgb[start + i] = f.rgb[i];
            fine.depth[start + i] = f.depth[i];
            fine.acc[start + i] = f.acc[i];
        }
    }
    (
        RenderOutput::from_rows(&coarse, h, w),
        RenderOutput::from_rows(&fine, h, w),
    )
}

/// Hierarchical render of a ray batch through the learned pipeline, given
/// already-warped feature volumes for the input frames.
pub fn render_rays(
    rays: &[Ray],
    frames: &[&crate::dataio::TrackedFrame],
    volumes: &[crate::cfw::FeatureVolume],
    cfg_model: &crate::config::ModelConfig,
    store: &crate::params::ParamStore,
    cfg: &RenderConfig,
    ray_offset: u64,
) -> (RayBatch, RayBatch) {
    let coarse = crate::field::LearnedField {
        cfg: cfg_model,
        store,
        kind: crate::field::FieldKind::Coarse,
        frames: frames.to_vec(),
        volumes,
    };
    let fine = crate::field::LearnedField {
        cfg: cfg_model,
        store,
        kind: crate::field::FieldKind::Fine,
        frames: frames.to_vec(),
        volumes,
    };
    render_rays_eval(rays, &coarse, &fine, cfg, ray_offset)
}

/// Renders a full view: warps the input frames toward the target expression
/// once, then ray-marches the learned field over chunked pixels.
#[allow(clippy::too_many_arguments)]
pub fn render_view(
    cfg_model: &crate::config::ModelConfig,
    store: &crate::params::ParamStore,
    frames: &[&crate::dataio::TrackedFrame],
    target: &crate::cfw::TargetSpec,
    pose: &crate::geometry::Pose,
    intrinsics: &crate::geometry::Intrinsics,
    h: usize,
    w: usize,
    near: f64,
    far: f64,
    cfg: &RenderConfig,
) -> crate::error::Result<(RenderOutput, RenderOutput)> {
    let volumes = crate::cfw::warp_to_target(cfg_model, store, frames, target)?;
    let rays = crate::geometry::make_rays(intrinsics, pose, h, w, near, far)?;
    let coarse = crate::field::LearnedField {
        cfg: cfg_model,
        store,
        kind: crate::field::FieldKind::Coarse,
        frames: frames.to_vec(),
        volumes: &volumes,
    };
    let fine = crate::field::LearnedField {
        cfg: cfg_model,
        store,
        kind: crate::field::FieldKind::Fine,
        frames: frames.to_vec(),
        volumes: &volumes,
    };
    Ok(render_image_eval(&rays, h, w, &coarse, &fine, cfg))
}
