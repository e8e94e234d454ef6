//! Procedural deformable scenes: Gaussian blobs whose centers move linearly
//! with the expression vector, giving an analytic density/color field to
//! verify the renderer and training pipeline against.

use super::{Scene, Splits, TrackedFrame};
use crate::error::{Error, Result};
use crate::geometry::{make_rays, Intrinsics, Pose};
use crate::renderer::composite;
use nalgebra::Vector3;
use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BlobConfig {
    pub center: [f64; 3],
    /// In [0,1] per channel.
    pub color: [f64; 3],
    pub amplitude: f64,
    pub width: f64,
    /// 3 x E matrix; the blob center moves by `motion * delta`.
    pub motion: Vec<Vec<f64>>,
}

impl BlobConfig {
    fn moved_center(&self, delta: &[f64]) -> Vector3<f64> {
        let mut c = Vector3::new(self.center[0], self.center[1], self.center[2]);
        for (row, ci) in self.motion.iter().zip(c.iter_mut()) {
            for (b, d) in row.iter().zip(delta.iter()) {
                *ci += b * d;
            }
        }
        c
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticSceneConfig {
    pub blobs: Vec<BlobConfig>,
    pub expr_dim: usize,
    pub seed: u64,
}

impl SyntheticSceneConfig {
    pub fn validate(&self) -> Result<()> {
        for (i, blob) in self.blobs.iter().enumerate() {
            if blob.amplitude <= 0.0 || blob.width <= 0.0 {
                return Err(Error::invalid(format!(
                    "blob {i}: amplitude and width must be positive"
                )));
            }
            if blob.color.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
                return Err(Error::invalid(format!("blob {i}: color outside [0,1]")));
            }
            if blob.motion.len() != 3 || blob.motion.iter().any(|r| r.len() != self.expr_dim) {
                return Err(Error::invalid(format!(
                    "blob {i}: motion matrix must be 3 x {}",
                    self.expr_dim
                )));
            }
        }
        Ok(())
    }
}

/// Analytic field: sum of Gaussian blobs displaced by `motion * delta`;
/// color is the density-weighted mix of blob colors.
pub fn synth_density_color(
    x: &Vector3<f64>,
    delta: &[f64],
    cfg: &SyntheticSceneConfig,
) -> (f64, [f64; 3]) {
    debug_assert_eq!(delta.len(), cfg.expr_dim, "delta length mismatch");
    let mut sigma = 0.0;
    let mut color = [0.0f64; 3];
    for blob in &cfg.blobs {
        let d = x - blob.moved_center(delta);
        let w = blob.amplitude * (-d.norm_squared() / (2.0 * blob.width * blob.width)).exp();
        sigma += w;
        for c in 0..3 {
            color[c] += w * blob.color[c];
        }
    }
    if sigma > 0.0 {
        for c in &mut color {
            *c /= sigma;
        }
    }
    (sigma, color)
}

/// Camera and sampling layout for generated datasets.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenerateOptions {
    pub radius: f64,
    /// Cameras sit on the sphere with elevation drawn in +- this bound
    /// (radians), azimuth over the full circle, all looking at the origin.
    pub elevation_max: f64,
    /// Focal length as a multiple of image width.
    pub focal_scale: f64,
    pub near: f64,
    pub far: f64,
    /// Per-frame expression vectors are uniform in +- this bound.
    pub delta_range: f64,
    /// Uniform quadrature samples per ray for the oracle images.
    pub oracle_samples: usize,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            radius: 4.0,
            elevation_max: 0.6,
            focal_scale: 1.5,
            near: 2.5,
            far: 5.5,
            delta_range: 1.0,
            oracle_samples: 1024,
        }
    }
}

/// Renders the analytic field by dense midpoint quadrature.
pub fn oracle_render_image(
    cfg: &SyntheticSceneConfig,
    delta: &[f64],
    pose: &Pose,
    intrinsics: &Intrinsics,
    h: usize,
    w: usize,
    near: f64,
    far: f64,
    n_samples: usize,
) -> Result<Array3<f64>> {
    let rays = make_rays(intrinsics, pose, h, w, near, far)?;
    let step = (far - near) / n_samples as f64;
    let t_values: Vec<f64> = (0..n_samples)
        .map(|i| near + (i as f64 + 0.5) * step)
        .collect();

    let rows: Vec<Vec<[f64; 3]>> = (0..h)
        .into_par_iter()
        .map(|v| {
            let mut row = Vec::with_capacity(w);
            let mut sigmas = vec![0.0f64; n_samples];
            let mut colors = vec![[0.0f64; 3]; n_samples];
            for u in 0..w {
                let ray = &rays[v * w + u];
                for (k, &t) in t_values.iter().enumerate() {
                    let x = ray.origin + ray.direction * t;
                    let (s, c) = synth_density_color(&x, delta, cfg);
                    sigmas[k] = s;
                    colors[k] = c;
                }
                let out = composite(&t_values, &sigmas, &colors, [0.0; 3], far)
                    .expect("sorted quadrature grid");
                row.push(out.rgb);
            }
            row
        })
        .collect();

    let mut image = Array3::<f64>::zeros((h, w, 3));
    for (v, row) in rows.into_iter().enumerate() {
        for (u, px) in row.into_iter().enumerate() {
            for c in 0..3 {
                image[(v, u, c)] = px[c].clamp(0.0, 1.0);
            }
        }
    }
    Ok(image)
}

/// Generates `n_frames` frames with random poses on the sphere and random
/// expression vectors; images come from dense quadrature of the analytic
/// field. Deterministic in (cfg.seed, n_frames, image_size): every frame
/// derives its own rng stream, so parallel order cannot matter.
pub fn generate_blob_dataset(
    cfg: &SyntheticSceneConfig,
    n_frames: usize,
    image_size: (usize, usize),
) -> Result<Scene> {
    generate_blob_dataset_with(cfg, n_frames, image_size, &GenerateOptions::default())
}

pub fn generate_blob_dataset_with(
    cfg: &SyntheticSceneConfig,
    n_frames: usize,
    image_size: (usize, usize),
    opts: &GenerateOptions,
) -> Result<Scene> {
    cfg.validate()?;
    if n_frames == 0 {
        return Err(Error::invalid("need at least one frame"));
    }
    let (h, w) = image_size;
    if h == 0 || w == 0 {
        return Err(Error::invalid("image size must be positive"));
    }
    let intrinsics = Intrinsics {
        fx: opts.focal_scale * w as f64,
        fy: opts.focal_scale * w as f64,
        cx: w as f64 / 2.0,
        cy: h as f64 / 2.0,
    };

    let frames: Vec<TrackedFrame> = (0..n_frames)
        .into_par_iter()
        .map(|i| {
            let mut rng = frame_rng(cfg.seed, i);
            let azimuth = rng.gen_range(0.0..std::f64::consts::TAU);
            let elevation = rng.gen_range(-opts.elevation_max..=opts.elevation_max);
            let pose = Pose::look_at_origin(azimuth, elevation, opts.radius);
            let delta: Vec<f64> = (0..cfg.expr_dim)
                .map(|_| rng.gen_range(-opts.delta_range..=opts.delta_range))
                .collect();
            let image = oracle_render_image(
                cfg,
                &delta,
                &pose,
                &intrinsics,
                h,
                w,
                opts.near,
                opts.far,
                opts.oracle_samples,
            )
            .expect("oracle render");
            TrackedFrame { image, delta, pose, intrinsics }
        })
        .collect();

    Ok(Scene {
        frames,
        near: opts.near,
        far: opts.far,
        splits: Splits::default(),
    })
}

fn frame_rng(seed: u64, frame_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame_index as u64 + 1);
    rng
}

/// Random blob scene; test and demo helper.
pub fn random_scene_config(seed: u64, n_blobs: usize, expr_dim: usize) -> SyntheticSceneConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0xb10b);
    let blobs = (0..n_blobs)
        .map(|_| {
            let dir = loop {
                let v = Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                );
                if v.norm_squared() > 1e-3 {
                    break v.normalize();
                }
            };
            let dist = rng.gen_range(0.0..0.7);
            let center = dir * dist;
            BlobConfig {
                center: [center.x, center.y, center.z],
                color: [
                    rng.gen_range(0.2..1.0),
                    rng.gen_range(0.2..1.0),
                    rng.gen_range(0.2..1.0),
                ],
                amplitude: rng.gen_range(2.0..6.0),
                width: rng.gen_range(0.25..0.45),
                motion: (0..3)
                    .map(|_| (0..expr_dim).map(|_| rng.gen_range(-0.25..0.25)).collect())
                    .collect(),
            }
        })
        .collect();
    SyntheticSceneConfig { blobs, expr_dim, seed }
}
