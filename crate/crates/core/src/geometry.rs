//! Camera model, ray generation, projection, positional encoding and the
//! two-stage sampling of points along rays.

use crate::error::{Error, Result};
use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Depth below which a camera-frame point counts as behind the camera.
pub const BEHIND_CAMERA_EPS: f64 = 1e-6;

/// Uniform floor added to importance-sampling weights.
pub const WEIGHT_FLOOR: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn validate(&self) -> Result<()> {
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        Ok(())
    }
}

/// Rigid camera-to-world transform. The camera looks along its local +z axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Checks RᵀR = I within `tol` (per entry).
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.rotation.transpose() * self.rotation;
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((gram[(i, j)] - target).abs());
            }
        }
        worst
    }

    pub fn camera_center(&self) -> Vector3<f64> {
        self.translation
    }

    /// World point -> camera frame.
    pub fn world_to_camera(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (x - self.translation)
    }

    /// Camera-frame direction -> world frame.
    pub fn direction_to_world(&self, d: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * d
    }

    /// Pose on a sphere of radius `r` looking at the origin, parameterized by
    /// azimuth/elevation (radians). Up is +y except at the poles.
    pub fn look_at_origin(azimuth: f64, elevation: f64, radius: f64) -> Self {
        let center = Vector3::new(
            radius * elevation.cos() * azimuth.sin(),
            radius * elevation.sin(),
            -radius * elevation.cos() * azimuth.cos(),
        );
        let forward = (-center).normalize();
        let up_hint = if forward.y.abs() > 0.999 {
            Vector3::new(0.0, 0.0, 1.0)
        } else {
            Vector3::new(0.0, 1.0, 0.0)
        };
        let right = up_hint.cross(&forward).normalize();
        let up = forward.cross(&right);
        // columns: camera x (right), y (up), z (forward)
        let rotation = Matrix3::from_columns(&[right, up, forward]);
        Pose {
            rotation,
            translation: center,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Ray {
    pub origin: Vector3<f64>,
    /// Unit length.
    pub direction: Vector3<f64>,
    pub near: f64,
    pub far: f64,
}

/// Sorted sample depths along a ray plus the bin edges they were drawn from.
#[derive(Clone, Debug)]
pub struct SampleBins {
    pub t_values: Vec<f64>,
    pub bin_edges: Vec<f64>,
}

impl SampleBins {
    pub fn len(&self) -> usize {
        self.t_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_values.is_empty()
    }
}

/// One ray per pixel center (u+0.5, v+0.5), row-major over (v, u).
pub fn make_rays(
    intrinsics: &Intrinsics,
    pose: &Pose,
    h: usize,
    w: usize,
    near: f64,
    far: f64,
) -> Result<Vec<Ray>> {
    if h == 0 || w == 0 {
        return Err(Error::invalid("image dimensions must be positive"));
    }
    intrinsics.validate()?;
    let mut rays = Vec::with_capacity(h * w);
    for v in 0..h {
        for u in 0..w {
            rays.push(pixel_ray(
                intrinsics,
                pose,
                u as f64 + 0.5,
                v as f64 + 0.5,
                near,
                far,
            ));
        }
    }
    Ok(rays)
}

/// Ray through an arbitrary continuous pixel position.
pub fn pixel_ray(
    intrinsics: &Intrinsics,
    pose: &Pose,
    u: f64,
    v: f64,
    near: f64,
    far: f64,
) -> Ray {
    let dir_cam = Vector3::new(
        (u - intrinsics.cx) / intrinsics.fx,
        (v - intrinsics.cy) / intrinsics.fy,
        1.0,
    );
    let direction = pose.direction_to_world(&dir_cam).normalize();
    Ray {
        origin: pose.camera_center(),
        direction,
        near,
        far,
    }
}

/// Pixel coordinates and camera-frame depth of a world point, or
/// `None` when the point sits at or behind the camera plane.
pub fn project_point(
    x: &Vector3<f64>,
    intrinsics: &Intrinsics,
    pose: &Pose,
) -> Option<(f64, f64, f64)> {
    let pc = pose.world_to_camera(x);
    if pc.z <= BEHIND_CAMERA_EPS {
        return None;
    }
    let u = intrinsics.fx * pc.x / pc.z + intrinsics.cx;
    let v = intrinsics.fy * pc.y / pc.z + intrinsics.cy;
    Some((u, v, pc.z))
}

/// Fourier features: raw input (optional) followed, per component, by
/// sin(2^k pi x), cos(2^k pi x) for k = 0..n_freqs.
pub fn positional_encode(x: &[f64], n_freqs: usize, include_input: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len() * (2 * n_freqs + usize::from(include_input)));
    if include_input {
        out.extend_from_slice(x);
    }
    for &xi in x {
        for k in 0..n_freqs {
            let arg = (1u64 << k) as f64 * std::f64::consts::PI * xi;
            out.push(arg.sin());
            out.push(arg.cos());
        }
    }
    out
}

/// Splits [near, far] into `n` equal bins; midpoints when `jitter` is off,
/// one uniform draw per bin otherwise.
pub fn stratified_sample<R: Rng>(
    near: f64,
    far: f64,
    n: usize,
    jitter: bool,
    rng: &mut R,
) -> SampleBins {
    assert!(n >= 1, "need at least one sample");
    assert!(far > near, "far must exceed near");
    let step = (far - near) / n as f64;
    let bin_edges: Vec<f64> = (0..=n).map(|i| near + step * i as f64).collect();
    let t_values: Vec<f64> = (0..n)
        .map(|i| {
            let f = if jitter { rng.gen_range(0.0..1.0) } else { 0.5 };
            bin_edges[i] + f * step
        })
        .collect();
    SampleBins { t_values, bin_edges }
}

/// Inverse-CDF sampling over the piecewise-constant density proportional to
/// `weights` (plus a uniform floor) on the given bins. With `jitter` off the
/// CDF is probed at evenly spaced quantiles (k+0.5)/n_fine.
pub fn importance_sample<R: Rng>(
    bins: &SampleBins,
    weights: &[f64],
    n_fine: usize,
    jitter: bool,
    rng: &mut R,
) -> SampleBins {
    let n = bins.bin_edges.len() - 1;
    assert_eq!(weights.len(), n, "one weight per bin");
    debug_assert!(weights.iter().all(|&w| w >= 0.0), "negative weight");

    let padded: Vec<f64> = weights.iter().map(|&w| w + WEIGHT_FLOOR).collect();
    let total: f64 = padded.iter().sum();
    let mut cdf = Vec::with_capacity(n + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for &p in &padded {
        acc += p;
        cdf.push(acc / total);
    }
    *cdf.last_mut().unwrap() = 1.0;

    let near = bins.bin_edges[0];
    let far = *bins.bin_edges.last().unwrap();
    let mut t_values = Vec::with_capacity(n_fine);
    for k in 0..n_fine {
        let f = if jitter { rng.gen_range(0.0..1.0) } else { 0.5 };
        let u = ((k as f64 + f) / n_fine as f64).min(1.0 - f64::EPSILON);
        // first bin whose upper cdf exceeds u
        let mut idx = cdf.partition_point(|&c| c <= u);
        idx = idx.clamp(1, n);
        let (c0, c1) = (cdf[idx - 1], cdf[idx]);
        let span = (c1 - c0).max(f64::MIN_POSITIVE);
        let frac = (u - c0) / span;
        let (e0, e1) = (bins.bin_edges[idx - 1], bins.bin_edges[idx]);
        t_values.push((e0 + frac * (e1 - e0)).clamp(near, far));
    }
    t_values.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut bin_edges = Vec::with_capacity(n_fine + 1);
    bin_edges.push(near);
    for pair in t_values.windows(2) {
        bin_edges.push(0.5 * (pair[0] + pair[1]));
    }
    bin_edges.push(far);
    SampleBins { t_values, bin_edges }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const K: Intrinsics = Intrinsics {
        fx: 100.0,
        fy: 100.0,
        cx: 32.0,
        cy: 32.0,
    };

    #[test]
    fn ray_through_principal_point_is_optical_axis() {
        // pixel center (32, 32) = principal point at pixel index (31.5, 31.5);
        // probe the continuous position directly
        let ray = pixel_ray(&K, &Pose::identity(), 32.0, 32.0, 0.1, 10.0);
        assert!((ray.direction - Vector3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
        assert_eq!(ray.origin, Vector3::zeros());
    }

    #[test]
    fn ray_count_and_corner_direction() {
        let rays = make_rays(&K, &Pose::identity(), 64, 64, 0.1, 10.0).unwrap();
        assert_eq!(rays.len(), 64 * 64);
        // pixel index (0,0): camera-frame direction prop. to (-31.5/100, -31.5/100, 1)
        let expect = Vector3::new(-0.315, -0.315, 1.0).normalize();
        assert!((rays[0].direction - expect).norm() < 1e-12);
        for ray in rays.iter().step_by(977) {
            assert!((ray.direction.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn make_rays_rejects_empty_images() {
        assert!(make_rays(&K, &Pose::identity(), 0, 64, 0.1, 10.0).is_err());
        assert!(make_rays(&K, &Pose::identity(), 64, 0, 0.1, 10.0).is_err());
    }

    #[test]
    fn projection_hand_cases() {
        let pose = Pose::identity();
        let (u, v, z) = project_point(&Vector3::new(0.0, 0.0, 2.0), &K, &pose).unwrap();
        assert_eq!((u, v, z), (32.0, 32.0, 2.0));

        let (u, v, z) = project_point(&Vector3::new(1.0, 0.0, 2.0), &K, &pose).unwrap();
        assert_eq!((u, v, z), (82.0, 32.0, 2.0));

        assert!(project_point(&Vector3::new(0.0, 0.0, -1.0), &K, &pose).is_none());
    }

    #[test]
    fn ray_projection_round_trip() {
        let pose = Pose::look_at_origin(0.7, 0.3, 4.0);
        let ray = pixel_ray(&K, &pose, 12.5, 40.5, 1.0, 8.0);
        for t in [1.0, 2.5, 7.9] {
            let x = ray.origin + ray.direction * t;
            let (u, v, _) = project_point(&x, &K, &pose).unwrap();
            assert!((u - 12.5).abs() < 1e-4, "u={u}");
            assert!((v - 40.5).abs() < 1e-4, "v={v}");
        }
    }

    #[test]
    fn look_at_origin_is_orthonormal_and_points_inward() {
        for (az, el) in [(0.0, 0.0), (1.2, 0.5), (-2.0, -0.9), (3.14, 1.4)] {
            let pose = Pose::look_at_origin(az, el, 4.0);
            assert!(pose.orthonormality_error() < 1e-12);
            let fwd = pose.direction_to_world(&Vector3::new(0.0, 0.0, 1.0));
            let to_origin = (-pose.translation).normalize();
            assert!((fwd - to_origin).norm() < 1e-9);
        }
    }

    #[test]
    fn positional_encode_hand_cases() {
        assert_eq!(positional_encode(&[0.0], 2, true), vec![0.0, 0.0, 1.0, 0.0, 1.0]);
        let enc = positional_encode(&[1.0], 1, false);
        assert!((enc[0] - std::f64::consts::PI.sin()).abs() < 1e-15);
        assert!((enc[1] + 1.0).abs() < 1e-12);
        let enc = positional_encode(&[0.5], 1, false);
        assert!((enc[0] - 1.0).abs() < 1e-12);
        assert!(enc[1].abs() < 1e-12);
    }

    #[test]
    fn positional_encode_length_formula() {
        for d in 1..4usize {
            for f in 0..8usize {
                for inc in [true, false] {
                    let x = vec![0.3; d];
                    assert_eq!(
                        positional_encode(&x, f, inc).len(),
                        d * (2 * f + usize::from(inc))
                    );
                }
            }
        }
    }

    #[test]
    fn stratified_midpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bins = stratified_sample(2.0, 6.0, 4, false, &mut rng);
        assert_eq!(bins.t_values, vec![2.5, 3.5, 4.5, 5.5]);
        let one = stratified_sample(2.0, 6.0, 1, false, &mut rng);
        assert_eq!(one.t_values, vec![4.0]);
    }

    #[test]
    fn stratified_jitter_stays_in_bins() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let bins = stratified_sample(1.0, 3.0, 100, true, &mut rng);
            for (i, &t) in bins.t_values.iter().enumerate() {
                assert!(t >= bins.bin_edges[i] && t <= bins.bin_edges[i + 1]);
            }
        }
    }

    #[test]
    fn importance_one_hot_concentrates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let base = stratified_sample(0.0, 5.0, 5, false, &mut rng);
        let weights = [0.0, 0.0, 0.0, 1.0, 0.0];
        let fine = importance_sample(&base, &weights, 32, false, &mut rng);
        for &t in &fine.t_values {
            assert!((3.0..=4.0).contains(&t), "t={t} escaped the hot bin");
        }
    }

    #[test]
    fn importance_equal_weights_evenly_spaced() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = stratified_sample(2.0, 6.0, 4, false, &mut rng);
        let fine = importance_sample(&base, &[1.0; 4], 8, false, &mut rng);
        // inverse of a linear CDF: quantiles (k+0.5)/8 over [2,6]
        for (k, &t) in fine.t_values.iter().enumerate() {
            let expect = 2.0 + 4.0 * (k as f64 + 0.5) / 8.0;
            assert!((t - expect).abs() < 1e-12, "k={k} t={t} expect={expect}");
        }
    }

    #[test]
    fn importance_zero_weights_fall_back_to_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = stratified_sample(2.0, 6.0, 4, false, &mut rng);
        let zero = importance_sample(&base, &[0.0; 4], 8, false, &mut rng);
        let flat = importance_sample(&base, &[1.0; 4], 8, false, &mut rng);
        for (a, b) in zero.t_values.iter().zip(flat.t_values.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn importance_output_sorted_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let base = stratified_sample(1.0, 9.0, 16, true, &mut rng);
            let weights: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..2.0)).collect();
            let fine = importance_sample(&base, &weights, 33, true, &mut rng);
            for pair in fine.t_values.windows(2) {
                assert!(pair[0] <= pair[1]);
            }
            for &t in &fine.t_values {
                assert!((1.0..=9.0).contains(&t));
            }
        }
    }
}
