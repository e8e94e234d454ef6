//! Image quality metrics: PSNR and windowed SSIM.

use crate::error::{Error, Result};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

/// PSNR cap used for zero-error pairs.
pub const PSNR_CAP: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// `10 log10(peak^2 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Array3<f64>, b: &Array3<f64>, peak: f64) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!(
            "psnr shape mismatch: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let mse = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut taps = [0.0; SSIM_WINDOW];
    let mut sum = 0.0;
    for (i, tap) in taps.iter_mut().enumerate() {
        let d = (i as isize - r) as f64;
        *tap = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *tap;
    }
    for tap in &mut taps {
        *tap /= sum;
    }
    taps
}

/// Valid-mode separable Gaussian filter.
fn filter_valid(img: &Array2<f64>, taps: &[f64; SSIM_WINDOW]) -> Array2<f64> {
    let (h, w) = img.dim();
    let oh = h - SSIM_WINDOW + 1;
    let ow = w - SSIM_WINDOW + 1;
    let mut rows = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                acc += t * img[(y, x + k)];
            }
            rows[(y, x)] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                acc += t * rows[(y + k, x)];
            }
            out[(y, x)] = acc;
        }
    }
    out
}

pub fn to_grayscale(a: &Array3<f64>) -> Array2<f64> {
    let (h, w, c) = a.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        (0..c).map(|ch| a[(y, x, ch)]).sum::<f64>() / c as f64
    })
}

/// Mean windowed SSIM over an 11x11 Gaussian window, on the channel-mean
/// grayscale images, with weighted population moments.
pub fn ssim(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    ssim_with_peak(a, b, 1.0)
}

pub fn ssim_with_peak(a: &Array3<f64>, b: &Array3<f64>, peak: f64) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::invalid(format!(
            "ssim shape mismatch: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let (h, w, _) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} ssim window"
        )));
    }
    let ga = to_grayscale(a);
    let gb = to_grayscale(b);
    let taps = gaussian_taps();

    let mu_a = filter_valid(&ga, &taps);
    let mu_b = filter_valid(&gb, &taps);
    let aa = filter_valid(&(&ga * &ga), &taps);
    let bb = filter_valid(&(&gb * &gb), &taps);
    let ab = filter_valid(&(&ga * &gb), &taps);

    let c1 = (0.01 * peak) * (0.01 * peak);
    let c2 = (0.03 * peak) * (0.03 * peak);
    let mut total = 0.0;
    for ((&ma, &mb), ((&eaa, &ebb), &eab)) in mu_a
        .iter()
        .zip(mu_b.iter())
        .zip(aa.iter().zip(bb.iter()).zip(ab.iter()))
    {
        let va = eaa - ma * ma;
        let vb = ebb - mb * mb;
        let cov = eab - ma * mb;
        let score = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
            / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        total += score;
    }
    Ok(total / mu_a.len() as f64)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-frame quality rows plus their means.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_frame: Vec<FrameMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl MetricReport {
    pub fn from_rows(per_frame: Vec<FrameMetrics>) -> Self {
        let n = per_frame.len().max(1) as f64;
        let mean_psnr = per_frame.iter().map(|r| r.psnr).sum::<f64>() / n;
        let mean_ssim = per_frame.iter().map(|r| r.ssim).sum::<f64>() / n;
        MetricReport { per_frame, mean_psnr, mean_ssim }
    }

    pub fn write_json(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((h, w, 3), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn psnr_hand_cases() {
        let a = random_image(8, 8, 0);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);

        let zeros = Array3::<f64>::zeros((8, 8, 3));
        let tenth = Array3::<f64>::from_elem((8, 8, 3), 0.1);
        let got = psnr(&zeros, &tenth, 1.0).unwrap();
        assert!((got - 20.0).abs() < 1e-12, "{got}");

        let ones = Array3::<f64>::from_elem((8, 8, 3), 1.0);
        assert_eq!(psnr(&zeros, &ones, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn psnr_is_symmetric_and_checks_shapes() {
        let a = random_image(9, 7, 1);
        let b = random_image(9, 7, 2);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        let c = random_image(7, 9, 3);
        assert!(psnr(&a, &c, 1.0).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let base = random_image(16, 16, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise: Vec<f64> = (0..base.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.03, 0.09, 0.2, 0.4] {
            let mut noisy = base.clone();
            for (v, n) in noisy.iter_mut().zip(noise.iter()) {
                *v = (*v + amp * n).clamp(0.0, 1.0);
            }
            let p = psnr(&base, &noisy, 1.0).unwrap();
            assert!(p < last, "psnr must strictly decrease: {p} !< {last}");
            last = p;
        }
    }

    #[test]
    fn ssim_identical_is_one() {
        let a = random_image(16, 20, 6);
        let s = ssim(&a, &a).unwrap();
        assert!((s - 1.0).abs() < 1e-12, "{s}");
    }

    #[test]
    fn ssim_constant_pair_is_luminance_only() {
        let (v1, v2) = (0.3, 0.7);
        let a = Array3::<f64>::from_elem((16, 16, 3), v1);
        let b = Array3::<f64>::from_elem((16, 16, 3), v2);
        let c1 = 0.01f64 * 0.01;
        let expect = (2.0 * v1 * v2 + c1) / (v1 * v1 + v2 * v2 + c1);
        let got = ssim(&a, &b).unwrap();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn ssim_is_symmetric_and_needs_window() {
        let a = random_image(14, 14, 7);
        let b = random_image(14, 14, 8);
        let s1 = ssim(&a, &b).unwrap();
        let s2 = ssim(&b, &a).unwrap();
        assert!((s1 - s2).abs() < 1e-12);
        assert!(s1 <= 1.0);
        let tiny = random_image(10, 14, 9);
        assert!(ssim(&tiny, &tiny).is_err());
    }

    #[test]
    fn report_means() {
        let report = MetricReport::from_rows(vec![
            FrameMetrics { frame: 0, psnr: 20.0, ssim: 0.5 },
            FrameMetrics { frame: 1, psnr: 40.0, ssim: 0.9 },
        ]);
        assert_eq!(report.mean_psnr, 30.0);
        assert!((report.mean_ssim - 0.7).abs() < 1e-15);
    }
}
