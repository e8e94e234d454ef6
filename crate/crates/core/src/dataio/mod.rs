//! Tracked-frame datasets: manifest schema, image conversion, and synthetic
//! scenes with an analytic ground-truth radiance field.

pub mod synth;

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, Pose};
use nalgebra::{Matrix3, Vector3};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Rotation orthonormality tolerance for manifest validation.
pub const ROTATION_TOL: f64 = 1e-6;

/// One input observation: image, expression vector, camera pose, intrinsics.
#[derive(Clone, Debug)]
pub struct TrackedFrame {
    /// H x W x 3, values in [0,1].
    pub image: Array3<f64>,
    pub delta: Vec<f64>,
    pub pose: Pose,
    pub intrinsics: Intrinsics,
}

impl TrackedFrame {
    pub fn height(&self) -> usize {
        self.image.dim().0
    }

    pub fn width(&self) -> usize {
        self.image.dim().1
    }

    pub fn validate(&self, index: usize) -> Result<()> {
        if self.pose.orthonormality_error() > ROTATION_TOL {
            return Err(Error::manifest(format!(
                "frame {index}: rotation is not orthonormal"
            )));
        }
        if self.intrinsics.fx <= 0.0 || self.intrinsics.fy <= 0.0 {
            return Err(Error::manifest(format!(
                "frame {index}: focal lengths must be positive"
            )));
        }
        if self.image.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::manifest(format!(
                "frame {index}: image values outside [0,1]"
            )));
        }
        Ok(())
    }
}

/// On-disk frame record; image path is relative to the manifest file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FrameRecord {
    pub image: String,
    pub delta: Vec<f64>,
    /// Row-major 3x3 camera-to-world rotation.
    #[serde(rename = "pose_R")]
    pub pose_r: Vec<f64>,
    pub pose_t: [f64; 3],
    /// (fx, fy, cx, cy) in pixels.
    pub intrinsics: [f64; 4],
}

impl FrameRecord {
    pub fn pose(&self) -> Pose {
        let r = &self.pose_r;
        Pose {
            rotation: Matrix3::new(r[0], r[1], r[2], r[3], r[4], r[5], r[6], r[7], r[8]),
            translation: Vector3::new(self.pose_t[0], self.pose_t[1], self.pose_t[2]),
        }
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            fx: self.intrinsics[0],
            fy: self.intrinsics[1],
            cx: self.intrinsics[2],
            cy: self.intrinsics[3],
        }
    }

    pub fn from_parts(image: String, delta: Vec<f64>, pose: &Pose, k: &Intrinsics) -> Self {
        let r = &pose.rotation;
        FrameRecord {
            image,
            delta,
            pose_r: vec![
                r[(0, 0)],
                r[(0, 1)],
                r[(0, 2)],
                r[(1, 0)],
                r[(1, 1)],
                r[(1, 2)],
                r[(2, 0)],
                r[(2, 1)],
                r[(2, 2)],
            ],
            pose_t: [pose.translation.x, pose.translation.y, pose.translation.z],
            intrinsics: [k.fx, k.fy, k.cx, k.cy],
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SceneManifest {
    pub frames: Vec<FrameRecord>,
    pub near: f64,
    pub far: f64,
    pub splits: Splits,
}

impl SceneManifest {
    /// Expression dimension, inferred from the first frame.
    pub fn expr_dim(&self) -> usize {
        self.frames.first().map(|f| f.delta.len()).unwrap_or(0)
    }

    pub fn validate(&self, base_dir: Option<&Path>) -> Result<()> {
        if !(self.near > 0.0 && self.far > self.near) {
            return Err(Error::manifest("invalid depth bounds: require far > near > 0"));
        }
        if self.frames.is_empty() {
            return Err(Error::manifest("manifest has no frames"));
        }
        let e = self.frames[0].delta.len();
        for (i, frame) in self.frames.iter().enumerate() {
            if frame.delta.len() != e {
                return Err(Error::manifest(format!(
                    "frame {i}: delta length {} does not match expression dimension {e}",
                    frame.delta.len()
                )));
            }
            if frame.pose_r.len() != 9 {
                return Err(Error::manifest(format!("frame {i}: pose_R must have 9 entries")));
            }
            if frame.pose().orthonormality_error() > ROTATION_TOL {
                return Err(Error::manifest(format!(
                    "frame {i}: rotation is not orthonormal"
                )));
            }
            if frame.intrinsics[0] <= 0.0 || frame.intrinsics[1] <= 0.0 {
                return Err(Error::manifest(format!(
                    "frame {i}: focal lengths must be positive"
                )));
            }
            if let Some(dir) = base_dir {
                let path = dir.join(&frame.image);
                if !path.is_file() {
                    return Err(Error::manifest(format!(
                        "frame {i}: image file {} does not exist",
                        path.display()
                    )));
                }
            }
        }
        for (name, list) in [("train", &self.splits.train), ("val", &self.splits.val)] {
            if let Some(&bad) = list.iter().find(|&&i| i >= self.frames.len()) {
                return Err(Error::manifest(format!(
                    "{name} split references frame {bad}, but only {} frames exist",
                    self.frames.len()
                )));
            }
        }
        Ok(())
    }
}

/// Parses and validates a manifest file.
pub fn load_manifest(path: &Path) -> Result<SceneManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::manifest(format!("cannot read {}: {e}", path.display()))
    })?;
    let manifest: SceneManifest = serde_json::from_str(&text)
        .map_err(|e| Error::manifest(format!("schema violation: {e}")))?;
    manifest.validate(path.parent())?;
    Ok(manifest)
}

pub fn save_manifest(manifest: &SceneManifest, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Fully loaded scene: frames with decoded images.
#[derive(Clone, Debug)]
pub struct Scene {
    pub frames: Vec<TrackedFrame>,
    pub near: f64,
    pub far: f64,
    pub splits: Splits,
}

impl Scene {
    pub fn expr_dim(&self) -> usize {
        self.frames.first().map(|f| f.delta.len()).unwrap_or(0)
    }

    pub fn frame(&self, index: usize) -> Result<&TrackedFrame> {
        self.frames.get(index).ok_or(Error::FrameNotFound { index })
    }
}

/// Loads the manifest at `path` and decodes every referenced image.
pub fn load_scene(path: &Path) -> Result<Scene> {
    let manifest = load_manifest(path)?;
    let dir = path.parent().map(PathBuf::from).unwrap_or_default();
    let mut frames = Vec::with_capacity(manifest.frames.len());
    for (i, rec) in manifest.frames.iter().enumerate() {
        let image = load_image_png(&dir.join(&rec.image))?;
        let frame = TrackedFrame {
            image,
            delta: rec.delta.clone(),
            pose: rec.pose(),
            intrinsics: rec.intrinsics(),
        };
        frame.validate(i)?;
        frames.push(frame);
    }
    Ok(Scene {
        frames,
        near: manifest.near,
        far: manifest.far,
        splits: manifest.splits,
    })
}

/// Writes an in-memory scene as PNGs plus `scene.json`; returns the manifest.
pub fn write_scene(scene: &Scene, dir: &Path) -> Result<SceneManifest> {
    std::fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(scene.frames.len());
    for (i, frame) in scene.frames.iter().enumerate() {
        let name = format!("frame_{i:04}.png");
        save_image_png(&frame.image, &dir.join(&name))?;
        records.push(FrameRecord::from_parts(
            name,
            frame.delta.clone(),
            &frame.pose,
            &frame.intrinsics,
        ));
    }
    let manifest = SceneManifest {
        frames: records,
        near: scene.near,
        far: scene.far,
        splits: scene.splits.clone(),
    };
    save_manifest(&manifest, &dir.join("scene.json"))?;
    Ok(manifest)
}

/// 8-bit PNG -> H x W x 3 reals in [0,1].
pub fn load_image_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f64>::zeros((h as usize, w as usize, 3));
    for (x, y, pix) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(y as usize, x as usize, c)] = pix.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

pub fn save_image_png(image: &Array3<f64>, path: &Path) -> Result<()> {
    let (h, w, c) = image.dim();
    assert_eq!(c, 3, "expected an rgb image");
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                quantize8(image[(y, x, 0)]),
                quantize8(image[(y, x, 1)]),
                quantize8(image[(y, x, 2)]),
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path)?;
    Ok(())
}

/// Depth map -> 16-bit PNG scaled onto [near, far], plus a JSON sidecar
/// recording the scaling bounds.
pub fn save_depth_png(depth: &Array2<f64>, near: f64, far: f64, path: &Path) -> Result<()> {
    let (h, w) = depth.dim();
    let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
    let span = (far - near).max(f64::MIN_POSITIVE);
    for y in 0..h {
        for x in 0..w {
            let t = ((depth[(y, x)] - near) / span).clamp(0.0, 1.0);
            img.put_pixel(x as u32, y as u32, image::Luma([(t * 65535.0).round() as u16]));
        }
    }
    img.save(path)?;
    let sidecar = path.with_extension("json");
    let meta = serde_json::json!({ "near": near, "far": far });
    std::fs::write(sidecar, serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_manifest() -> SceneManifest {
        let pose = Pose::look_at_origin(0.3, 0.2, 4.0);
        let k = Intrinsics { fx: 96.0, fy: 96.0, cx: 32.0, cy: 32.0 };
        let frames = (0..3)
            .map(|i| {
                FrameRecord::from_parts(
                    format!("frame_{i:04}.png"),
                    vec![0.1 * i as f64, -0.2],
                    &pose,
                    &k,
                )
            })
            .collect();
        SceneManifest {
            frames,
            near: 2.5,
            far: 5.5,
            splits: Splits { train: vec![0, 1], val: vec![2] },
        }
    }

    #[test]
    fn valid_manifest_round_trips_through_json() {
        let manifest = tiny_manifest();
        let text = serde_json::to_string(&manifest).unwrap();
        let back: SceneManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back.frames.len(), 3);
        assert_eq!(back.expr_dim(), 2);
        for (a, b) in manifest.frames.iter().zip(back.frames.iter()) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.delta, b.delta);
            assert_eq!(a.pose_r, b.pose_r);
            assert_eq!(a.pose_t, b.pose_t);
            assert_eq!(a.intrinsics, b.intrinsics);
        }
        assert_eq!(manifest.near, back.near);
        assert_eq!(manifest.far, back.far);
        assert_eq!(manifest.splits.train, back.splits.train);
    }

    #[test]
    fn depth_bound_violation_is_reported() {
        let mut manifest = tiny_manifest();
        manifest.far = manifest.near;
        let err = manifest.validate(None).unwrap_err();
        assert!(err.to_string().contains("invalid depth bounds"), "{err}");
    }

    #[test]
    fn mismatched_delta_names_the_frame() {
        let mut manifest = tiny_manifest();
        manifest.frames[2].delta = vec![0.4];
        let err = manifest.validate(None).unwrap_err();
        assert!(err.to_string().contains("frame 2"), "{err}");
    }

    #[test]
    fn non_orthonormal_rotation_is_rejected() {
        let mut manifest = tiny_manifest();
        manifest.frames[1].pose_r[0] += 0.01;
        let err = manifest.validate(None).unwrap_err();
        assert!(err.to_string().contains("frame 1"), "{err}");
        assert!(err.to_string().contains("orthonormal"), "{err}");
    }

    #[test]
    fn split_bounds_are_checked() {
        let mut manifest = tiny_manifest();
        manifest.splits.val = vec![9];
        assert!(manifest.validate(None).is_err());
    }
}
