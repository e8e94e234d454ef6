//! Few-shot reconstruction of a deformable radiance field from
//! expression-inconsistent input frames.
//!
//! The pipeline encodes each input frame into a 2-d feature pyramid, warps
//! the features toward a target expression with a flow field modulated by a
//! motion descriptor, and evaluates a pixel-aligned conditional radiance
//! field rendered by hierarchical volumetric quadrature.

pub mod cfw;
pub mod config;
pub mod dataio;
pub mod diff;
pub mod error;
pub mod field;
pub mod geometry;
pub mod metrics;
pub mod params;
pub mod renderer;
pub mod training;

pub use config::{ModelConfig, RenderConfig, TrainConfig};
pub use error::Error;

// geometry backbone, re-exported so downstream crates stay version-aligned
pub use nalgebra;
pub use ndarray;
