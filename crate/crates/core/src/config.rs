//! Model, render and training configuration.

use serde::{Deserialize, Serialize};

/// How expression vectors are mapped to latent codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SemanticMode {
    /// Latent code is the raw expression vector (`latent_dim == expr_dim`).
    /// Test fixture; makes motion descriptors directly inspectable.
    Identity,
    /// Two-layer MLP mapping.
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Expression dimension E, a dataset property.
    pub expr_dim: usize,
    /// Latent code dimension for motion descriptors.
    pub latent_dim: usize,
    pub semantic_mode: SemanticMode,
    pub semantic_hidden: usize,
    /// Encoder pyramid channels, one per stage at scales 1/2, 1/4, ...
    pub encoder_channels: Vec<usize>,
    /// Positional encoding frequency counts.
    pub pos_freqs: usize,
    pub dir_freqs: usize,
    /// Per-view feature MLP.
    pub view_mlp_width: usize,
    pub view_mlp_depth: usize,
    /// Field trunk.
    pub trunk_width: usize,
    pub trunk_depth: usize,
    /// Hidden width of the direction-conditioned color head.
    pub color_hidden: usize,
    /// Parameter init seed.
    pub seed: u64,
}

impl ModelConfig {
    pub fn with_expr_dim(expr_dim: usize) -> Self {
        ModelConfig {
            expr_dim,
            latent_dim: 64,
            semantic_mode: SemanticMode::Mlp,
            semantic_hidden: 64,
            encoder_channels: vec![16, 32, 64, 128],
            pos_freqs: 6,
            dir_freqs: 4,
            view_mlp_width: 128,
            view_mlp_depth: 2,
            trunk_width: 128,
            trunk_depth: 6,
            color_hidden: 128,
            seed: 0,
        }
    }

    /// Small configuration for tests and quick desk-scale runs.
    pub fn compact(expr_dim: usize) -> Self {
        ModelConfig {
            expr_dim,
            latent_dim: 16,
            semantic_mode: SemanticMode::Mlp,
            semantic_hidden: 32,
            encoder_channels: vec![8, 16, 32, 64],
            pos_freqs: 6,
            dir_freqs: 4,
            view_mlp_width: 64,
            view_mlp_depth: 1,
            trunk_width: 64,
            trunk_depth: 4,
            color_hidden: 32,
            seed: 0,
        }
    }

    /// Total pixel-aligned feature length, summed over pyramid levels.
    pub fn feature_len(&self) -> usize {
        self.encoder_channels.iter().sum()
    }

    /// Encoded position length: d * (2 * freqs + 1) with raw input included.
    pub fn pos_enc_len(&self) -> usize {
        3 * (2 * self.pos_freqs + 1)
    }

    pub fn dir_enc_len(&self) -> usize {
        3 * (2 * self.dir_freqs + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub n_coarse: usize,
    pub n_fine: usize,
    pub jitter: bool,
    pub background: [f64; 3],
    /// Rays per render chunk; results are chunk-size invariant.
    pub chunk_size: usize,
    /// Seed for jittered sampling, folded with each ray's index.
    pub seed: u64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            n_coarse: 64,
            n_fine: 64,
            jitter: false,
            background: [0.0, 0.0, 0.0],
            chunk_size: 1024,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub m_min: usize,
    pub m_max: usize,
    pub rays_per_step: usize,
    pub iterations: u64,
    pub seed: u64,
    /// Loss weights for the coarse and fine renderings.
    pub coarse_fine_loss_weights: (f64, f64),
    /// When set, every tuple uses exactly these input frame indices.
    pub fixed_inputs: Option<Vec<usize>>,
    pub n_coarse: usize,
    pub n_fine: usize,
    /// Ray chunks processed in parallel within one step; results are
    /// schedule-invariant.
    pub chunks_per_step: usize,
    /// Assert every parameter and gradient stays finite each step.
    pub check_finite: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            m_min: 1,
            m_max: 12,
            rays_per_step: 1024,
            iterations: 1000,
            seed: 0,
            coarse_fine_loss_weights: (1.0, 1.0),
            fixed_inputs: None,
            n_coarse: 64,
            n_fine: 64,
            chunks_per_step: 2,
            check_finite: true,
        }
    }
}
