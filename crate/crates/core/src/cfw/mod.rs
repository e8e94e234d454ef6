//! Conditional feature warping: encode each frame into a feature pyramid,
//! build a motion descriptor from source and target expression vectors, and
//! warp the features toward the target expression with a flow field whose
//! convolutions are all modulated by adaptive instance normalization.

use crate::config::{ModelConfig, SemanticMode};
use crate::dataio::TrackedFrame;
use crate::diff::{Arr, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{he_init, zeros, Bound, ParamStore};
use ndarray::{Array2, Array3, IxDyn};
use rand_chacha::ChaCha8Rng;

pub const ADAIN_EPS: f64 = 1e-5;

/// Images are padded up to multiples of this before encoding.
pub const PAD_MULTIPLE: usize = 32;

/// Minimum input image side for the encoder.
pub const MIN_IMAGE_SIDE: usize = 32;

/// Multi-scale feature pyramid of one frame.
///
/// Level coordinates are padded-image pixel coordinates times the level
/// scale; [`FeatureVolume::sample`] maps unpadded image pixels to cells.
#[derive(Clone, Debug)]
pub struct FeatureVolume {
    pub levels: Vec<FeatureLevel>,
    /// (left, top) padding applied to the image before encoding.
    pub pad: (usize, usize),
    /// Unpadded image size (h, w).
    pub image_hw: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct FeatureLevel {
    /// C x H_l x W_l.
    pub data: Array3<f64>,
    /// Scale relative to the (padded) input image, in (0, 1].
    pub scale: f64,
}

impl FeatureVolume {
    /// Bilinearly samples every level at image pixel position (u, v) and
    /// concatenates the per-level features.
    pub fn sample(&self, u: f64, v: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.levels.iter().map(|l| l.data.dim().0).sum());
        for level in &self.levels {
            let (x, y) = self.level_cell(level, u, v);
            for c in 0..level.data.dim().0 {
                out.push(crate::diff::sample::bilinear_sample_plane(
                    &level.data.index_axis(ndarray::Axis(0), c),
                    x,
                    y,
                ));
            }
        }
        out
    }

    /// Image pixel (u, v) -> cell-space position on `level`.
    pub fn level_cell(&self, level: &FeatureLevel, u: f64, v: f64) -> (f64, f64) {
        (
            (u + self.pad.0 as f64) * level.scale - 0.5,
            (v + self.pad.1 as f64) * level.scale - 0.5,
        )
    }

    pub fn feature_len(&self) -> usize {
        self.levels.iter().map(|l| l.data.dim().0).sum()
    }
}

/// Per-level 2-channel (du, dv) offsets in level-cell units.
#[derive(Clone, Debug)]
pub struct FlowField {
    pub levels: Vec<Array3<f64>>,
}

/// Target expression for warping: a single vector, or a window of driver
/// frames pooled into one code.
#[derive(Clone, Debug)]
pub enum TargetSpec {
    Delta(Vec<f64>),
    Window {
        sequence: Vec<Vec<f64>>,
        center: usize,
        radius: usize,
    },
}

/// Feature pyramid bound to a tape (levels are tape vars).
pub struct TapeVolume {
    pub levels: Vec<Var>,
    pub scales: Vec<f64>,
    pub pad: (usize, usize),
    pub image_hw: (usize, usize),
}

impl TapeVolume {
    pub fn constant(tape: &mut Tape, vol: &FeatureVolume) -> Self {
        TapeVolume {
            levels: vol
                .levels
                .iter()
                .map(|l| tape.constant(l.data.clone().into_dyn()))
                .collect(),
            scales: vol.levels.iter().map(|l| l.scale).collect(),
            pad: vol.pad,
            image_hw: vol.image_hw,
        }
    }

    pub fn extract(&self, tape: &Tape) -> FeatureVolume {
        FeatureVolume {
            levels: self
                .levels
                .iter()
                .zip(self.scales.iter())
                .map(|(&v, &scale)| FeatureLevel {
                    data: tape
                        .value(v)
                        .clone()
                        .into_dimensionality::<ndarray::Ix3>()
                        .expect("level is 3-d"),
                    scale,
                })
                .collect(),
            pad: self.pad,
            image_hw: self.image_hw,
        }
    }

    /// Image pixel (u, v) -> cell-space position on level `l`.
    pub fn level_cell(&self, l: usize, u: f64, v: f64) -> (f64, f64) {
        (
            (u + self.pad.0 as f64) * self.scales[l] - 0.5,
            (v + self.pad.1 as f64) * self.scales[l] - 0.5,
        )
    }
}

/// Registers all warping-module parameters under the `cfw.` prefix.
pub fn init_params(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let stages = &cfg.encoder_channels;
    let mut in_ch = 3;
    for (i, &ch) in stages.iter().enumerate() {
        store.insert(
            format!("cfw.enc.stage{i}.down.w"),
            he_init(rng, &[ch, in_ch, 3, 3], in_ch * 9),
        );
        store.insert(format!("cfw.enc.stage{i}.down.b"), zeros(&[ch]));
        for res in ["res1", "res2"] {
            store.insert(
                format!("cfw.enc.stage{i}.{res}.w"),
                he_init(rng, &[ch, ch, 3, 3], ch * 9),
            );
            store.insert(format!("cfw.enc.stage{i}.{res}.b"), zeros(&[ch]));
        }
        in_ch = ch;
    }

    match cfg.semantic_mode {
        SemanticMode::Identity => {
            assert_eq!(
                cfg.latent_dim, cfg.expr_dim,
                "identity semantic mapping requires latent_dim == expr_dim"
            );
        }
        SemanticMode::Mlp => {
            store.insert(
                "cfw.map.l1.w",
                he_init(rng, &[cfg.expr_dim, cfg.semantic_hidden], cfg.expr_dim),
            );
            store.insert("cfw.map.l1.b", zeros(&[cfg.semantic_hidden]));
            store.insert(
                "cfw.map.l2.w",
                he_init(rng, &[cfg.semantic_hidden, cfg.latent_dim], cfg.semantic_hidden),
            );
            store.insert("cfw.map.l2.b", zeros(&[cfg.latent_dim]));
        }
    }

    // Flow decoder, processed coarsest -> finest with skip connections.
    let omega_dim = 2 * cfg.latent_dim;
    let n = stages.len();
    for l in (0..n).rev() {
        let ch = stages[l];
        let in_ch = if l == n - 1 { ch } else { stages[l + 1] + ch };
        store.insert(
            format!("cfw.flow.dec{l}.conv.w"),
            he_init(rng, &[ch, in_ch, 3, 3], in_ch * 9),
        );
        let mut affine_w = he_init(rng, &[omega_dim, 2 * ch], omega_dim);
        affine_w *= 0.05;
        store.insert(format!("cfw.flow.dec{l}.affine.w"), affine_w);
        let mut affine_b = zeros(&[2 * ch]);
        for g in 0..ch {
            affine_b[[g]] = 1.0; // gamma half starts at identity gain
        }
        store.insert(format!("cfw.flow.dec{l}.affine.b"), affine_b);
        // zero-initialized so the initial flow is exactly zero
        store.insert(format!("cfw.flow.head{l}.w"), zeros(&[2, ch, 3, 3]));
        store.insert(format!("cfw.flow.head{l}.b"), zeros(&[2]));
    }
}

fn conv_block(tape: &mut Tape, bound: &Bound, prefix: &str, x: Var, stride: usize) -> Var {
    let w = bound.var(&format!("{prefix}.w"));
    let b = bound.var(&format!("{prefix}.b"));
    tape.conv2d(x, w, b, stride, 1)
}

/// Encoder stage: strided conv + residual block, SiLU activations.
fn encoder_stage(tape: &mut Tape, bound: &Bound, stage: usize, x: Var) -> Var {
    let prefix = format!("cfw.enc.stage{stage}");
    let h = conv_block(tape, bound, &format!("{prefix}.down"), x, 2);
    let h = tape.silu(h);
    let r = conv_block(tape, bound, &format!("{prefix}.res1"), h, 1);
    let r = tape.silu(r);
    let r = conv_block(tape, bound, &format!("{prefix}.res2"), r, 1);
    let h = tape.add(h, r);
    tape.silu(h)
}

/// Reflect-pads `[H,W,3]` to multiples of [`PAD_MULTIPLE`] and converts to
/// `[3,H,W]`.
fn pad_to_chw(image: &Array3<f64>) -> Result<(Arr, (usize, usize))> {
    let (h, w, c) = image.dim();
    if c != 3 {
        return Err(Error::invalid("expected an rgb image"));
    }
    if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
        return Err(Error::invalid(format!(
            "image {h}x{w} too small; need at least {MIN_IMAGE_SIDE} per side"
        )));
    }
    let hp = h.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE;
    let wp = w.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE;
    let (pad_top, pad_left) = ((hp - h) / 2, (wp - w) / 2);
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * n - 2 - i;
        }
        i as usize
    };
    let mut out = Arr::zeros(IxDyn(&[3, hp, wp]));
    for y in 0..hp {
        for x in 0..wp {
            let sy = reflect(y as isize - pad_top as isize, h);
            let sx = reflect(x as isize - pad_left as isize, w);
            for ch in 0..3 {
                out[[ch, y, x]] = image[(sy, sx, ch)];
            }
        }
    }
    Ok((out, (pad_left, pad_top)))
}

/// Feature pyramid of one image on the tape; the image itself is a constant.
pub fn encode_tape(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    image: &Array3<f64>,
) -> Result<TapeVolume> {
    let (h, w, _) = image.dim();
    let (chw, pad) = pad_to_chw(image)?;
    let mut x = tape.constant(chw);
    let mut levels = Vec::with_capacity(cfg.encoder_channels.len());
    let mut scales = Vec::with_capacity(cfg.encoder_channels.len());
    for stage in 0..cfg.encoder_channels.len() {
        x = encoder_stage(tape, bound, stage, x);
        levels.push(x);
        scales.push(1.0 / (1 << (stage + 1)) as f64);
    }
    Ok(TapeVolume { levels, scales, pad, image_hw: (h, w) })
}

/// Expression vector -> latent code `[1, latent_dim]`.
pub fn map_semantics_tape(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    delta: &[f64],
) -> Result<Var> {
    if delta.len() != cfg.expr_dim {
        return Err(Error::invalid(format!(
            "delta length {} does not match expression dimension {}",
            delta.len(),
            cfg.expr_dim
        )));
    }
    let row = Arr::from_shape_vec(IxDyn(&[1, delta.len()]), delta.to_vec()).unwrap();
    let x = tape.constant(row);
    match cfg.semantic_mode {
        SemanticMode::Identity => Ok(x),
        SemanticMode::Mlp => {
            let h = tape.linear(x, bound.var("cfw.map.l1.w"), bound.var("cfw.map.l1.b"));
            let h = tape.silu(h);
            Ok(tape.linear(h, bound.var("cfw.map.l2.w"), bound.var("cfw.map.l2.b")))
        }
    }
}

/// Pools a window of driver frames into one target latent code. Indices
/// `center-radius ..= center+radius` are clamped to the sequence bounds and
/// their deltas averaged (a fixed block-averaging projection back to E)
/// before the shared semantic mapping.
pub fn window_code_tape(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    sequence: &[Vec<f64>],
    center: usize,
    radius: usize,
) -> Result<Var> {
    if sequence.is_empty() {
        return Err(Error::invalid("empty driver sequence"));
    }
    let avg = window_average(sequence, center, radius);
    map_semantics_tape(tape, bound, cfg, &avg)
}

pub(crate) fn window_average(sequence: &[Vec<f64>], center: usize, radius: usize) -> Vec<f64> {
    let n = sequence.len();
    let e = sequence[0].len();
    let lo = center as isize - radius as isize;
    let hi = center as isize + radius as isize;
    let mut avg = vec![0.0f64; e];
    let count = (hi - lo + 1) as f64;
    for i in lo..=hi {
        let idx = i.clamp(0, n as isize - 1) as usize;
        for (a, d) in avg.iter_mut().zip(&sequence[idx]) {
            *a += d;
        }
    }
    for a in &mut avg {
        *a /= count;
    }
    avg
}

/// Motion descriptor `[1, 2 latent_dim]`: source code concatenated with the
/// target code.
pub fn motion_descriptor_tape(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    delta_src: &[f64],
    target_code: Var,
) -> Result<Var> {
    let src = map_semantics_tape(tape, bound, cfg, delta_src)?;
    Ok(tape.concat(1, &[src, target_code]))
}

/// Target half of the motion descriptor for a [`TargetSpec`].
pub fn target_code_tape(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    target: &TargetSpec,
) -> Result<Var> {
    match target {
        TargetSpec::Delta(delta) => map_semantics_tape(tape, bound, cfg, delta),
        TargetSpec::Window { sequence, center, radius } => {
            window_code_tape(tape, bound, cfg, sequence, *center, *radius)
        }
    }
}

/// AdaIN: instance-normalize `z` and re-style it with an affine predicted
/// from the motion descriptor by this convolution's head.
pub fn adain_tape(
    tape: &mut Tape,
    z: Var,
    omega: Var,
    head_w: Var,
    head_b: Var,
) -> Var {
    let ch = tape.shape(z)[0];
    let gb = tape.linear(omega, head_w, head_b);
    let gamma = tape.slice_cols(gb, 0, ch);
    let gamma = tape.reshape(gamma, &[ch]);
    let beta = tape.slice_cols(gb, ch, 2 * ch);
    let beta = tape.reshape(beta, &[ch]);
    tape.instance_norm_affine(z, gamma, beta, ADAIN_EPS)
}

/// Decoder over the pyramid (coarse to fine) with skip connections; every
/// hidden convolution is AdaIN-modulated and each level gets a (du, dv) head.
pub fn predict_flow_tape(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    vol: &TapeVolume,
    omega: Var,
) -> Vec<Var> {
    let n = vol.levels.len();
    let mut flows = vec![None; n];
    let mut h: Option<Var> = None;
    for l in (0..n).rev() {
        let input = match h {
            None => vol.levels[l],
            Some(prev) => {
                let up = tape.upsample_nearest2(prev);
                tape.concat(0, &[up, vol.levels[l]])
            }
        };
        let conv_w = bound.var(&format!("cfw.flow.dec{l}.conv.w"));
        let zero_b = tape.constant(zeros(&[cfg.encoder_channels[l]]));
        let z = tape.conv2d(input, conv_w, zero_b, 1, 1);
        let z = adain_tape(
            tape,
            z,
            omega,
            bound.var(&format!("cfw.flow.dec{l}.affine.w")),
            bound.var(&format!("cfw.flow.dec{l}.affine.b")),
        );
        let z = tape.silu(z);
        let head_w = bound.var(&format!("cfw.flow.head{l}.w"));
        let head_b = bound.var(&format!("cfw.flow.head{l}.b"));
        flows[l] = Some(tape.conv2d(z, head_w, head_b, 1, 1));
        h = Some(z);
    }
    flows.into_iter().map(|f| f.unwrap()).collect()
}

/// Bilinear warp of every level by its flow.
pub fn warp_tape(tape: &mut Tape, vol: &TapeVolume, flows: &[Var]) -> TapeVolume {
    assert_eq!(vol.levels.len(), flows.len());
    let levels = vol
        .levels
        .iter()
        .zip(flows.iter())
        .map(|(&feat, &flow)| tape.grid_sample_flow(feat, flow))
        .collect();
    TapeVolume {
        levels,
        scales: vol.scales.clone(),
        pad: vol.pad,
        image_hw: vol.image_hw,
    }
}

/// Full warping pipeline for a set of frames on an existing tape:
/// encode, predict flow toward the target, warp.
pub fn warp_to_target_tape(
    tape: &mut Tape,
    bound: &Bound,
    cfg: &ModelConfig,
    frames: &[&TrackedFrame],
    target: &TargetSpec,
) -> Result<Vec<TapeVolume>> {
    if frames.is_empty() {
        return Err(Error::invalid("need at least one input frame"));
    }
    let target_code = target_code_tape(tape, bound, cfg, target)?;
    let mut out = Vec::with_capacity(frames.len());
    for frame in frames {
        let vol = encode_tape(tape, bound, cfg, &frame.image)?;
        let omega = motion_descriptor_tape(tape, bound, cfg, &frame.delta, target_code)?;
        let flows = predict_flow_tape(tape, bound, cfg, &vol, omega);
        out.push(warp_tape(tape, &vol, &flows));
    }
    Ok(out)
}

// ---- plain (inference) wrappers -------------------------------------------

pub fn encode_image(
    cfg: &ModelConfig,
    store: &ParamStore,
    image: &Array3<f64>,
) -> Result<FeatureVolume> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let vol = encode_tape(&mut tape, &bound, cfg, image)?;
    Ok(vol.extract(&tape))
}

pub fn map_semantics(cfg: &ModelConfig, store: &ParamStore, delta: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let code = map_semantics_tape(&mut tape, &bound, cfg, delta)?;
    Ok(tape.value(code).iter().copied().collect())
}

/// Concatenated source and target latent codes, length `2 * latent_dim`.
pub fn motion_descriptor(
    cfg: &ModelConfig,
    store: &ParamStore,
    delta_src: &[f64],
    delta_tar: &[f64],
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let tar = map_semantics_tape(&mut tape, &bound, cfg, delta_tar)?;
    let omega = motion_descriptor_tape(&mut tape, &bound, cfg, delta_src, tar)?;
    Ok(tape.value(omega).iter().copied().collect())
}

/// Window-pooled target code, length `latent_dim`.
pub fn window_descriptor(
    cfg: &ModelConfig,
    store: &ParamStore,
    sequence: &[Vec<f64>],
    center: usize,
    radius: usize,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let code = window_code_tape(&mut tape, &bound, cfg, sequence, center, radius)?;
    Ok(tape.value(code).iter().copied().collect())
}

pub fn predict_flow(
    cfg: &ModelConfig,
    store: &ParamStore,
    vol: &FeatureVolume,
    omega: &[f64],
) -> Result<FlowField> {
    if omega.len() != 2 * cfg.latent_dim {
        return Err(Error::invalid("motion descriptor length mismatch"));
    }
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let tv = TapeVolume::constant(&mut tape, vol);
    let omega_row =
        Arr::from_shape_vec(IxDyn(&[1, omega.len()]), omega.to_vec()).unwrap();
    let omega_var = tape.constant(omega_row);
    let flows = predict_flow_tape(&mut tape, &bound, cfg, &tv, omega_var);
    Ok(FlowField {
        levels: flows
            .into_iter()
            .map(|f| {
                tape.value(f)
                    .clone()
                    .into_dimensionality::<ndarray::Ix3>()
                    .unwrap()
            })
            .collect(),
    })
}

/// `out(p) = bilinear(feat, p + flow(p))` per level, border-clamped.
pub fn warp_features(vol: &FeatureVolume, flow: &FlowField) -> Result<FeatureVolume> {
    if vol.levels.len() != flow.levels.len() {
        return Err(Error::invalid("flow level count mismatch"));
    }
    for (lv, fl) in vol.levels.iter().zip(flow.levels.iter()) {
        let (_, h, w) = lv.data.dim();
        if fl.dim() != (2, h, w) {
            return Err(Error::invalid(format!(
                "flow shape {:?} does not match level {}x{}",
                fl.dim(),
                h,
                w
            )));
        }
    }
    let mut tape = Tape::new();
    let tv = TapeVolume::constant(&mut tape, vol);
    let flows: Vec<Var> = flow
        .levels
        .iter()
        .map(|f| tape.constant(f.clone().into_dyn()))
        .collect();
    let warped = warp_tape(&mut tape, &tv, &flows);
    Ok(warped.extract(&tape))
}

/// Encode + flow + warp for every frame, toward one target expression.
pub fn warp_to_target(
    cfg: &ModelConfig,
    store: &ParamStore,
    frames: &[&TrackedFrame],
    target: &TargetSpec,
) -> Result<Vec<FeatureVolume>> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let vols = warp_to_target_tape(&mut tape, &bound, cfg, frames, target)?;
    Ok(vols.into_iter().map(|v| v.extract(&tape)).collect())
}

/// Standalone AdaIN with an explicit affine head; test and inspection hook.
pub fn adain_modulate(
    z: &Array3<f64>,
    omega: &[f64],
    head_w: &Array2<f64>,
    head_b: &[f64],
) -> Array3<f64> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone().into_dyn());
    let ov = tape.constant(
        Arr::from_shape_vec(IxDyn(&[1, omega.len()]), omega.to_vec()).unwrap(),
    );
    let wv = tape.constant(head_w.clone().into_dyn());
    let bv = tape.constant(
        Arr::from_shape_vec(IxDyn(&[head_b.len()]), head_b.to_vec()).unwrap(),
    );
    let out = adain_tape(&mut tape, zv, ov, wv, bv);
    tape.value(out)
        .clone()
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap()
}

/// Re-randomizes every cfw parameter including the normally zero-initialized
/// flow heads; used by gradient tests that need a generic point.
pub fn randomize_for_tests(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let n = cfg.encoder_channels.len();
    for l in 0..n {
        let ch = cfg.encoder_channels[l];
        let name = format!("cfw.flow.head{l}.w");
        *store.get_mut(&name) = {
            let mut w = he_init(rng, &[2, ch, 3, 3], ch * 9);
            w *= 0.3;
            w
        };
        let name = format!("cfw.flow.head{l}.b");
        *store.get_mut(&name) = {
            let mut b = he_init(rng, &[2], 2);
            b *= 0.1;
            b
        };
    }
}
