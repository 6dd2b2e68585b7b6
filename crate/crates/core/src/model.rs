//! Desk-scale 3D encoder/decoder segmentation network.
//!
//! The topology follows the full-scale design — a residual encoder with a
//! strided stem, two intermediate skip taps, and two decoders of
//! upsampling blocks (segmentation and reconstruction) — but channel counts
//! and depth are configurable so phantom-sized volumes train in minutes.
//! Batch statistics are replaced by per-channel spatial standardization
//! plus learned affine scaling: training happens on a single volume at a
//! time, where batch moments are degenerate but instance moments are not.
//! Without the standardization the segmentation head's raw output drifts
//! freely with encoder feature churn and saturates.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Graph, Real, Tensor};
use crate::morphology::{make_elements, StructuringElementSet};
use crate::volume::Volume3D;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("spatial dims {dims:?} not divisible by total stride {stride}")]
    DimsNotDivisible { dims: (usize, usize, usize), stride: usize },
    #[error("model config invalid: {0}")]
    BadConfig(String),
    #[error("missing parameter {path}")]
    MissingParam { path: String },
    #[error("parameter {path} has shape {got:?}, expected {want:?}")]
    ParamShape { path: String, got: Vec<usize>, want: Vec<usize> },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Network shape configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Channels per encoder stage; the first stage runs at stem resolution,
    /// each later stage downsamples by 2.
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    /// Repetitions of the SI∘IS smoothing pair applied to the raw map.
    pub mu: usize,
    /// Binarization threshold on the smoothed map (inclusive `>=`).
    pub threshold: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { stage_channels: vec![8, 16, 32], blocks_per_stage: 2, mu: 3, threshold: 0.5 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.stage_channels.len() < 2 {
            return Err(ModelError::BadConfig("need at least 2 stages for the skip taps".into()));
        }
        if self.stage_channels.iter().any(|&c| c == 0) || self.blocks_per_stage == 0 {
            return Err(ModelError::BadConfig("channel and block counts must be positive".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(ModelError::BadConfig(format!(
                "threshold must lie in (0,1), got {}",
                self.threshold
            )));
        }
        Ok(())
    }

    /// Total spatial downsampling factor: stem stride 2, then one stride-2
    /// stage transition per stage after the first.
    pub fn total_stride(&self) -> usize {
        1 << self.stage_channels.len()
    }
}

/// One named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

/// All network parameters, keyed by layer path. `BTreeMap` keeps every
/// iteration (updates, checkpoints, leaf insertion) in one deterministic
/// order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelParams {
    pub entries: BTreeMap<String, Param>,
}

impl ModelParams {
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.values.len()).sum()
    }
}

enum ParamKind {
    ConvWeight { fan_in: usize },
    Bias,
    /// Bias of the segmentation head. Initialized so the raw map starts at
    /// the stationary point of the entropy term (sigmoid = 1/e): from
    /// there the region-rank gradient decides per voxel which way to move,
    /// instead of a uniform entropy pressure saturating the whole map.
    SegHeadBias,
    Scale,
    Shift,
}

/// Enumerates every parameter path and shape of the architecture, in
/// creation order. Initialization and the forward builder both derive from
/// this single walk.
fn for_each_param(cfg: &ModelConfig, mut f: impl FnMut(String, Vec<usize>, ParamKind)) {
    let ch = &cfg.stage_channels;
    let nstages = ch.len();

    let conv = |name: String, cout: usize, cin: usize, k: usize, f: &mut dyn FnMut(String, Vec<usize>, ParamKind)| {
        let fan_in = cin * k * k * k;
        f(format!("{name}.w"), vec![cout, cin, k, k, k], ParamKind::ConvWeight { fan_in });
        f(format!("{name}.b"), vec![cout], ParamKind::Bias);
    };
    let affine = |name: String, c: usize, f: &mut dyn FnMut(String, Vec<usize>, ParamKind)| {
        f(format!("{name}.scale"), vec![c], ParamKind::Scale);
        f(format!("{name}.shift"), vec![c], ParamKind::Shift);
    };

    conv("enc.stem.conv".into(), ch[0], 1, 3, &mut f);
    affine("enc.stem.affine".into(), ch[0], &mut f);

    for s in 0..nstages {
        let cin_stage = if s == 0 { ch[0] } else { ch[s - 1] };
        for b in 0..cfg.blocks_per_stage {
            let base = format!("enc.stage{s}.block{b}");
            let cin = if b == 0 { cin_stage } else { ch[s] };
            let stride = if b == 0 && s > 0 { 2 } else { 1 };
            conv(format!("{base}.conv1"), ch[s], cin, 3, &mut f);
            affine(format!("{base}.affine1"), ch[s], &mut f);
            conv(format!("{base}.conv2"), ch[s], ch[s], 3, &mut f);
            affine(format!("{base}.affine2"), ch[s], &mut f);
            if stride != 1 || cin != ch[s] {
                conv(format!("{base}.proj"), ch[s], cin, 1, &mut f);
                affine(format!("{base}.proj_affine"), ch[s], &mut f);
            }
        }
    }

    for dec in ["dec_seg", "dec_rec"] {
        let mut cin = ch[nstages - 1];
        for k in 0..nstages {
            // up block k consumes the skip from stage nstages-2-k, if any
            let skip_ch = if k + 2 <= nstages { ch[nstages - 2 - k] } else { 0 };
            let cout = if skip_ch > 0 { skip_ch } else { cin.min(ch[0]) };
            conv(format!("{dec}.up{k}.conv"), cout, cin + skip_ch, 3, &mut f);
            affine(format!("{dec}.up{k}.affine"), cout, &mut f);
            cin = cout;
        }
        let fan_in = cin * 27;
        f(format!("{dec}.final.w"), vec![1, cin, 3, 3, 3], ParamKind::ConvWeight { fan_in });
        let bias_kind = if dec == "dec_seg" { ParamKind::SegHeadBias } else { ParamKind::Bias };
        f(format!("{dec}.final.b"), vec![1], bias_kind);
    }
}

/// Fan-in-scaled uniform initialization, deterministic per seed.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = BTreeMap::new();
    for_each_param(cfg, |path, shape, kind| {
        let n: usize = shape.iter().product();
        let values = match kind {
            ParamKind::ConvWeight { fan_in } => {
                let bound = 1.0 / (fan_in as f32).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
            ParamKind::Bias | ParamKind::Shift => vec![0.0; n],
            ParamKind::SegHeadBias => vec![-0.5413; n],
            ParamKind::Scale => vec![1.0; n],
        };
        entries.insert(path, Param { shape, values });
    });
    Ok(ModelParams { entries })
}

/// Graph-side handles to every parameter leaf.
pub struct GraphParams {
    pub handles: BTreeMap<String, Tensor>,
}

impl GraphParams {
    pub fn get(&self, path: &str) -> Result<Tensor, ModelError> {
        self.handles
            .get(path)
            .copied()
            .ok_or_else(|| ModelError::MissingParam { path: path.into() })
    }
}

/// Inserts all parameters as gradient leaves.
pub fn insert_params<R: Real>(
    g: &mut Graph<R>,
    params: &ModelParams,
    requires_grad: bool,
) -> Result<GraphParams, ModelError> {
    let mut handles = BTreeMap::new();
    for (path, p) in &params.entries {
        let values = p.values.iter().map(|&v| R::of(v as f64)).collect();
        let t = g.leaf(&p.shape, values, requires_grad)?;
        handles.insert(path.clone(), t);
    }
    Ok(GraphParams { handles })
}

/// Encoder activations: one skip per intermediate stage plus the
/// bottleneck. With the default three stages the two skips are the
/// classic C2/C3 taps.
pub struct EncoderFeatures {
    /// Stage outputs 0..n-1 at strides 2, 4, ..., ordered shallow to deep.
    pub skips: Vec<Tensor>,
    pub bottleneck: Tensor,
}

impl EncoderFeatures {
    pub fn c2(&self) -> Tensor {
        self.skips[0]
    }
    pub fn c3(&self) -> Tensor {
        self.skips[1]
    }
}

fn conv_block<R: Real>(
    g: &mut Graph<R>,
    params: &GraphParams,
    base: &str,
    x: Tensor,
    stride: usize,
) -> Result<Tensor, ModelError> {
    let w = params.get(&format!("{base}.w"))?;
    let b = params.get(&format!("{base}.b"))?;
    Ok(g.conv3d(x, w, b, stride)?)
}

fn norm_affine_relu<R: Real>(
    g: &mut Graph<R>,
    params: &GraphParams,
    base: &str,
    x: Tensor,
    relu: bool,
) -> Result<Tensor, ModelError> {
    let scale = params.get(&format!("{base}.scale"))?;
    let shift = params.get(&format!("{base}.shift"))?;
    let xn = g.channel_standardize(x)?;
    let y = g.channel_affine(xn, scale, shift)?;
    Ok(if relu { g.relu(y) } else { y })
}

fn residual_block<R: Real>(
    g: &mut Graph<R>,
    params: &GraphParams,
    base: &str,
    x: Tensor,
    stride: usize,
    has_proj: bool,
) -> Result<Tensor, ModelError> {
    let y = conv_block(g, params, &format!("{base}.conv1"), x, stride)?;
    let y = norm_affine_relu(g, params, &format!("{base}.affine1"), y, true)?;
    let y = conv_block(g, params, &format!("{base}.conv2"), y, 1)?;
    let y = norm_affine_relu(g, params, &format!("{base}.affine2"), y, false)?;
    let shortcut = if has_proj {
        let p = conv_block(g, params, &format!("{base}.proj"), x, stride)?;
        norm_affine_relu(g, params, &format!("{base}.proj_affine"), p, false)?
    } else {
        x
    };
    let sum = g.add(y, shortcut)?;
    Ok(g.relu(sum))
}

/// Residual encoder: strided stem, then one stage per channel entry.
pub fn encode<R: Real>(
    g: &mut Graph<R>,
    params: &GraphParams,
    cfg: &ModelConfig,
    input: Tensor,
) -> Result<EncoderFeatures, ModelError> {
    let shape = g.shape(input).to_vec();
    let stride = cfg.total_stride();
    if shape.len() != 4 || shape[0] != 1 {
        return Err(ModelError::BadConfig(format!("expected [1,Z,Y,X] input, got {shape:?}")));
    }
    if shape[1..].iter().any(|&d| d % stride != 0) {
        return Err(ModelError::DimsNotDivisible {
            dims: (shape[1], shape[2], shape[3]),
            stride,
        });
    }

    let x = conv_block(g, params, "enc.stem.conv", input, 2)?;
    let mut x = norm_affine_relu(g, params, "enc.stem.affine", x, true)?;

    let nstages = cfg.stage_channels.len();
    let mut skips = Vec::new();
    for s in 0..nstages {
        let cin_stage = if s == 0 { cfg.stage_channels[0] } else { cfg.stage_channels[s - 1] };
        for b in 0..cfg.blocks_per_stage {
            let base = format!("enc.stage{s}.block{b}");
            let cin = if b == 0 { cin_stage } else { cfg.stage_channels[s] };
            let stride = if b == 0 && s > 0 { 2 } else { 1 };
            let has_proj = stride != 1 || cin != cfg.stage_channels[s];
            x = residual_block(g, params, &base, x, stride, has_proj)?;
        }
        if s + 1 < nstages {
            skips.push(x);
        }
    }
    Ok(EncoderFeatures { skips, bottleneck: x })
}

fn decode<R: Real>(
    g: &mut Graph<R>,
    params: &GraphParams,
    cfg: &ModelConfig,
    features: &EncoderFeatures,
    dec: &str,
) -> Result<Tensor, ModelError> {
    let nstages = cfg.stage_channels.len();
    let mut x = features.bottleneck;
    for k in 0..nstages {
        x = g.upsample_nearest2x(x)?;
        if k + 2 <= nstages {
            let skip = features.skips[nstages - 2 - k];
            x = g.concat_channels(x, skip)?;
        }
        x = conv_block(g, params, &format!("{dec}.up{k}.conv"), x, 1)?;
        x = norm_affine_relu(g, params, &format!("{dec}.up{k}.affine"), x, true)?;
    }
    conv_block(g, params, &format!("{dec}.final"), x, 1)
}

/// Raw segmentation head: decoder + sigmoid, shaped `[1,Z,Y,X]`.
pub fn decode_seg<R: Real>(
    g: &mut Graph<R>,
    params: &GraphParams,
    cfg: &ModelConfig,
    features: &EncoderFeatures,
) -> Result<Tensor, ModelError> {
    let y = decode(g, params, cfg, features, "dec_seg")?;
    Ok(g.sigmoid(y))
}

/// Reconstruction head: linear output clamped to `[0,1]` by composing the
/// clamp from two relu stages.
pub fn decode_rec<R: Real>(
    g: &mut Graph<R>,
    params: &GraphParams,
    cfg: &ModelConfig,
    features: &EncoderFeatures,
) -> Result<Tensor, ModelError> {
    let y = decode(g, params, cfg, features, "dec_rec")?;
    let lo = g.relu(y);
    let inv = g.affine(lo, -1.0, 1.0);
    let hi = g.relu(inv);
    Ok(g.affine(hi, -1.0, 1.0))
}

/// `(SI ∘ IS)^mu` smoothing of the raw map, innermost IS first.
pub fn smooth<R: Real>(
    g: &mut Graph<R>,
    s_bar: Tensor,
    mu: usize,
    set: &StructuringElementSet,
) -> Result<Tensor, ModelError> {
    let mut x = s_bar;
    for _ in 0..mu {
        let inner = crate::morphology::is_(g, x, set)?;
        x = crate::morphology::si(g, inner, set)?;
    }
    Ok(x)
}

/// In-graph forward outputs; all spatial tensors are 3D `[Z,Y,X]`.
pub struct ModelOutputs {
    pub s_bar: Tensor,
    pub s: Tensor,
    pub i_rec: Option<Tensor>,
}

/// Full forward pass on an in-graph `[Z,Y,X]` input volume.
pub fn forward<R: Real>(
    g: &mut Graph<R>,
    params: &GraphParams,
    cfg: &ModelConfig,
    input3d: Tensor,
    set: &StructuringElementSet,
    with_rec: bool,
) -> Result<ModelOutputs, ModelError> {
    let shape = g.shape(input3d).to_vec();
    let input = g.reshape(input3d, &[1, shape[0], shape[1], shape[2]])?;
    let features = encode(g, params, cfg, input)?;
    let s_bar4 = decode_seg(g, params, cfg, &features)?;
    let s_bar = g.reshape(s_bar4, &shape)?;
    let s = smooth(g, s_bar, cfg.mu, set)?;
    let i_rec = if with_rec {
        let r4 = decode_rec(g, params, cfg, &features)?;
        Some(g.reshape(r4, &shape)?)
    } else {
        None
    };
    Ok(ModelOutputs { s_bar, s, i_rec })
}

/// Materialized segmentation of one volume.
#[derive(Debug, Clone)]
pub struct SegmentationResult {
    pub s_bar: Volume3D,
    pub s: Volume3D,
    pub i_rec: Option<Volume3D>,
    /// `s >= threshold`, inclusive.
    pub binary: Vec<bool>,
}

impl SegmentationResult {
    pub fn binary_volume(&self) -> Volume3D {
        Volume3D {
            dims: self.s.dims,
            data: self.binary.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            voxel_size_um: self.s.voxel_size_um,
            origin_depth_um: self.s.origin_depth_um,
        }
    }
}

/// Runs inference on a volume with an f32 graph and extracts the results.
pub fn forward_volume(
    params: &ModelParams,
    cfg: &ModelConfig,
    input: &Volume3D,
    with_rec: bool,
) -> Result<SegmentationResult, ModelError> {
    let set = make_elements();
    let mut g: Graph<f32> = Graph::new();
    let (zd, yd, xd) = input.dims;
    let t = g.leaf(&[zd, yd, xd], input.data.clone(), false)?;
    let hp = insert_params(&mut g, params, false)?;
    let out = forward(&mut g, &hp, cfg, t, &set, with_rec)?;

    let vol = |t: Tensor, g: &Graph<f32>| Volume3D {
        dims: input.dims,
        data: g.values(t).to_vec(),
        voxel_size_um: input.voxel_size_um,
        origin_depth_um: input.origin_depth_um,
    };
    let s = vol(out.s, &g);
    let binary = s.data.iter().map(|&v| v >= cfg.threshold).collect();
    Ok(SegmentationResult {
        s_bar: vol(out.s_bar, &g),
        s,
        i_rec: out.i_rec.map(|t| vol(t, &g)),
        binary,
    })
}
