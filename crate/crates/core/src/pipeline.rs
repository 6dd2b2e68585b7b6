//! Two-stage training and movie inference.
//!
//! Stage one trains on the time-collapsed volume and produces the anchor
//! skeleton `K`. Stage two revisits the sparse frames (random order per
//! epoch) and retrains the same network under the compound loss plus the
//! skeleton-anchor term.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Tensor};
use crate::losses::{compound, temporal_loss, LossTerms, LossWeights};
use crate::model::{
    forward, forward_volume, init_params, insert_params, ModelConfig, ModelError, ModelParams,
    Param, SegmentationResult,
};
use crate::morphology::{make_elements, StructuringElementSet};
use crate::skeleton::{skeletonize, SkeletonConfig};
use crate::volume::{time_collapse, z_moving_average, Movie4D, Volume3D, VolumeError};

/// Checkpoint container magic bytes.
pub const V4DP_MAGIC: [u8; 4] = *b"V4DP";
pub const V4DP_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("training diverged: non-finite loss at step {step}")]
    Divergence { step: usize },
    #[error("bad train config: {0}")]
    BadConfig(String),
    #[error("checkpoint magic mismatch: expected \"V4DP\", found {found:?}")]
    CheckpointMagic { found: [u8; 4] },
    #[error("unsupported checkpoint version {found}")]
    CheckpointVersion { found: u8 },
    #[error("corrupt checkpoint: {reason}")]
    CheckpointCorrupt { reason: String },
    #[error("segmentation dims {got:?} do not match training dims {want:?}")]
    DimsMismatch { got: (usize, usize, usize), want: (usize, usize, usize) },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// How the temporal stage shares parameters across frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TemporalMode {
    /// One shared model, frames visited in random order per epoch.
    #[default]
    Joint,
    /// One shared model, frames visited in time order per epoch (online
    /// fine-tuning).
    Sequential,
    /// A per-frame copy fine-tuned from the static parameters.
    PerFrame,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps_static: usize,
    pub steps_temporal: usize,
    /// Random 3D crop extent used when a volume exceeds `voxel_budget`.
    pub crop_size: Option<[usize; 3]>,
    /// Volumes above this voxel count train on random crops.
    pub voxel_budget: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    pub skeleton: SkeletonConfig,
    pub temporal_mode: TemporalMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            steps_static: 2000,
            steps_temporal: 1000,
            crop_size: None,
            voxel_budget: 1 << 22,
            seed: 7,
            beta1: 0.9,
            beta2: 0.999,
            weights: LossWeights::default(),
            skeleton: SkeletonConfig::default(),
            temporal_mode: TemporalMode::Joint,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if !(self.learning_rate > 0.0) {
            return Err(PipelineError::BadConfig("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(PipelineError::BadConfig("moment decays must lie in [0,1)".into()));
        }
        self.weights.validate().map_err(PipelineError::BadConfig)?;
        Ok(())
    }

    /// Stage-specific sub-seed so all randomness flows from the one seed.
    pub fn sub_seed(&self, label: &str) -> u64 {
        let mut h = 0xcbf29ce484222325u64; // FNV-1a
        for b in label.bytes().chain(self.seed.to_le_bytes()) {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

/// Adaptive-moment optimizer state over the parameter map.
pub struct Adam {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: usize,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64, beta1: f64, beta2: f64) -> Self {
        let zeros =
            |p: &ModelParams| -> BTreeMap<String, Vec<f64>> {
                p.entries
                    .iter()
                    .map(|(k, v)| (k.clone(), vec![0.0; v.values.len()]))
                    .collect()
            };
        Self { m: zeros(params), v: zeros(params), t: 0, lr, beta1, beta2, eps: 1e-8 }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &BTreeMap<String, Vec<f32>>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (path, p) in params.entries.iter_mut() {
            let g = match grads.get(path) {
                Some(g) => g,
                None => continue,
            };
            let m = self.m.get_mut(path).expect("adam state");
            let v = self.v.get_mut(path).expect("adam state");
            for i in 0..p.values.len() {
                let gi = g[i] as f64;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.values[i] -= (self.lr * mhat / (vhat.sqrt() + self.eps)) as f32;
            }
        }
    }
}

fn random_crop_origin(
    rng: &mut ChaCha8Rng,
    dims: (usize, usize, usize),
    crop: [usize; 3],
    stride: usize,
) -> (usize, usize, usize) {
    // keep crops stride-aligned so every crop is a valid network input
    let pick = |n: usize, c: usize, rng: &mut ChaCha8Rng| {
        if c >= n {
            0
        } else {
            let slots = (n - c) / stride;
            stride * rng.gen_range(0..=slots)
        }
    };
    (pick(dims.0, crop[0], rng), pick(dims.1, crop[1], rng), pick(dims.2, crop[2], rng))
}

fn crop_volume(vol: &Volume3D, origin: (usize, usize, usize), crop: [usize; 3]) -> Volume3D {
    let (z0, y0, x0) = origin;
    let (zc, yc, xc) = (crop[0].min(vol.dims.0), crop[1].min(vol.dims.1), crop[2].min(vol.dims.2));
    let mut data = Vec::with_capacity(zc * yc * xc);
    for z in z0..z0 + zc {
        for y in y0..y0 + yc {
            let base = vol.index(z, y, x0);
            data.extend_from_slice(&vol.data[base..base + xc]);
        }
    }
    Volume3D { dims: (zc, yc, xc), data, ..*vol }
}

fn extract_grads(g: &Graph<f32>, handles: &BTreeMap<String, Tensor>) -> BTreeMap<String, Vec<f32>> {
    handles
        .iter()
        .filter_map(|(path, t)| g.grad(*t).map(|gr| (path.clone(), gr.to_vec())))
        .collect()
}

/// One gradient step on the compound loss over a single volume; shared by
/// both stages.
struct StepContext<'a> {
    model_cfg: &'a ModelConfig,
    cfg: &'a TrainConfig,
    set: &'a StructuringElementSet,
}

fn train_step(
    ctx: &StepContext,
    params: &mut ModelParams,
    adam: &mut Adam,
    input: &Volume3D,
    anchor: Option<&Volume3D>,
    step: usize,
) -> Result<LossTerms, PipelineError> {
    let (zd, yd, xd) = input.dims;
    let mut g: Graph<f32> = Graph::with_capacity(512);
    let t = g.leaf(&[zd, yd, xd], input.data.clone(), false).map_err(ModelError::from)?;
    let hp = insert_params(&mut g, params, true)?;
    let out = forward(&mut g, &hp, ctx.model_cfg, t, ctx.set, true)?;
    let i_rec = out.i_rec.expect("training forward keeps the reconstruction head");

    let (loss, terms) = match anchor {
        None => compound(&mut g, t, out.s_bar, out.s, i_rec, &ctx.cfg.weights)
            .map_err(ModelError::from)?,
        Some(k) => {
            let ka = g
                .leaf(&[zd, yd, xd], k.data.clone(), false)
                .map_err(ModelError::from)?;
            temporal_loss(
                &mut g,
                t,
                out.s_bar,
                out.s,
                i_rec,
                ka,
                &ctx.cfg.weights,
                ctx.set,
                &ctx.cfg.skeleton,
            )
            .map_err(ModelError::from)?
        }
    };
    if !terms.total.is_finite() {
        return Err(PipelineError::Divergence { step });
    }
    g.backward(loss).map_err(ModelError::from)?;
    let grads = extract_grads(&g, &hp.handles);
    adam.step(params, &grads);
    // a finite loss does not rule out inf/NaN leaking into parameters
    // through saturated activations; fail as a divergence, not a panic
    for p in params.entries.values() {
        if p.values.iter().any(|v| !v.is_finite()) {
            return Err(PipelineError::Divergence { step });
        }
    }
    Ok(terms)
}

/// Incremental driver for the static stage; step-at-a-time so callers can
/// interleave evaluation.
pub struct StaticTrainer {
    pub params: ModelParams,
    adam: Adam,
    collapsed: Volume3D,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    set: StructuringElementSet,
    rng: ChaCha8Rng,
    step: usize,
    pub losses: Vec<LossTerms>,
}

impl StaticTrainer {
    pub fn new(
        movie: &Movie4D,
        model_cfg: &ModelConfig,
        cfg: &TrainConfig,
    ) -> Result<Self, PipelineError> {
        cfg.validate()?;
        model_cfg.validate()?;
        let params = init_params(model_cfg, cfg.sub_seed("init"))?;
        let adam = Adam::new(&params, cfg.learning_rate, cfg.beta1, cfg.beta2);
        Ok(Self {
            params,
            adam,
            collapsed: time_collapse(movie),
            model_cfg: model_cfg.clone(),
            cfg: cfg.clone(),
            set: make_elements(),
            rng: ChaCha8Rng::seed_from_u64(cfg.sub_seed("static-crops")),
            step: 0,
            losses: Vec::new(),
        })
    }

    pub fn collapsed(&self) -> &Volume3D {
        &self.collapsed
    }

    fn pick_input(&mut self) -> Volume3D {
        match self.cfg.crop_size {
            Some(crop) if self.collapsed.len() > self.cfg.voxel_budget => {
                let origin = random_crop_origin(
                    &mut self.rng,
                    self.collapsed.dims,
                    crop,
                    self.model_cfg.total_stride(),
                );
                crop_volume(&self.collapsed, origin, crop)
            }
            _ => self.collapsed.clone(),
        }
    }

    pub fn step(&mut self) -> Result<LossTerms, PipelineError> {
        let input = self.pick_input();
        let ctx = StepContext { model_cfg: &self.model_cfg, cfg: &self.cfg, set: &self.set };
        let terms = train_step(&ctx, &mut self.params, &mut self.adam, &input, None, self.step)?;
        self.step += 1;
        self.losses.push(terms);
        Ok(terms)
    }

    /// Segment the collapsed volume and derive the anchor skeleton from the
    /// smoothed map.
    pub fn finish(self) -> Result<StaticOutput, PipelineError> {
        let seg = forward_volume(&self.params, &self.model_cfg, &self.collapsed, false)?;
        let anchor = anchor_skeleton(&seg.s, &self.cfg.skeleton)?;
        Ok(StaticOutput { params: self.params, seg, anchor, losses: self.losses })
    }
}

/// Anchor skeleton `K = skeletonize(S, n)` as a plain volume.
pub fn anchor_skeleton(
    s: &Volume3D,
    cfg: &SkeletonConfig,
) -> Result<Volume3D, PipelineError> {
    let set = make_elements();
    let mut g: Graph<f32> = Graph::new();
    let (zd, yd, xd) = s.dims;
    let t = g.leaf(&[zd, yd, xd], s.data.clone(), false).map_err(ModelError::from)?;
    let k = skeletonize(&mut g, t, &set, cfg).map_err(ModelError::from)?;
    Ok(Volume3D { dims: s.dims, data: g.values(k).to_vec(), ..*s })
}

pub struct StaticOutput {
    pub params: ModelParams,
    pub seg: SegmentationResult,
    pub anchor: Volume3D,
    pub losses: Vec<LossTerms>,
}

/// Trains the static stage for `cfg.steps_static` steps.
pub fn train_static(
    movie: &Movie4D,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<StaticOutput, PipelineError> {
    let mut trainer = StaticTrainer::new(movie, model_cfg, cfg)?;
    for _ in 0..cfg.steps_static {
        trainer.step()?;
    }
    trainer.finish()
}

/// Parameters produced by the temporal stage.
pub enum TemporalParams {
    Shared(ModelParams),
    PerFrame(Vec<ModelParams>),
}

impl TemporalParams {
    pub fn for_frame(&self, t: usize) -> &ModelParams {
        match self {
            TemporalParams::Shared(p) => p,
            TemporalParams::PerFrame(ps) => &ps[t.min(ps.len() - 1)],
        }
    }

    pub fn shared(&self) -> Option<&ModelParams> {
        match self {
            TemporalParams::Shared(p) => Some(p),
            TemporalParams::PerFrame(_) => None,
        }
    }
}

pub struct TemporalOutput {
    pub params: TemporalParams,
    pub losses: Vec<LossTerms>,
}

/// Incremental driver for the temporal stage.
pub struct TemporalTrainer {
    params: ModelParams,
    adam: Adam,
    movie: Movie4D,
    anchor: Volume3D,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    set: StructuringElementSet,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    step: usize,
    pub losses: Vec<LossTerms>,
}

impl TemporalTrainer {
    pub fn new(
        movie: &Movie4D,
        anchor: &Volume3D,
        init: ModelParams,
        model_cfg: &ModelConfig,
        cfg: &TrainConfig,
    ) -> Result<Self, PipelineError> {
        cfg.validate()?;
        if anchor.dims != movie.dims() {
            return Err(PipelineError::DimsMismatch { got: anchor.dims, want: movie.dims() });
        }
        let adam = Adam::new(&init, cfg.learning_rate, cfg.beta1, cfg.beta2);
        Ok(Self {
            params: init,
            adam,
            movie: movie.clone(),
            anchor: anchor.clone(),
            model_cfg: model_cfg.clone(),
            cfg: cfg.clone(),
            set: make_elements(),
            rng: ChaCha8Rng::seed_from_u64(cfg.sub_seed("temporal-order")),
            order: Vec::new(),
            pos: 0,
            step: 0,
            losses: Vec::new(),
        })
    }

    fn next_frame(&mut self) -> usize {
        if self.pos >= self.order.len() {
            self.order = (0..self.movie.num_frames()).collect();
            if self.cfg.temporal_mode == TemporalMode::Joint {
                self.order.shuffle(&mut self.rng);
            }
            self.pos = 0;
        }
        let t = self.order[self.pos];
        self.pos += 1;
        t
    }

    /// One gradient step on the temporal loss of the next frame in the
    /// visit order. Returns the frame index along with the loss terms.
    pub fn step(&mut self) -> Result<(usize, LossTerms), PipelineError> {
        let t = self.next_frame();
        let frame = self.movie.frames[t].clone();
        let ctx = StepContext { model_cfg: &self.model_cfg, cfg: &self.cfg, set: &self.set };
        let terms = train_step(
            &ctx,
            &mut self.params,
            &mut self.adam,
            &frame,
            Some(&self.anchor),
            self.step,
        )?;
        self.step += 1;
        self.losses.push(terms);
        Ok((t, terms))
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_output(self) -> TemporalOutput {
        TemporalOutput { params: TemporalParams::Shared(self.params), losses: self.losses }
    }
}

/// Temporal stage entry point honoring the configured mode.
pub fn train_temporal(
    movie: &Movie4D,
    anchor: &Volume3D,
    init: &ModelParams,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TemporalOutput, PipelineError> {
    match cfg.temporal_mode {
        TemporalMode::Joint | TemporalMode::Sequential => {
            let mut trainer =
                TemporalTrainer::new(movie, anchor, init.clone(), model_cfg, cfg)?;
            for _ in 0..cfg.steps_temporal {
                trainer.step()?;
            }
            Ok(trainer.into_output())
        }
        TemporalMode::PerFrame => {
            let frames = movie.num_frames();
            let per_frame_steps = (cfg.steps_temporal / frames).max(1);
            let mut ps = Vec::with_capacity(frames);
            let mut losses = Vec::new();
            let set = make_elements();
            for t in 0..frames {
                let mut params = init.clone();
                let mut adam = Adam::new(&params, cfg.learning_rate, cfg.beta1, cfg.beta2);
                let ctx = StepContext { model_cfg, cfg, set: &set };
                for k in 0..per_frame_steps {
                    let terms = train_step(
                        &ctx,
                        &mut params,
                        &mut adam,
                        &movie.frames[t],
                        Some(anchor),
                        t * per_frame_steps + k,
                    )?;
                    losses.push(terms);
                }
                ps.push(params);
            }
            Ok(TemporalOutput { params: TemporalParams::PerFrame(ps), losses })
        }
    }
}

/// Inference options for [`segment_movie`].
#[derive(Debug, Clone, Copy)]
pub struct SegmentOptions {
    /// Apply the axial moving-average post-processing to the segmentation
    /// movie.
    pub z_smooth: bool,
    /// Also produce the per-frame skeleton movie.
    pub skeletons: bool,
    pub skeleton_cfg: SkeletonConfig,
    /// Worker threads for the frame loop (frames are independent, so the
    /// result does not depend on the schedule).
    pub threads: usize,
}

impl Default for SegmentOptions {
    fn default() -> Self {
        Self { z_smooth: true, skeletons: false, skeleton_cfg: SkeletonConfig::default(), threads: 1 }
    }
}

fn segment_frame(
    params: &ModelParams,
    model_cfg: &ModelConfig,
    frame: &Volume3D,
    opts: &SegmentOptions,
) -> Result<(Volume3D, Option<Volume3D>), PipelineError> {
    let seg = forward_volume(params, model_cfg, frame, false)?;
    let k = if opts.skeletons {
        Some(anchor_skeleton(&seg.s, &opts.skeleton_cfg)?)
    } else {
        None
    };
    Ok((seg.s, k))
}

/// Per-frame forward pass over a whole movie, with optional axial smoothing
/// and per-frame skeletons.
pub fn segment_movie(
    movie: &Movie4D,
    params: &TemporalParams,
    model_cfg: &ModelConfig,
    opts: &SegmentOptions,
) -> Result<(Movie4D, Option<Movie4D>), PipelineError> {
    let n = movie.num_frames();
    let threads = opts.threads.max(1).min(n);
    let mut seg_frames: Vec<Option<Volume3D>> = vec![None; n];
    let mut skel_frames: Vec<Option<Volume3D>> = vec![None; n];

    if threads == 1 {
        for t in 0..n {
            let (s, k) = segment_frame(params.for_frame(t), model_cfg, &movie.frames[t], opts)?;
            seg_frames[t] = Some(s);
            skel_frames[t] = k;
        }
    } else {
        let results: Vec<Result<(usize, Volume3D, Option<Volume3D>), PipelineError>> =
            std::thread::scope(|scope| {
                let mut handles = Vec::new();
                for chunk in 0..threads {
                    let params = &params;
                    let opts = &opts;
                    let movie = &movie;
                    handles.push(scope.spawn(move || {
                        let mut out = Vec::new();
                        let mut t = chunk;
                        while t < n {
                            match segment_frame(
                                params.for_frame(t),
                                model_cfg,
                                &movie.frames[t],
                                opts,
                            ) {
                                Ok((s, k)) => out.push(Ok((t, s, k))),
                                Err(e) => out.push(Err(e)),
                            }
                            t += threads;
                        }
                        out
                    }));
                }
                handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
            });
        for r in results {
            let (t, s, k) = r?;
            seg_frames[t] = Some(s);
            skel_frames[t] = k;
        }
    }

    let seg = Movie4D::new(
        seg_frames.into_iter().map(|f| f.expect("frame segmented")).collect(),
        movie.frame_rate_hz,
    )?;
    let seg = if opts.z_smooth { z_moving_average(&seg) } else { seg };
    let skel = if opts.skeletons {
        Some(Movie4D::new(
            skel_frames.into_iter().map(|f| f.expect("frame skeletonized")).collect(),
            movie.frame_rate_hz,
        )?)
    } else {
        None
    };
    Ok((seg, skel))
}

/// Writes the parameter map: magic, version, entry count, then per entry
/// the path, shape, and float32 payload, all little-endian, in map order.
pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<(), PipelineError> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(&V4DP_MAGIC)?;
    w.write_all(&[V4DP_VERSION, 0, 0, 0])?;
    w.write_all(&(params.entries.len() as u32).to_le_bytes())?;
    for (path, p) in &params.entries {
        let name = path.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(p.shape.len() as u8).to_le_bytes())?;
        for &d in &p.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &p.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams, PipelineError> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let corrupt = |reason: &str| PipelineError::CheckpointCorrupt { reason: reason.into() };

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| corrupt("truncated magic"))?;
    if magic != V4DP_MAGIC {
        return Err(PipelineError::CheckpointMagic { found: magic });
    }
    let mut head = [0u8; 4];
    r.read_exact(&mut head).map_err(|_| corrupt("truncated header"))?;
    if head[0] != V4DP_VERSION {
        return Err(PipelineError::CheckpointVersion { found: head[0] });
    }
    let mut cnt = [0u8; 4];
    r.read_exact(&mut cnt).map_err(|_| corrupt("truncated entry count"))?;
    let count = u32::from_le_bytes(cnt) as usize;

    let mut entries = BTreeMap::new();
    for _ in 0..count {
        let mut len2 = [0u8; 2];
        r.read_exact(&mut len2).map_err(|_| corrupt("truncated path length"))?;
        let mut name = vec![0u8; u16::from_le_bytes(len2) as usize];
        r.read_exact(&mut name).map_err(|_| corrupt("truncated path"))?;
        let path = String::from_utf8(name).map_err(|_| corrupt("non-utf8 path"))?;
        let mut nd = [0u8; 1];
        r.read_exact(&mut nd).map_err(|_| corrupt("truncated rank"))?;
        let mut shape = Vec::with_capacity(nd[0] as usize);
        for _ in 0..nd[0] {
            let mut d4 = [0u8; 4];
            r.read_exact(&mut d4).map_err(|_| corrupt("truncated shape"))?;
            shape.push(u32::from_le_bytes(d4) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut payload = vec![0u8; 4 * numel];
        r.read_exact(&mut payload).map_err(|_| corrupt("truncated payload"))?;
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.insert(path, Param { shape, values });
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(corrupt("trailing bytes after last entry"));
    }
    Ok(ModelParams { entries })
}
