//! Synthetic photon-sparse 4D vessel movies with exact ground truth.
//!
//! A phantom is a set of z-monotone tubes with a soft sigmoid wall, driven
//! by propagating dilation/constriction events, imaged under Poisson photon
//! statistics with depth-dependent attenuation. Truth comes in three parts:
//! the binary mask movie, the per-(z, t) radius table, and the per-(event,
//! z) onset table computed from the continuous cross-section area waveform
//! with the same 20%-of-amplitude convention the onset detector uses.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{Movie4D, RoiRect, VesselROI, Volume3D};

/// Half-width in seconds of the raised-cosine event waveform (full support
/// is twice this).
pub const EVENT_HALF_WIDTH_S: f64 = 1.0;
/// Amplitude fraction at which an onset is declared, shared with the
/// detector.
pub const ONSET_FRACTION: f64 = 0.2;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("phantom spec invalid: {0}")]
    BadSpec(String),
    #[error("vessel {vessel} leaves the volume bounds at z={z} (centre {cy:.1},{cx:.1}, radius {r_vox:.1} voxels)")]
    TubeOutOfBounds { vessel: usize, z: usize, cy: f64, cx: f64, r_vox: f64 },
    #[error("dims mismatch: {lhs:?} vs {rhs:?}")]
    DimsMismatch { lhs: (usize, usize, usize), rhs: (usize, usize, usize) },
    #[error("masks must be strictly binary (value {value} at index {index})")]
    NonBinary { index: usize, value: f32 },
}

/// Constant or linearly tapered base radius profile, micrometres.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RadiusProfile {
    Constant(f64),
    /// `[top, bottom]`, linearly interpolated over the z extent.
    Taper([f64; 2]),
}

impl RadiusProfile {
    pub fn at(&self, z_fraction: f64) -> f64 {
        match *self {
            RadiusProfile::Constant(r) => r,
            RadiusProfile::Taper([top, bottom]) => top + (bottom - top) * z_fraction,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VesselSpec {
    /// z-monotone polyline of `[z, y, x]` voxel coordinates.
    pub centerline: Vec<[f64; 3]>,
    pub radius_um: RadiusProfile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Dilation,
    Constriction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventDirection {
    /// Wave starts at the deepest slice and travels toward the surface.
    Upward,
    /// Wave starts at the shallowest slice and travels downward.
    Downward,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EventSpec {
    pub kind: EventKind,
    /// Time the wave starts at its origin end, seconds.
    pub onset_s: f64,
    /// Peak fractional radius change, in (0, 1).
    pub amplitude: f64,
    pub speed_um_per_s: f64,
    pub direction: EventDirection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    /// `(T, Z, Y, X)`.
    pub dims: (usize, usize, usize, usize),
    pub frame_rate_hz: f32,
    /// Base voxel size, micrometres per axis `(z, y, x)` at magnification 1.
    pub voxel_size_um: [f64; 3],
    pub origin_depth_um: f64,
    pub vessels: Vec<VesselSpec>,
    pub events: Vec<EventSpec>,
    /// Mean photons per voxel per frame at the surface, inside a vessel.
    pub photon_rate_scale: f64,
    pub depth_attenuation_um: f64,
    /// Optical magnification; scales voxel density (voxel size divides by
    /// it), so the same tube spans proportionally more voxels.
    pub magnification: f64,
    /// Skip photon statistics and emit the clean intensity profile.
    pub noiseless: bool,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: (16, 16, 32, 32),
            frame_rate_hz: 20.0,
            voxel_size_um: [3.0, 1.0, 1.0],
            origin_depth_um: 0.0,
            vessels: vec![VesselSpec {
                centerline: vec![[0.0, 16.0, 16.0], [15.0, 16.0, 16.0]],
                radius_um: RadiusProfile::Constant(4.0),
            }],
            events: vec![],
            photon_rate_scale: 0.5,
            depth_attenuation_um: 50.0,
            magnification: 1.0,
            noiseless: false,
            seed: 1,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let (t, z, y, x) = self.dims;
        if t == 0 || z == 0 || y == 0 || x == 0 {
            return Err(PhantomError::BadSpec("dims must be positive".into()));
        }
        if !(self.frame_rate_hz > 0.0) {
            return Err(PhantomError::BadSpec("frame rate must be positive".into()));
        }
        if self.vessels.is_empty() {
            return Err(PhantomError::BadSpec("need at least one vessel".into()));
        }
        for (i, v) in self.vessels.iter().enumerate() {
            if v.centerline.len() < 2 {
                return Err(PhantomError::BadSpec(format!(
                    "vessel {i} centerline needs at least two points"
                )));
            }
            if v.centerline.windows(2).any(|w| w[1][0] <= w[0][0]) {
                return Err(PhantomError::BadSpec(format!(
                    "vessel {i} centerline must be strictly z-monotone"
                )));
            }
        }
        for (i, e) in self.events.iter().enumerate() {
            if !(e.amplitude > 0.0 && e.amplitude < 1.0) {
                return Err(PhantomError::BadSpec(format!(
                    "event {i} amplitude must lie in (0,1)"
                )));
            }
            if !(e.speed_um_per_s > 0.0) {
                return Err(PhantomError::BadSpec(format!("event {i} speed must be positive")));
            }
        }
        if !(self.magnification > 0.0) {
            return Err(PhantomError::BadSpec("magnification must be positive".into()));
        }
        if !(self.depth_attenuation_um > 0.0) {
            return Err(PhantomError::BadSpec("attenuation length must be positive".into()));
        }
        Ok(())
    }

    /// Effective voxel size after magnification.
    pub fn voxel_um(&self) -> [f64; 3] {
        [
            self.voxel_size_um[0] / self.magnification,
            self.voxel_size_um[1] / self.magnification,
            self.voxel_size_um[2] / self.magnification,
        ]
    }

    pub fn depth_um(&self, z: usize) -> f64 {
        self.origin_depth_um + z as f64 * self.voxel_um()[0]
    }
}

/// Raised-cosine unit bump, peak 1 at `u = 0`, support `|u| <= W`.
pub fn event_bump(u: f64) -> f64 {
    if u.abs() >= EVENT_HALF_WIDTH_S {
        0.0
    } else {
        0.5 * (1.0 + (std::f64::consts::PI * u / EVENT_HALF_WIDTH_S).cos())
    }
}

fn event_delay_s(spec: &PhantomSpec, e: &EventSpec, z: usize) -> f64 {
    let depth = spec.depth_um(z);
    let (d0, d1) = (spec.depth_um(0), spec.depth_um(spec.dims.1 - 1));
    match e.direction {
        EventDirection::Upward => (d1 - depth) / e.speed_um_per_s,
        EventDirection::Downward => (depth - d0) / e.speed_um_per_s,
    }
}

/// True radius of a vessel at slice `z` and time `t_s`, micrometres.
pub fn true_radius_um(spec: &PhantomSpec, vessel: &VesselSpec, z: usize, t_s: f64) -> f64 {
    let zf = if spec.dims.1 > 1 { z as f64 / (spec.dims.1 - 1) as f64 } else { 0.0 };
    let r0 = vessel.radius_um.at(zf);
    let mut factor = 1.0;
    for e in &spec.events {
        let u = t_s - e.onset_s - event_delay_s(spec, e, z);
        let g = event_bump(u);
        match e.kind {
            EventKind::Dilation => factor += e.amplitude * g,
            EventKind::Constriction => factor -= e.amplitude * g,
        }
    }
    r0 * factor
}

/// Interpolated in-plane centre of a vessel at voxel slice `z`.
fn center_at(vessel: &VesselSpec, z: f64) -> (f64, f64) {
    let line = &vessel.centerline;
    if z <= line[0][0] {
        return (line[0][1], line[0][2]);
    }
    for w in line.windows(2) {
        if z <= w[1][0] {
            let f = (z - w[0][0]) / (w[1][0] - w[0][0]);
            return (w[0][1] + f * (w[1][1] - w[0][1]), w[0][2] + f * (w[1][2] - w[0][2]));
        }
    }
    let last = line.last().unwrap();
    (last[1], last[2])
}

/// Ground truth accompanying a generated movie.
#[derive(Debug, Clone)]
pub struct PhantomTruth {
    /// Binary vessel mask per frame (0/1 values).
    pub mask: Movie4D,
    /// `(vessel, z, t, radius_um)` samples.
    pub radius: Vec<(usize, usize, usize, f64)>,
    /// `(event, z, onset_s)` from the continuous area waveform.
    pub onsets: Vec<(usize, usize, f64)>,
}

impl PhantomTruth {
    pub fn radius_csv(&self) -> String {
        let mut out = String::from("vessel_id,z,t,radius_um\n");
        for (v, z, t, r) in &self.radius {
            out.push_str(&format!("{v},{z},{t},{r}\n"));
        }
        out
    }

    pub fn onsets_csv(&self) -> String {
        let mut out = String::from("event_id,z,onset_s\n");
        for (e, z, s) in &self.onsets {
            out.push_str(&format!("{e},{z},{s}\n"));
        }
        out
    }
}

/// Onset of one event at one slice on the continuous radius waveform: the
/// first time the cross-section area change reaches 20% of the event's
/// amplitude. Solved by bisection on the monotone leading edge.
fn truth_onset(spec: &PhantomSpec, event_idx: usize, z: usize) -> f64 {
    let e = &spec.events[event_idx];
    let arrival = e.onset_s + event_delay_s(spec, e, z);
    let base = 1.0f64;
    let peak = match e.kind {
        EventKind::Dilation => 1.0 + e.amplitude,
        EventKind::Constriction => 1.0 - e.amplitude,
    };
    let target = ONSET_FRACTION * (peak * peak - base * base).abs();
    let delta = |u: f64| -> f64 {
        let g = event_bump(u);
        let f = match e.kind {
            EventKind::Dilation => 1.0 + e.amplitude * g,
            EventKind::Constriction => 1.0 - e.amplitude * g,
        };
        (f * f - base * base).abs()
    };
    let (mut lo, mut hi) = (-EVENT_HALF_WIDTH_S, 0.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if delta(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    arrival + 0.5 * (lo + hi)
}

/// Generates the noisy movie and its ground truth.
pub fn generate(spec: &PhantomSpec) -> Result<(Movie4D, PhantomTruth), PhantomError> {
    spec.validate()?;
    let (td, zd, yd, xd) = spec.dims;
    let vox = spec.voxel_um();
    let wall_um = vox[1].min(vox[2]);

    // per-slice centres once; radii are time-dependent
    let centers: Vec<Vec<(f64, f64)>> = spec
        .vessels
        .iter()
        .map(|v| (0..zd).map(|z| center_at(v, z as f64)).collect())
        .collect();

    // bounds check against the maximum radius any event can reach
    for (vi, v) in spec.vessels.iter().enumerate() {
        let max_gain: f64 = 1.0
            + spec
                .events
                .iter()
                .filter(|e| e.kind == EventKind::Dilation)
                .map(|e| e.amplitude)
                .sum::<f64>();
        for z in 0..zd {
            let zf = if zd > 1 { z as f64 / (zd - 1) as f64 } else { 0.0 };
            let r_vox = v.radius_um.at(zf) * max_gain / vox[1].min(vox[2]);
            let (cy, cx) = centers[vi][z];
            if cy - r_vox < 0.0
                || cx - r_vox < 0.0
                || cy + r_vox > (yd - 1) as f64
                || cx + r_vox > (xd - 1) as f64
            {
                return Err(PhantomError::TubeOutOfBounds { vessel: vi, z, cy, cx, r_vox });
            }
        }
    }

    let mut frames = Vec::with_capacity(td);
    let mut mask_frames = Vec::with_capacity(td);
    let mut radius = Vec::new();

    for t in 0..td {
        let t_s = t as f64 / spec.frame_rate_hz as f64;
        // independent RNG stream per frame: results do not depend on the
        // generation schedule
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(t as u64 + 1);

        let radii: Vec<Vec<f64>> = spec
            .vessels
            .iter()
            .map(|v| (0..zd).map(|z| true_radius_um(spec, v, z, t_s)).collect())
            .collect();
        for (vi, rs) in radii.iter().enumerate() {
            for (z, &r) in rs.iter().enumerate() {
                radius.push((vi, z, t, r));
            }
        }

        let mut data = vec![0.0f32; zd * yd * xd];
        let mut mask = vec![0.0f32; zd * yd * xd];
        for z in 0..zd {
            let atten = (-spec.depth_um(z) / spec.depth_attenuation_um).exp();
            for y in 0..yd {
                for x in 0..xd {
                    let mut intensity = 0.0f64;
                    let mut inside = false;
                    for (vi, _) in spec.vessels.iter().enumerate() {
                        let (cy, cx) = centers[vi][z];
                        let dy = (y as f64 - cy) * vox[1];
                        let dx = (x as f64 - cx) * vox[2];
                        let dist = (dy * dy + dx * dx).sqrt();
                        let r = radii[vi][z];
                        let s = 1.0 / (1.0 + ((dist - r) / wall_um).exp());
                        intensity = intensity.max(s);
                        inside |= dist <= r;
                    }
                    let idx = (z * yd + y) * xd + x;
                    mask[idx] = if inside { 1.0 } else { 0.0 };
                    data[idx] = if spec.noiseless {
                        intensity as f32
                    } else {
                        let lambda = intensity * spec.photon_rate_scale * atten;
                        if lambda > 0.0 {
                            Poisson::new(lambda).expect("positive lambda").sample(&mut rng) as f32
                        } else {
                            0.0
                        }
                    };
                }
            }
        }
        let meta = |mut v: Volume3D| {
            v.voxel_size_um = Some(vox);
            v.origin_depth_um = Some(spec.origin_depth_um);
            v
        };
        frames.push(meta(Volume3D { dims: (zd, yd, xd), data, voxel_size_um: None, origin_depth_um: None }));
        mask_frames.push(meta(Volume3D {
            dims: (zd, yd, xd),
            data: mask,
            voxel_size_um: None,
            origin_depth_um: None,
        }));
    }

    let mut onsets = Vec::new();
    for (ei, _) in spec.events.iter().enumerate() {
        for z in 0..zd {
            onsets.push((ei, z, truth_onset(spec, ei, z)));
        }
    }

    let movie = Movie4D::new(frames, spec.frame_rate_hz).map_err(|e| {
        PhantomError::BadSpec(format!("generated movie invalid: {e}"))
    })?;
    let mask = Movie4D::new(mask_frames, spec.frame_rate_hz)
        .map_err(|e| PhantomError::BadSpec(format!("generated mask invalid: {e}")))?;
    Ok((movie, PhantomTruth { mask, radius, onsets }))
}

/// Rectangle ROI covering a vessel with `margin_vox` voxels of slack on
/// every annotated slice.
pub fn default_roi(spec: &PhantomSpec, vessel_idx: usize, margin_vox: usize) -> VesselROI {
    let (_, zd, yd, xd) = spec.dims;
    let vessel = &spec.vessels[vessel_idx];
    let vox = spec.voxel_um();
    let max_gain: f64 = 1.0 + spec.events.iter().map(|e| e.amplitude).sum::<f64>();
    let slices = (0..zd)
        .map(|z| {
            let (cy, cx) = center_at(vessel, z as f64);
            let zf = if zd > 1 { z as f64 / (zd - 1) as f64 } else { 0.0 };
            let r_vox = vessel.radius_um.at(zf) * max_gain / vox[1].min(vox[2]);
            let span = r_vox.ceil() as usize + margin_vox;
            RoiRect {
                z,
                y0: (cy as usize).saturating_sub(span),
                y1: (cy as usize + span + 1).min(yd),
                x0: (cx as usize).saturating_sub(span),
                x1: (cx as usize + span + 1).min(xd),
            }
        })
        .collect();
    VesselROI { id: vessel_idx as u32, slices }
}

/// Dice overlap `2|A∩B| / (|A|+|B|)` between strictly binary volumes;
/// two empty masks count as a perfect match.
pub fn dice(a: &Volume3D, b: &Volume3D) -> Result<f64, PhantomError> {
    if a.dims != b.dims {
        return Err(PhantomError::DimsMismatch { lhs: a.dims, rhs: b.dims });
    }
    let check = |v: &Volume3D| -> Result<(), PhantomError> {
        match v.data.iter().position(|&x| x != 0.0 && x != 1.0) {
            Some(index) => Err(PhantomError::NonBinary { index, value: v.data[index] }),
            None => Ok(()),
        }
    };
    check(a)?;
    check(b)?;
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (x, y) = (x == 1.0, y == 1.0);
        inter += (x && y) as usize;
        total += x as usize + y as usize;
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Dice against a movie's frame, for binary `Vec<bool>` predictions.
pub fn dice_bool(pred: &[bool], truth: &Volume3D) -> f64 {
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&p, &t) in pred.iter().zip(&truth.data) {
        let t = t == 1.0;
        inter += (p && t) as usize;
        total += p as usize + t as usize;
    }
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}
