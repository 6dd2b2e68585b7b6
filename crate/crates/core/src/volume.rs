//! 4D movie data model, bit-exact V4D container I/O, and the movie-level
//! pre/post-processing steps (normalization, temporal binning, axial
//! smoothing, ROI sums).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// V4D container magic bytes.
pub const V4D_MAGIC: [u8; 4] = *b"V4DM";
/// Current container version.
pub const V4D_VERSION: u8 = 1;
/// Only supported payload dtype: float32 little-endian.
pub const V4D_DTYPE_F32: u8 = 0x01;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("bad magic: expected \"V4DM\", found {found:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported container version {found} (supported: {V4D_VERSION})")]
    UnsupportedVersion { found: u8 },
    #[error("unsupported dtype byte {found:#04x} (supported: {V4D_DTYPE_F32:#04x} = float32 LE)")]
    UnsupportedDtype { found: u8 },
    #[error("truncated {field}: needed {needed} bytes, got {got}")]
    Truncated {
        field: &'static str,
        needed: usize,
        got: usize,
    },
    #[error("trailing data after payload: {extra} unexpected bytes")]
    TrailingData { extra: usize },
    #[error("zero-frame movie cannot be saved")]
    EmptyMovie,
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("dims must be strictly positive, got ({z},{y},{x})")]
    BadDims { z: usize, y: usize, x: usize },
    #[error("data length {len} does not match dims {z}*{y}*{x}")]
    LengthMismatch { len: usize, z: usize, y: usize, x: usize },
    #[error("frame {index} dims differ from frame 0")]
    InconsistentFrames { index: usize },
    #[error("frame rate must be positive, got {rate}")]
    BadFrameRate { rate: f32 },
    #[error("movie is constant (std = 0); normalization is degenerate")]
    DegenerateNormalization,
    #[error("temporal bin factor must be >= 1")]
    BadBinFactor,
    #[error("target rate {target_hz} Hz exceeds source rate {frame_rate} Hz")]
    TargetRateTooHigh { target_hz: f32, frame_rate: f32 },
    #[error("ROI for vessel {vessel_id} has no rectangle at z={z}")]
    MissingRoiSlice { vessel_id: u32, z: usize },
    #[error("ROI rectangle at z={z} out of bounds or empty (y {y0}..{y1}, x {x0}..{x1})")]
    BadRoiRect { z: usize, y0: usize, y1: usize, x0: usize, x1: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("roi parse error: {0}")]
    RoiParse(#[from] serde_json::Error),
}

/// A single 3D intensity volume with `(z, y, x)` voxel layout, x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    pub dims: (usize, usize, usize),
    pub data: Vec<f32>,
    /// Voxel edge lengths in micrometres per axis (z, y, x), when known.
    pub voxel_size_um: Option<[f64; 3]>,
    /// Depth of the z=0 slice below the pial surface, in micrometres.
    pub origin_depth_um: Option<f64>,
}

impl Volume3D {
    pub fn new(dims: (usize, usize, usize), data: Vec<f32>) -> Result<Self, VolumeError> {
        let (z, y, x) = dims;
        if z == 0 || y == 0 || x == 0 {
            return Err(VolumeError::BadDims { z, y, x });
        }
        if data.len() != z * y * x {
            return Err(VolumeError::LengthMismatch { len: data.len(), z, y, x });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite { index });
        }
        Ok(Self { dims, data, voxel_size_um: None, origin_depth_um: None })
    }

    pub fn zeros(dims: (usize, usize, usize)) -> Self {
        let (z, y, x) = dims;
        Self { dims, data: vec![0.0; z * y * x], voxel_size_um: None, origin_depth_um: None }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims.1 + y) * self.dims.2 + x
    }

    #[inline]
    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    /// Depth below the pial surface of slice `z`, in micrometres.
    pub fn depth_um(&self, z: usize) -> f64 {
        let dz = self.voxel_size_um.map(|v| v[0]).unwrap_or(1.0);
        self.origin_depth_um.unwrap_or(0.0) + z as f64 * dz
    }
}

/// Time-ordered stack of co-registered 3D volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct Movie4D {
    pub frames: Vec<Volume3D>,
    pub frame_rate_hz: f32,
}

impl Movie4D {
    pub fn new(frames: Vec<Volume3D>, frame_rate_hz: f32) -> Result<Self, VolumeError> {
        if frames.is_empty() {
            return Err(VolumeError::EmptyMovie);
        }
        if !(frame_rate_hz.is_finite() && frame_rate_hz > 0.0) {
            return Err(VolumeError::BadFrameRate { rate: frame_rate_hz });
        }
        let dims = frames[0].dims;
        for (index, f) in frames.iter().enumerate() {
            if f.dims != dims {
                return Err(VolumeError::InconsistentFrames { index });
            }
        }
        Ok(Self { frames, frame_rate_hz })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.frames[0].dims
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }
}

/// Per-slice rectangular annotation of one penetrating vessel.
///
/// Rectangles are half-open: voxels with `y0 <= y < y1`, `x0 <= x < x1`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct RoiRect {
    pub z: usize,
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct VesselROI {
    pub id: u32,
    pub slices: Vec<RoiRect>,
}

impl VesselROI {
    pub fn rect_at(&self, z: usize) -> Option<&RoiRect> {
        self.slices.iter().find(|r| r.z == z)
    }

    /// Checks invariants against a volume's dims: rectangles in bounds,
    /// non-empty, and at most one rectangle per z.
    pub fn validate(&self, dims: (usize, usize, usize)) -> Result<(), VolumeError> {
        let mut seen = std::collections::HashSet::new();
        for r in &self.slices {
            let ok = r.z < dims.0
                && r.y0 < r.y1
                && r.x0 < r.x1
                && r.y1 <= dims.1
                && r.x1 <= dims.2
                && seen.insert(r.z);
            if !ok {
                return Err(VolumeError::BadRoiRect {
                    z: r.z,
                    y0: r.y0,
                    y1: r.y1,
                    x0: r.x0,
                    x1: r.x1,
                });
            }
        }
        Ok(())
    }
}

/// ROI annotation document: `{"vessels":[{"id":..,"slices":[..]}]}`.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct RoiFile {
    pub vessels: Vec<VesselROI>,
}

pub fn load_rois(path: impl AsRef<Path>) -> Result<RoiFile, VolumeError> {
    let file = File::open(path)?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

pub fn save_rois(rois: &RoiFile, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, rois)?;
    w.flush()?;
    Ok(())
}

/// Statistics recorded by [`normalize`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NormalizationRecord {
    pub mean: f64,
    pub std: f64,
    pub post_stretch_min: f64,
    pub post_stretch_max: f64,
}

fn read_exact_field<R: Read>(
    r: &mut R,
    buf: &mut [u8],
    field: &'static str,
) -> Result<(), VolumeError> {
    let mut got = 0;
    while got < buf.len() {
        let n = r.read(&mut buf[got..])?;
        if n == 0 {
            return Err(VolumeError::Truncated { field, needed: buf.len(), got });
        }
        got += n;
    }
    Ok(())
}

/// Loads a movie from the V4D container.
///
/// Layout: magic `"V4DM"`, version byte, dtype byte (0x01 = float32 LE), two
/// reserved zero bytes, four u32 LE dims `(T, Z, Y, X)`, one f32 LE frame
/// rate in Hz, then the payload row-major with x fastest.
pub fn load_v4d(path: impl AsRef<Path>) -> Result<Movie4D, VolumeError> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact_field(&mut r, &mut magic, "magic")?;
    if magic != V4D_MAGIC {
        return Err(VolumeError::BadMagic { found: magic });
    }
    let mut head = [0u8; 4];
    read_exact_field(&mut r, &mut head, "version/dtype/reserved")?;
    if head[0] != V4D_VERSION {
        return Err(VolumeError::UnsupportedVersion { found: head[0] });
    }
    if head[1] != V4D_DTYPE_F32 {
        return Err(VolumeError::UnsupportedDtype { found: head[1] });
    }

    let mut dims_raw = [0u8; 16];
    read_exact_field(&mut r, &mut dims_raw, "dims")?;
    let dim = |i: usize| {
        u32::from_le_bytes(dims_raw[4 * i..4 * i + 4].try_into().unwrap()) as usize
    };
    let (t, z, y, x) = (dim(0), dim(1), dim(2), dim(3));
    if t == 0 {
        return Err(VolumeError::EmptyMovie);
    }

    let mut rate_raw = [0u8; 4];
    read_exact_field(&mut r, &mut rate_raw, "frame_rate")?;
    let frame_rate_hz = f32::from_le_bytes(rate_raw);

    let frame_len = z
        .checked_mul(y)
        .and_then(|v| v.checked_mul(x))
        .filter(|v| *v > 0)
        .ok_or(VolumeError::BadDims { z, y, x })?;

    let mut payload = vec![0u8; 4 * frame_len];
    let mut frames = Vec::with_capacity(t);
    for _ in 0..t {
        read_exact_field(&mut r, &mut payload, "payload")?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        frames.push(Volume3D::new((z, y, x), data)?);
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        let extra = 1 + std::io::copy(&mut r, &mut std::io::sink())? as usize;
        return Err(VolumeError::TrailingData { extra });
    }

    Movie4D::new(frames, frame_rate_hz)
}

/// Saves a movie to the V4D container; round trips through [`load_v4d`]
/// bit-exactly.
pub fn save_v4d(movie: &Movie4D, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    if movie.frames.is_empty() {
        return Err(VolumeError::EmptyMovie);
    }
    for frame in &movie.frames {
        if let Some(index) = frame.data.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite { index });
        }
    }
    let (z, y, x) = movie.dims();
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(&V4D_MAGIC)?;
    w.write_all(&[V4D_VERSION, V4D_DTYPE_F32, 0, 0])?;
    for d in [movie.num_frames(), z, y, x] {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(&movie.frame_rate_hz.to_le_bytes())?;
    for frame in &movie.frames {
        for v in &frame.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Saves a single volume as a T=1 movie.
pub fn save_volume(volume: &Volume3D, path: impl AsRef<Path>) -> Result<(), VolumeError> {
    let movie = Movie4D::new(vec![volume.clone()], 1.0)?;
    save_v4d(&movie, path)
}

/// Normalizes by the joint mean and standard deviation of the whole movie,
/// then stretches so the minimum maps to exactly 0 and the maximum to 1.
///
/// Statistics are accumulated in f64; the stretch makes the result invariant
/// to the affine z-score step, which is retained in the record for
/// provenance.
pub fn normalize(movie: &Movie4D) -> Result<(Movie4D, NormalizationRecord), VolumeError> {
    let n: usize = movie.frames.iter().map(|f| f.data.len()).sum();
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    for frame in &movie.frames {
        for &v in &frame.data {
            let v = v as f64;
            sum += v;
            sum_sq += v * v;
        }
    }
    let mean = sum / n as f64;
    let var = (sum_sq / n as f64 - mean * mean).max(0.0);
    let std = var.sqrt();
    if std == 0.0 {
        return Err(VolumeError::DegenerateNormalization);
    }

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for frame in &movie.frames {
        for &v in &frame.data {
            let z = (v as f64 - mean) / std;
            lo = lo.min(z);
            hi = hi.max(z);
        }
    }
    let span = hi - lo;

    let frames = movie
        .frames
        .iter()
        .map(|frame| {
            let data = frame
                .data
                .iter()
                .map(|&v| ((((v as f64) - mean) / std - lo) / span) as f32)
                .collect();
            Volume3D { data, ..frame.clone() }
        })
        .collect();

    let record = NormalizationRecord { mean, std, post_stretch_min: lo, post_stretch_max: hi };
    Ok((Movie4D { frames, frame_rate_hz: movie.frame_rate_hz }, record))
}

/// Per-voxel arithmetic mean over all frames.
pub fn time_collapse(movie: &Movie4D) -> Volume3D {
    let len = movie.frames[0].data.len();
    let mut acc = vec![0.0f64; len];
    for frame in &movie.frames {
        for (a, &v) in acc.iter_mut().zip(&frame.data) {
            *a += v as f64;
        }
    }
    let t = movie.num_frames() as f64;
    let data = acc.into_iter().map(|a| (a / t) as f32).collect();
    Volume3D { data, ..movie.frames[0].clone() }
}

/// Averages consecutive groups of `factor` frames; a trailing partial group
/// is dropped and the frame rate divides by `factor`.
pub fn temporal_bin(movie: &Movie4D, factor: usize) -> Result<Movie4D, VolumeError> {
    if factor < 1 {
        return Err(VolumeError::BadBinFactor);
    }
    if factor == 1 {
        return Ok(movie.clone());
    }
    let groups = movie.num_frames() / factor;
    if groups == 0 {
        return Err(VolumeError::EmptyMovie);
    }
    let len = movie.frames[0].data.len();
    let mut frames = Vec::with_capacity(groups);
    for gi in 0..groups {
        let mut acc = vec![0.0f64; len];
        for frame in &movie.frames[gi * factor..(gi + 1) * factor] {
            for (a, &v) in acc.iter_mut().zip(&frame.data) {
                *a += v as f64;
            }
        }
        let data = acc.into_iter().map(|a| (a / factor as f64) as f32).collect();
        frames.push(Volume3D { data, ..movie.frames[0].clone() });
    }
    Movie4D::new(frames, movie.frame_rate_hz / factor as f32)
}

/// Temporal binning with `factor = floor(frame_rate / target_hz)`.
///
/// Integer-factor binning accepts a non-exact achieved rate; the result
/// records the rate actually reached.
pub fn downsample_to_rate(movie: &Movie4D, target_hz: f32) -> Result<Movie4D, VolumeError> {
    if !(target_hz > 0.0) || target_hz > movie.frame_rate_hz {
        return Err(VolumeError::TargetRateTooHigh { target_hz, frame_rate: movie.frame_rate_hz });
    }
    let factor = (movie.frame_rate_hz / target_hz).floor() as usize;
    temporal_bin(movie, factor.max(1))
}

/// Window width used by [`z_moving_average`]: one tenth of the volume depth,
/// rounded, never below 1.
pub fn z_window_width(z_dim: usize) -> usize {
    ((z_dim as f64 / 10.0).round() as usize).max(1)
}

/// Sliding mean along z per frame and (y, x) column, window truncated at the
/// volume boundaries (mean over in-bounds voxels only).
///
/// For even widths the window leans one voxel forward:
/// `[z - (w-1)/2, z + w/2]`.
pub fn z_moving_average(movie: &Movie4D) -> Movie4D {
    let (zd, yd, xd) = movie.dims();
    let w = z_window_width(zd);
    if w == 1 {
        return movie.clone();
    }
    let lo_span = (w - 1) / 2;
    let hi_span = w / 2;
    let frames = movie
        .frames
        .iter()
        .map(|frame| {
            let mut data = vec![0.0f32; frame.data.len()];
            for y in 0..yd {
                for x in 0..xd {
                    for z in 0..zd {
                        let z0 = z.saturating_sub(lo_span);
                        let z1 = (z + hi_span).min(zd - 1);
                        let mut acc = 0.0f64;
                        for zz in z0..=z1 {
                            acc += frame.at(zz, y, x) as f64;
                        }
                        data[frame.index(z, y, x)] = (acc / (z1 - z0 + 1) as f64) as f32;
                    }
                }
            }
            Volume3D { data, ..frame.clone() }
        })
        .collect();
    Movie4D { frames, frame_rate_hz: movie.frame_rate_hz }
}

/// Sum of voxel values inside the vessel's rectangle at slice `z`.
pub fn roi_extract(volume: &Volume3D, roi: &VesselROI, z: usize) -> Result<f64, VolumeError> {
    let rect = roi
        .rect_at(z)
        .ok_or(VolumeError::MissingRoiSlice { vessel_id: roi.id, z })?;
    if rect.y1 > volume.dims.1 || rect.x1 > volume.dims.2 || z >= volume.dims.0 {
        return Err(VolumeError::BadRoiRect {
            z,
            y0: rect.y0,
            y1: rect.y1,
            x0: rect.x0,
            x1: rect.x1,
        });
    }
    let mut acc = 0.0f64;
    for y in rect.y0..rect.y1 {
        for x in rect.x0..rect.x1 {
            acc += volume.at(z, y, x) as f64;
        }
    }
    Ok(acc)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_movie(t: usize, dims: (usize, usize, usize), seed: u64) -> Movie4D {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames = (0..t)
            .map(|_| {
                let data = (0..dims.0 * dims.1 * dims.2)
                    .map(|_| rng.gen_range(-10.0f32..10.0))
                    .collect();
                Volume3D::new(dims, data).unwrap()
            })
            .collect();
        Movie4D::new(frames, 30.0).unwrap()
    }

    #[test]
    fn v4d_minimal_container_loads() {
        let dir = tempdir();
        let path = dir.join("min.v4d");
        let movie = Movie4D::new(
            vec![Volume3D::new((2, 2, 2), (0..8).map(|i| i as f32).collect()).unwrap()],
            10.0,
        )
        .unwrap();
        save_v4d(&movie, &path).unwrap();
        let loaded = load_v4d(&path).unwrap();
        assert_eq!(loaded.num_frames(), 1);
        assert_eq!(loaded.dims(), (2, 2, 2));
        assert_eq!(loaded.frames[0].data, movie.frames[0].data);
        assert_eq!(loaded.frame_rate_hz, 10.0);
    }

    #[test]
    fn v4d_bad_magic_is_reported() {
        let dir = tempdir();
        let path = dir.join("bad.v4d");
        std::fs::write(&path, b"XXXXrest-of-the-file").unwrap();
        match load_v4d(&path) {
            Err(VolumeError::BadMagic { found }) => assert_eq!(&found, b"XXXX"),
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn v4d_truncated_payload_is_reported() {
        let dir = tempdir();
        let path = dir.join("trunc.v4d");
        let movie = random_movie(2, (2, 2, 2), 3);
        save_v4d(&movie, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        match load_v4d(&path) {
            Err(VolumeError::Truncated { field, .. }) => assert_eq!(field, "payload"),
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn v4d_round_trip_is_bit_identical() {
        let dir = tempdir();
        let path = dir.join("rt.v4d");
        let movie = random_movie(4, (8, 8, 8), 7);
        save_v4d(&movie, &path).unwrap();
        let loaded = load_v4d(&path).unwrap();
        for (a, b) in movie.frames.iter().zip(&loaded.frames) {
            let ab: Vec<u32> = a.data.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(movie.frame_rate_hz.to_bits(), loaded.frame_rate_hz.to_bits());
    }

    #[test]
    fn v4d_rejects_empty_and_non_finite() {
        let dir = tempdir();
        let empty = Movie4D { frames: vec![], frame_rate_hz: 1.0 };
        assert!(matches!(save_v4d(&empty, dir.join("e.v4d")), Err(VolumeError::EmptyMovie)));

        let mut movie = random_movie(1, (2, 2, 2), 1);
        movie.frames[0].data[3] = f32::NAN;
        assert!(matches!(
            save_v4d(&movie, dir.join("n.v4d")),
            Err(VolumeError::NonFinite { index: 3 })
        ));
    }

    #[test]
    fn normalize_small_cases() {
        let movie = Movie4D::new(
            vec![Volume3D::new((1, 2, 2), vec![0.0, 1.0, 2.0, 3.0]).unwrap()],
            1.0,
        )
        .unwrap();
        let (out, rec) = normalize(&movie).unwrap();
        let want = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for (a, b) in out.frames[0].data.iter().zip(want) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
        assert!(rec.std > 0.0);

        let two = Movie4D::new(
            vec![Volume3D::new((1, 1, 2), vec![0.0, 1.0]).unwrap()],
            1.0,
        )
        .unwrap();
        let (out, _) = normalize(&two).unwrap();
        assert_eq!(out.frames[0].data, vec![0.0, 1.0]);
    }

    #[test]
    fn normalize_spans_unit_interval_and_preserves_order() {
        let movie = random_movie(3, (4, 4, 4), 11);
        let (out, _) = normalize(&movie).unwrap();
        let all: Vec<f32> = out.frames.iter().flat_map(|f| f.data.clone()).collect();
        let lo = all.iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = all.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert_eq!(lo, 0.0);
        assert_eq!(hi, 1.0);

        let orig: Vec<f32> = movie.frames.iter().flat_map(|f| f.data.clone()).collect();
        for i in 0..orig.len() {
            for j in (i + 1)..orig.len().min(i + 50) {
                if orig[i] < orig[j] {
                    assert!(all[i] <= all[j]);
                }
            }
        }
    }

    #[test]
    fn normalize_rejects_constant_movie() {
        let movie = Movie4D::new(
            vec![Volume3D::new((2, 2, 2), vec![5.0; 8]).unwrap()],
            1.0,
        )
        .unwrap();
        assert!(matches!(normalize(&movie), Err(VolumeError::DegenerateNormalization)));
    }

    #[test]
    fn time_collapse_matches_brute_force() {
        let movie = random_movie(8, (3, 4, 5), 23);
        let collapsed = time_collapse(&movie);
        for i in 0..collapsed.data.len() {
            let mean: f64 =
                movie.frames.iter().map(|f| f.data[i] as f64).sum::<f64>() / 8.0;
            assert!((collapsed.data[i] as f64 - mean).abs() < 1e-6);
        }

        let single = random_movie(1, (2, 2, 2), 5);
        assert_eq!(time_collapse(&single).data, single.frames[0].data);
    }

    #[test]
    fn time_collapse_of_mirrored_frames_is_constant() {
        let dims = (2, 2, 2);
        let a = random_movie(1, dims, 9).frames.remove(0);
        let c = 3.0f32;
        let b = Volume3D::new(dims, a.data.iter().map(|v| c - v).collect()).unwrap();
        let movie = Movie4D::new(vec![a, b], 1.0).unwrap();
        for v in &time_collapse(&movie).data {
            assert!((v - c / 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn temporal_bin_basics() {
        let movie = random_movie(7, (2, 2, 2), 31);
        assert_eq!(temporal_bin(&movie, 1).unwrap(), movie);

        let binned = temporal_bin(&movie, 2).unwrap();
        assert_eq!(binned.num_frames(), 3);
        for g in 0..3 {
            for i in 0..8 {
                let mean =
                    (movie.frames[2 * g].data[i] as f64 + movie.frames[2 * g + 1].data[i] as f64)
                        / 2.0;
                assert!((binned.frames[g].data[i] as f64 - mean).abs() < 1e-6);
            }
        }
        assert_eq!(binned.frame_rate_hz, 15.0);
    }

    #[test]
    fn temporal_bin_halves_acquisition_rate() {
        let mut movie = random_movie(4, (2, 2, 2), 37);
        movie.frame_rate_hz = 125.87;
        let binned = temporal_bin(&movie, 2).unwrap();
        assert!((binned.frame_rate_hz - 62.935).abs() < 1e-4);
    }

    #[test]
    fn downsample_to_rate_uses_floor_factor() {
        let mut movie = random_movie(8, (2, 2, 2), 41);
        movie.frame_rate_hz = 120.0;
        let out = downsample_to_rate(&movie, 60.0).unwrap();
        assert_eq!(out.num_frames(), 4);
        assert_eq!(out.frame_rate_hz, 60.0);

        movie.frame_rate_hz = 125.87;
        let out = downsample_to_rate(&movie, 60.0).unwrap();
        assert_eq!(out.num_frames(), 4);
        assert!((out.frame_rate_hz - 62.935).abs() < 1e-4);

        movie.frame_rate_hz = 60.0;
        let out = downsample_to_rate(&movie, 60.0).unwrap();
        assert_eq!(out.num_frames(), 8);
        assert!(matches!(
            downsample_to_rate(&movie, 61.0),
            Err(VolumeError::TargetRateTooHigh { .. })
        ));
    }

    #[test]
    fn z_moving_average_width_one_is_identity() {
        let movie = random_movie(2, (5, 3, 3), 43);
        assert_eq!(z_moving_average(&movie), movie);
    }

    #[test]
    fn z_moving_average_matches_sliding_window_oracle() {
        let zd = 20;
        let movie = random_movie(1, (zd, 2, 2), 47);
        let w = z_window_width(zd);
        assert_eq!(w, 2);
        let out = z_moving_average(&movie);
        let frame = &movie.frames[0];
        // oracle: forward-leaning window [z - (w-1)/2, z + w/2], truncated
        for y in 0..2 {
            for x in 0..2 {
                for z in 0..zd {
                    let z0 = z.saturating_sub((w - 1) / 2);
                    let z1 = (z + w / 2).min(zd - 1);
                    let vals: Vec<f64> =
                        (z0..=z1).map(|zz| frame.at(zz, y, x) as f64).collect();
                    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                    assert!((out.frames[0].at(z, y, x) as f64 - mean).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn z_moving_average_keeps_constants() {
        let movie = Movie4D::new(
            vec![Volume3D::new((30, 2, 2), vec![2.5; 120]).unwrap()],
            1.0,
        )
        .unwrap();
        let out = z_moving_average(&movie);
        for v in &out.frames[0].data {
            assert!((v - 2.5).abs() < 1e-6);
        }
    }

    #[test]
    fn roi_extract_cases() {
        let vol = Volume3D::new((2, 4, 4), vec![1.0; 32]).unwrap();
        let roi = VesselROI {
            id: 1,
            slices: vec![RoiRect { z: 0, y0: 1, y1: 3, x0: 0, x1: 3 }],
        };
        assert_eq!(roi_extract(&vol, &roi, 0).unwrap(), 6.0);
        assert!(matches!(
            roi_extract(&vol, &roi, 1),
            Err(VolumeError::MissingRoiSlice { vessel_id: 1, z: 1 })
        ));

        let zeros = Volume3D::zeros((2, 4, 4));
        assert_eq!(roi_extract(&zeros, &roi, 0).unwrap(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let data: Vec<f32> = (0..32).map(|_| rng.gen_range(0.0..5.0)).collect();
        let vol = Volume3D::new((2, 4, 4), data).unwrap();
        let mut brute = 0.0f64;
        for y in 1..3 {
            for x in 0..3 {
                brute += vol.at(0, y, x) as f64;
            }
        }
        assert!((roi_extract(&vol, &roi, 0).unwrap() - brute).abs() < 1e-9);
    }

    #[test]
    fn roi_json_round_trip() {
        let dir = tempdir();
        let path = dir.join("rois.json");
        let rois = RoiFile {
            vessels: vec![VesselROI {
                id: 3,
                slices: vec![RoiRect { z: 0, y0: 1, y1: 4, x0: 2, x1: 5 }],
            }],
        };
        save_rois(&rois, &path).unwrap();
        let loaded = load_rois(&path).unwrap();
        assert_eq!(loaded.vessels, rois.vessels);
        loaded.vessels[0].validate((2, 8, 8)).unwrap();
        assert!(loaded.vessels[0].validate((2, 3, 3)).is_err());
    }

    #[test]
    fn bin_then_collapse_equals_collapse_when_factor_divides() {
        let movie = random_movie(8, (2, 3, 3), 59);
        let a = time_collapse(&temporal_bin(&movie, 4).unwrap());
        let b = time_collapse(&movie);
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    pub(crate) fn tempdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "v4d-test-{}-{:?}",
            std::process::id(),
            std::thread::current().id()
        ));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }
}
