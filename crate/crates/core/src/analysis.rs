//! Per-depth vessel traces and the measurement suite built on them:
//! Pearson correlation structure across axial slices, zero-phase low-pass
//! filtering, vasoactivity onset detection and ordering, and equivalent
//! diameters.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{Movie4D, VesselROI, Volume3D, VolumeError};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("need at least {need} rows/frames, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("cutoff {cutoff_hz} Hz at or above Nyquist ({nyquist_hz} Hz)")]
    CutoffAboveNyquist { cutoff_hz: f64, nyquist_hz: f64 },
    #[error("no slice pairs qualify for (z_max, n) = ({z_max:?}, {n})")]
    NoQualifyingPairs { z_max: DepthCutoff, n: usize },
    #[error("empty vessel cross-section in ROI at z={z}")]
    EmptyCrossSection { z: usize },
    #[error("movies are not co-registered: {lhs:?} vs {rhs:?}")]
    NotCoRegistered { lhs: (usize, usize, usize), rhs: (usize, usize, usize) },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Per-depth-slice, per-frame vessel signal.
#[derive(Debug, Clone)]
pub struct TraceMatrix {
    /// One row per annotated slice, ascending z; `values[row][t]`.
    pub values: Vec<Vec<f64>>,
    pub z_indices: Vec<usize>,
    pub z_depths_um: Vec<f64>,
    pub frame_rate_hz: f64,
    pub vessel_id: u32,
}

impl TraceMatrix {
    pub fn num_slices(&self) -> usize {
        self.values.len()
    }

    pub fn num_frames(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    /// CSV with header `t_seconds,z_0,...,z_{Z-1}`, one row per frame.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t_seconds");
        for i in 0..self.num_slices() {
            out.push_str(&format!(",z_{i}"));
        }
        out.push('\n');
        for t in 0..self.num_frames() {
            out.push_str(&format!("{}", t as f64 / self.frame_rate_hz));
            for row in &self.values {
                out.push_str(&format!(",{}", row[t]));
            }
            out.push('\n');
        }
        out
    }
}

/// Sums the segmentation (or intensity-weighted segmentation) over the ROI
/// rectangle of every annotated slice, per frame.
pub fn vessel_trace(
    seg_movie: &Movie4D,
    intensity_movie: Option<&Movie4D>,
    roi: &VesselROI,
) -> Result<TraceMatrix, AnalysisError> {
    if let Some(intensity) = intensity_movie {
        if intensity.dims() != seg_movie.dims() {
            return Err(AnalysisError::NotCoRegistered {
                lhs: intensity.dims(),
                rhs: seg_movie.dims(),
            });
        }
    }
    let mut slices: Vec<_> = roi.slices.clone();
    slices.sort_by_key(|r| r.z);
    let t_count = seg_movie.num_frames();
    let mut values = Vec::with_capacity(slices.len());
    let mut z_indices = Vec::with_capacity(slices.len());
    let mut z_depths_um = Vec::with_capacity(slices.len());
    for rect in &slices {
        let mut row = Vec::with_capacity(t_count);
        for t in 0..t_count {
            let frame = &seg_movie.frames[t];
            let mut acc = 0.0f64;
            for y in rect.y0..rect.y1 {
                for x in rect.x0..rect.x1 {
                    let s = frame.at(rect.z, y, x) as f64;
                    acc += match intensity_movie {
                        Some(m) => s * m.frames[t].at(rect.z, y, x) as f64,
                        None => s,
                    };
                }
            }
            row.push(acc);
        }
        z_indices.push(rect.z);
        z_depths_um.push(seg_movie.frames[0].depth_um(rect.z));
        values.push(row);
    }
    Ok(TraceMatrix {
        values,
        z_indices,
        z_depths_um,
        frame_rate_hz: seg_movie.frame_rate_hz as f64,
        vessel_id: roi.id,
    })
}

/// Pearson correlation of two equal-length rows; NaN when either is
/// constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        f64::NAN
    } else {
        cov / (va.sqrt() * vb.sqrt())
    }
}

/// Z×Z Pearson matrix with the diagonal masked as NaN.
#[derive(Debug, Clone)]
pub struct CorrelationReport {
    pub matrix: Vec<Vec<f64>>,
    pub z_depths_um: Vec<f64>,
}

impl CorrelationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("z_um");
        for d in &self.z_depths_um {
            out.push_str(&format!(",{d}"));
        }
        out.push('\n');
        for (i, row) in self.matrix.iter().enumerate() {
            out.push_str(&format!("{}", self.z_depths_um[i]));
            for v in row {
                if v.is_nan() {
                    out.push_str(",nan");
                } else {
                    out.push_str(&format!(",{v}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

pub fn pearson_matrix(traces: &TraceMatrix) -> Result<CorrelationReport, AnalysisError> {
    if traces.num_frames() < 2 {
        return Err(AnalysisError::TooFew { need: 2, got: traces.num_frames() });
    }
    let z = traces.num_slices();
    let mut matrix = vec![vec![f64::NAN; z]; z];
    for i in 0..z {
        for j in (i + 1)..z {
            let r = pearson(&traces.values[i], &traces.values[j]);
            matrix[i][j] = r;
            matrix[j][i] = r;
        }
    }
    Ok(CorrelationReport { matrix, z_depths_um: traces.z_depths_um.clone() })
}

/// Depth cutoff for the neighbourhood-correlation average.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthCutoff {
    Max,
    Microns(f64),
}

/// Mean Pearson r over unordered slice pairs `(i, j)` with `|i-j| <= n`,
/// `i != j`, both within the depth cutoff. Constant rows (NaN entries) are
/// excluded from the average.
pub fn avg_neighbor_correlation(
    traces: &TraceMatrix,
    z_max: DepthCutoff,
    n: usize,
) -> Result<f64, AnalysisError> {
    let report = pearson_matrix(traces)?;
    let within = |idx: usize| match z_max {
        DepthCutoff::Max => true,
        DepthCutoff::Microns(um) => traces.z_depths_um[idx] <= um,
    };
    let mut acc = 0.0;
    let mut count = 0usize;
    let z = traces.num_slices();
    for i in 0..z {
        for j in (i + 1)..z.min(i + n + 1) {
            if within(i) && within(j) && !report.matrix[i][j].is_nan() {
                acc += report.matrix[i][j];
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(AnalysisError::NoQualifyingPairs { z_max, n });
    }
    Ok(acc / count as f64)
}

// ---------------------------------------------------------------------------
// zero-phase Butterworth low-pass
// ---------------------------------------------------------------------------

/// One digital biquad section, transposed direct form II.
#[derive(Debug, Clone, Copy)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2], // a1, a2 with a0 = 1
}

impl Biquad {
    /// Steady-state filter state for a constant input level `x0` (section
    /// DC gain is exactly 1 after normalization).
    fn steady_state(&self, x0: f64) -> [f64; 2] {
        let s2 = (self.b[2] - self.a[1]) * x0;
        let s1 = (self.b[1] + self.b[2] - self.a[0] - self.a[1]) * x0;
        [s1, s2]
    }

    fn run(&self, x: &[f64], out: &mut Vec<f64>) {
        let mut s = self.steady_state(x.first().copied().unwrap_or(0.0));
        out.clear();
        out.reserve(x.len());
        for &xi in x {
            let y = self.b[0] * xi + s[0];
            s[0] = self.b[1] * xi - self.a[0] * y + s[1];
            s[1] = self.b[2] * xi - self.a[1] * y;
            out.push(y);
        }
    }
}

/// Designs a Butterworth low-pass of even order as cascaded biquads via the
/// bilinear transform with prewarping; each section is normalized to unit
/// DC gain.
fn butterworth_lowpass(order: usize, cutoff_hz: f64, fs_hz: f64) -> Vec<Biquad> {
    assert!(order % 2 == 0, "cascaded-biquad design needs an even order");
    let k = 2.0 * fs_hz;
    let wc = k * (std::f64::consts::PI * cutoff_hz / fs_hz).tan();
    let n = order as f64;
    let mut sections = Vec::with_capacity(order / 2);
    for pair in 0..order / 2 {
        // pole angle in the left half plane
        let theta = std::f64::consts::PI * (2.0 * pair as f64 + 1.0 + n) / (2.0 * n);
        let re = wc * theta.cos();
        let mag2 = wc * wc;
        let c0 = k * k - 2.0 * re * k + mag2;
        let b_raw = mag2 / c0;
        let a1 = (2.0 * mag2 - 2.0 * k * k) / c0;
        let a2 = (k * k + 2.0 * re * k + mag2) / c0;
        // force exact unit DC gain against rounding
        let gain = (1.0 + a1 + a2) / (4.0 * b_raw);
        let b0 = b_raw * gain;
        sections.push(Biquad { b: [b0, 2.0 * b0, b0], a: [a1, a2] });
    }
    sections
}

fn filtfilt(sections: &[Biquad], x: &[f64], padlen: usize) -> Vec<f64> {
    let n = x.len();
    let pad = padlen.min(n.saturating_sub(1));
    // odd reflection keeps signal level and slope continuous at the edges
    let mut ext = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        ext.push(2.0 * x[0] - x[i]);
    }
    ext.extend_from_slice(x);
    for i in (1..=pad).rev() {
        ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
    }

    let mut buf = Vec::new();
    for s in sections {
        s.run(&ext, &mut buf);
        std::mem::swap(&mut ext, &mut buf);
    }
    ext.reverse();
    for s in sections {
        s.run(&ext, &mut buf);
        std::mem::swap(&mut ext, &mut buf);
    }
    ext.reverse();
    ext[pad..pad + n].to_vec()
}

/// Zero-phase low-pass: 4th-order Butterworth run forward then backward.
/// DC gain is exactly 1 and the phase response is identically zero.
pub fn lowpass(
    row: &[f64],
    frame_rate_hz: f64,
    cutoff_hz: f64,
) -> Result<Vec<f64>, AnalysisError> {
    if !(frame_rate_hz > 2.0 * cutoff_hz) {
        return Err(AnalysisError::CutoffAboveNyquist {
            cutoff_hz,
            nyquist_hz: frame_rate_hz / 2.0,
        });
    }
    if row.len() < 2 {
        return Ok(row.to_vec());
    }
    let sections = butterworth_lowpass(4, cutoff_hz, frame_rate_hz);
    // long reflection padding: the poles sit near the unit circle for deep
    // cutoff ratios and their transients decay slowly
    let padlen = (3.0 * frame_rate_hz / cutoff_hz).ceil() as usize;
    Ok(filtfilt(&sections, row, padlen))
}

/// Filters every row of a trace matrix.
pub fn lowpass_traces(
    traces: &TraceMatrix,
    cutoff_hz: f64,
) -> Result<TraceMatrix, AnalysisError> {
    let values = traces
        .values
        .iter()
        .map(|row| lowpass(row, traces.frame_rate_hz, cutoff_hz))
        .collect::<Result<_, _>>()?;
    Ok(TraceMatrix { values, ..traces.clone() })
}

// ---------------------------------------------------------------------------
// onset detection
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct OnsetParams {
    /// Derivative gate in units of the robust (MAD) std of the derivative.
    pub kappa: f64,
    /// Fraction of the per-slice event amplitude crossed at the onset.
    pub fraction: f64,
    /// Runs separated by less than this many seconds merge into one event.
    pub merge_gap_s: f64,
    /// Window extension on both sides of the gated run, seconds.
    pub extend_s: f64,
}

impl Default for OnsetParams {
    fn default() -> Self {
        Self { kappa: 2.0, fraction: 0.2, merge_gap_s: 0.2, extend_s: 0.6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnsetKind {
    Dilation,
    Constriction,
}

#[derive(Debug, Clone)]
pub struct DetectedEvent {
    pub event_id: usize,
    pub kind: OnsetKind,
    /// Event window in seconds.
    pub window_s: (f64, f64),
    /// Per trace row: onset in seconds, when the slice shows the event.
    pub onsets_s: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Default)]
pub struct OnsetTable {
    pub events: Vec<DetectedEvent>,
}

impl OnsetTable {
    /// CSV `event_id,kind,z_um,onset_s`.
    pub fn to_csv(&self, z_depths_um: &[f64]) -> String {
        let mut out = String::from("event_id,kind,z_um,onset_s\n");
        for e in &self.events {
            let kind = match e.kind {
                OnsetKind::Dilation => "dilation",
                OnsetKind::Constriction => "constriction",
            };
            for (row, onset) in e.onsets_s.iter().enumerate() {
                if let Some(s) = onset {
                    out.push_str(&format!("{},{},{},{}\n", e.event_id, kind, z_depths_um[row], s));
                }
            }
        }
        out
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// MAD-based robust standard deviation.
fn robust_std(v: &[f64]) -> f64 {
    let med = median(v.to_vec());
    let dev: Vec<f64> = v.iter().map(|x| (x - med).abs()).collect();
    1.4826 * median(dev)
}

/// Locates events in low-passed traces and reads a per-slice onset for
/// each: intervals where the z-averaged derivative exceeds
/// `kappa * robust_std` gate the search, and each slice's onset is its
/// first crossing of `fraction` of that slice's amplitude inside the
/// window (linearly interpolated between samples).
pub fn detect_onsets(
    traces: &TraceMatrix,
    kind: OnsetKind,
    params: &OnsetParams,
) -> Result<OnsetTable, AnalysisError> {
    let t_len = traces.num_frames();
    if t_len < 3 || traces.num_slices() == 0 {
        return Ok(OnsetTable::default());
    }
    let fs = traces.frame_rate_hz;
    let z = traces.num_slices();

    let mean_trace: Vec<f64> = (0..t_len)
        .map(|t| traces.values.iter().map(|row| row[t]).sum::<f64>() / z as f64)
        .collect();
    let deriv: Vec<f64> = mean_trace.windows(2).map(|w| w[1] - w[0]).collect();
    let med = median(deriv.clone());
    let theta = params.kappa * robust_std(&deriv);

    let exceeds = |d: f64| match kind {
        OnsetKind::Dilation => d - med > theta,
        OnsetKind::Constriction => d - med < -theta,
    };

    // contiguous runs of gate exceedance, merged across small gaps
    let merge_gap = (params.merge_gap_s * fs).round() as usize;
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut current: Option<(usize, usize)> = None;
    for (i, &d) in deriv.iter().enumerate() {
        if exceeds(d) {
            current = match current {
                None => Some((i, i)),
                Some((s, _)) => Some((s, i)),
            };
        } else if let Some((s, e)) = current {
            if i - e > merge_gap {
                runs.push((s, e));
                current = None;
            }
        }
    }
    if let Some(r) = current {
        runs.push(r);
    }

    let extend = (params.extend_s * fs).round() as usize;
    let mut events = Vec::new();
    for (event_id, &(s, e)) in runs.iter().enumerate() {
        let w0 = s.saturating_sub(extend);
        let w1 = (e + 1 + extend).min(t_len - 1);
        let mut onsets_s = Vec::with_capacity(z);
        for row in &traces.values {
            let base = row[w0];
            let peak = row[w0..=w1]
                .iter()
                .copied()
                .fold(base, |acc, v| match kind {
                    OnsetKind::Dilation => acc.max(v),
                    OnsetKind::Constriction => acc.min(v),
                });
            let amplitude = peak - base;
            if amplitude.abs() < 1e-12 {
                onsets_s.push(None);
                continue;
            }
            let target = base + params.fraction * amplitude;
            let crossed = |v: f64| match kind {
                OnsetKind::Dilation => v >= target,
                OnsetKind::Constriction => v <= target,
            };
            let mut onset = None;
            for t in w0..w1 {
                if !crossed(row[t]) && crossed(row[t + 1]) {
                    let f = (target - row[t]) / (row[t + 1] - row[t]);
                    onset = Some((t as f64 + f) / fs);
                    break;
                }
            }
            if onset.is_none() && crossed(row[w0]) {
                onset = Some(w0 as f64 / fs);
            }
            onsets_s.push(onset);
        }
        events.push(DetectedEvent {
            event_id,
            kind,
            window_s: (w0 as f64 / fs, w1 as f64 / fs),
            onsets_s,
        });
    }
    Ok(OnsetTable { events })
}

/// Average ranks with ties shared.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation between depth and onset time for one event.
/// Upward-propagating dilation is expected strongly negative, downward
/// constriction strongly positive.
pub fn onset_depth_ordering(
    onsets_s: &[Option<f64>],
    depths_um: &[f64],
) -> Result<f64, AnalysisError> {
    let pairs: Vec<(f64, f64)> = onsets_s
        .iter()
        .zip(depths_um)
        .filter_map(|(o, &d)| o.map(|s| (d, s)))
        .collect();
    if pairs.len() < 3 {
        return Err(AnalysisError::TooFew { need: 3, got: pairs.len() });
    }
    let depths: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let onsets: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    Ok(pearson(&ranks(&depths), &ranks(&onsets)))
}

// ---------------------------------------------------------------------------
// diameters
// ---------------------------------------------------------------------------

/// Equivalent diameter in voxel units of the largest 4-connected
/// cross-section component inside the ROI at slice `z` of a thresholded
/// map.
pub fn diameter_voxels(
    seg: &Volume3D,
    roi: &VesselROI,
    z: usize,
    threshold: f32,
) -> Result<f64, AnalysisError> {
    let rect = roi
        .rect_at(z)
        .ok_or(VolumeError::MissingRoiSlice { vessel_id: roi.id, z })?;
    let h = rect.y1 - rect.y0;
    let w = rect.x1 - rect.x0;
    let inside =
        |y: usize, x: usize| seg.at(z, rect.y0 + y, rect.x0 + x) >= threshold;
    let mut seen = vec![false; h * w];
    let mut best = 0usize;
    for sy in 0..h {
        for sx in 0..w {
            if seen[sy * w + sx] || !inside(sy, sx) {
                continue;
            }
            let mut area = 0usize;
            let mut stack = vec![(sy, sx)];
            seen[sy * w + sx] = true;
            while let Some((y, x)) = stack.pop() {
                area += 1;
                let push = |ny: usize, nx: usize, seen: &mut Vec<bool>, stack: &mut Vec<(usize, usize)>| {
                    if ny < h && nx < w && !seen[ny * w + nx] && inside(ny, nx) {
                        seen[ny * w + nx] = true;
                        stack.push((ny, nx));
                    }
                };
                if y > 0 {
                    push(y - 1, x, &mut seen, &mut stack);
                }
                if x > 0 {
                    push(y, x - 1, &mut seen, &mut stack);
                }
                push(y + 1, x, &mut seen, &mut stack);
                push(y, x + 1, &mut seen, &mut stack);
            }
            best = best.max(area);
        }
    }
    if best == 0 {
        return Err(AnalysisError::EmptyCrossSection { z });
    }
    Ok(2.0 * (best as f64 / std::f64::consts::PI).sqrt())
}

/// Equivalent diameter in micrometres, using the in-plane voxel size when
/// the volume carries one.
pub fn measure_diameter(
    seg: &Volume3D,
    roi: &VesselROI,
    z: usize,
    threshold: f32,
) -> Result<f64, AnalysisError> {
    let d_vox = diameter_voxels(seg, roi, z, threshold)?;
    let scale = seg
        .voxel_size_um
        .map(|v| (v[1] * v[2]).sqrt())
        .unwrap_or(1.0);
    Ok(d_vox * scale)
}

#[derive(Debug, Clone)]
pub struct DiameterRatioSummary {
    /// `(vessel_id, mean_d1_vox, mean_d2_vox, ratio)`.
    pub per_vessel: Vec<(u32, f64, f64, f64)>,
    pub mean: f64,
    pub std: f64,
}

impl DiameterRatioSummary {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("vessel_id,d_x1_vox,d_x2_vox,ratio\n");
        for (id, d1, d2, r) in &self.per_vessel {
            out.push_str(&format!("{id},{d1},{d2},{r}\n"));
        }
        out.push_str(&format!("mean,,,{}\nstd,,,{}\n", self.mean, self.std));
        out
    }
}

/// Per-vessel ratio of apparent (voxel-unit) diameters between a doubled-
/// magnification acquisition and the base one; accurate segmentations give
/// exactly 2.
///
/// Diameters average over every frame and annotated slice with a non-empty
/// cross-section; vessels pair by ROI id.
pub fn diameter_ratio(
    seg_x1: &Movie4D,
    rois_x1: &[VesselROI],
    seg_x2: &Movie4D,
    rois_x2: &[VesselROI],
    threshold: f32,
) -> Result<DiameterRatioSummary, AnalysisError> {
    let mean_diameter = |movie: &Movie4D, roi: &VesselROI| -> Option<f64> {
        let mut acc = 0.0;
        let mut count = 0usize;
        for frame in &movie.frames {
            for rect in &roi.slices {
                if let Ok(d) = diameter_voxels(frame, roi, rect.z, threshold) {
                    acc += d;
                    count += 1;
                }
            }
        }
        (count > 0).then(|| acc / count as f64)
    };

    let mut per_vessel = Vec::new();
    for roi1 in rois_x1 {
        let Some(roi2) = rois_x2.iter().find(|r| r.id == roi1.id) else {
            continue;
        };
        let (Some(d1), Some(d2)) = (mean_diameter(seg_x1, roi1), mean_diameter(seg_x2, roi2))
        else {
            continue;
        };
        per_vessel.push((roi1.id, d1, d2, d2 / d1));
    }
    if per_vessel.is_empty() {
        return Err(AnalysisError::TooFew { need: 1, got: 0 });
    }
    let n = per_vessel.len() as f64;
    let mean = per_vessel.iter().map(|v| v.3).sum::<f64>() / n;
    let var = per_vessel.iter().map(|v| (v.3 - mean).powi(2)).sum::<f64>() / n;
    Ok(DiameterRatioSummary { per_vessel, mean, std: var.sqrt() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::RoiRect;

    fn movie_from_fn(
        dims: (usize, usize, usize),
        t_count: usize,
        fs: f32,
        mut f: impl FnMut(usize, usize, usize, usize) -> f32,
    ) -> Movie4D {
        let frames = (0..t_count)
            .map(|t| {
                let mut v = Volume3D::zeros(dims);
                for z in 0..dims.0 {
                    for y in 0..dims.1 {
                        for x in 0..dims.2 {
                            let i = v.index(z, y, x);
                            v.data[i] = f(t, z, y, x);
                        }
                    }
                }
                v
            })
            .collect();
        Movie4D::new(frames, fs).unwrap()
    }

    fn full_roi(dims: (usize, usize, usize)) -> VesselROI {
        VesselROI {
            id: 0,
            slices: (0..dims.0)
                .map(|z| RoiRect { z, y0: 0, y1: dims.1, x0: 0, x1: dims.2 })
                .collect(),
        }
    }

    #[test]
    fn vessel_trace_constant_and_zero() {
        let dims = (3, 4, 4);
        let ones = movie_from_fn(dims, 5, 10.0, |_, _, _, _| 1.0);
        let roi = full_roi(dims);
        let tr = vessel_trace(&ones, None, &roi).unwrap();
        assert_eq!(tr.num_slices(), 3);
        assert!(tr.values.iter().flatten().all(|&v| v == 16.0));

        let zeros = movie_from_fn(dims, 5, 10.0, |_, _, _, _| 0.0);
        let tr = vessel_trace(&zeros, None, &roi).unwrap();
        assert!(tr.values.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn vessel_trace_matches_double_loop_and_intensity_variant() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let dims = (2, 5, 5);
        let seg = movie_from_fn(dims, 3, 10.0, |_, _, _, _| rng.gen_range(0.0..1.0));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let inten = movie_from_fn(dims, 3, 10.0, |_, _, _, _| rng.gen_range(0.0..2.0));
        let roi = VesselROI {
            id: 1,
            slices: vec![RoiRect { z: 1, y0: 1, y1: 4, x0: 0, x1: 3 }],
        };
        let tr = vessel_trace(&seg, Some(&inten), &roi).unwrap();
        for t in 0..3 {
            let mut want = 0.0f64;
            for y in 1..4 {
                for x in 0..3 {
                    want += seg.frames[t].at(1, y, x) as f64 * inten.frames[t].at(1, y, x) as f64;
                }
            }
            assert!((tr.values[0][t] - want).abs() < 1e-9);
        }
    }

    fn traces_from_rows(rows: Vec<Vec<f64>>, fs: f64) -> TraceMatrix {
        let n = rows.len();
        TraceMatrix {
            values: rows,
            z_indices: (0..n).collect(),
            z_depths_um: (0..n).map(|i| i as f64 * 10.0).collect(),
            frame_rate_hz: fs,
            vessel_id: 0,
        }
    }

    #[test]
    fn pearson_matrix_duplicate_and_negated_rows() {
        let base: Vec<f64> = (0..10).map(|i| (i as f64 * 0.7).sin()).collect();
        let neg: Vec<f64> = base.iter().map(|v| -v).collect();
        let tr = traces_from_rows(vec![base.clone(), base.clone(), neg], 10.0);
        let rep = pearson_matrix(&tr).unwrap();
        assert!((rep.matrix[0][1] - 1.0).abs() < 1e-12);
        assert!((rep.matrix[0][2] + 1.0).abs() < 1e-12);
        assert!(rep.matrix[1][1].is_nan());
    }

    #[test]
    fn pearson_matrix_hand_case() {
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let b = vec![2.0, 1.0, 4.0, 3.0];
        let tr = traces_from_rows(vec![a.clone(), b.clone()], 1.0);
        let rep = pearson_matrix(&tr).unwrap();
        // direct formula
        let want = pearson(&a, &b);
        assert!((rep.matrix[0][1] - want).abs() < 1e-12);
        assert!((want - 0.6).abs() < 1e-12);
    }

    #[test]
    fn pearson_invariant_to_positive_affine_rescaling() {
        let a: Vec<f64> = (0..20).map(|i| (i as f64 * 0.33).sin()).collect();
        let b: Vec<f64> = (0..20).map(|i| (i as f64 * 0.41).cos()).collect();
        let a2: Vec<f64> = a.iter().map(|v| 3.7 * v + 11.0).collect();
        assert!((pearson(&a, &b) - pearson(&a2, &b)).abs() < 1e-12);
    }

    #[test]
    fn avg_neighbor_correlation_identical_rows_is_one() {
        let base: Vec<f64> = (0..16).map(|i| (i as f64).sin()).collect();
        let tr = traces_from_rows(vec![base.clone(); 6], 10.0);
        for n in [1usize, 2, 5] {
            let r = avg_neighbor_correlation(&tr, DepthCutoff::Max, n).unwrap();
            assert!((r - 1.0).abs() < 1e-12);
        }
        let r = avg_neighbor_correlation(&tr, DepthCutoff::Microns(20.0), 1).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        assert!(avg_neighbor_correlation(&tr, DepthCutoff::Microns(-5.0), 1).is_err());
    }

    #[test]
    fn avg_neighbor_correlation_matches_brute_force_on_wave() {
        // propagating wave plus per-row deterministic pseudo-noise
        let t_len = 200;
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|z| {
                (0..t_len)
                    .map(|t| {
                        let phase = t as f64 * 0.1 - z as f64 * 0.35;
                        phase.sin() + 0.3 * ((t * (z + 3)) as f64 * 0.77).sin()
                    })
                    .collect()
            })
            .collect();
        let tr = traces_from_rows(rows.clone(), 20.0);
        let n = 3;
        let got = avg_neighbor_correlation(&tr, DepthCutoff::Max, n).unwrap();
        let mut acc = 0.0;
        let mut cnt = 0;
        for i in 0..8 {
            for j in (i + 1)..8.min(i + n + 1) {
                acc += pearson(&rows[i], &rows[j]);
                cnt += 1;
            }
        }
        assert!((got - acc / cnt as f64).abs() < 1e-12);
    }

    #[test]
    fn lowpass_dc_gain_is_one() {
        let row = vec![3.25; 400];
        let out = lowpass(&row, 60.0, 1.0).unwrap();
        for v in out {
            assert!((v - 3.25).abs() < 1e-9);
        }
    }

    #[test]
    fn lowpass_passband_and_stopband() {
        let fs = 60.0;
        let n = 3600; // 60 s
        let slow: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * 0.1 * i as f64 / fs).sin())
            .collect();
        let fast: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * 10.0 * i as f64 / fs).sin())
            .collect();
        let slow_f = lowpass(&slow, fs, 1.0).unwrap();
        let fast_f = lowpass(&fast, fs, 1.0).unwrap();
        // compare RMS over the interior to avoid edge transients
        let rms = |v: &[f64]| {
            let m = &v[600..v.len() - 600];
            (m.iter().map(|x| x * x).sum::<f64>() / m.len() as f64).sqrt()
        };
        let slow_ratio = rms(&slow_f) / rms(&slow);
        assert!((slow_ratio - 1.0).abs() < 0.01, "0.1 Hz must pass, ratio {slow_ratio}");
        let fast_ratio = rms(&fast_f) / rms(&fast);
        assert!(fast_ratio < 0.05, "10 Hz must be attenuated, ratio {fast_ratio}");
    }

    #[test]
    fn lowpass_is_linear_and_zero_phase() {
        let fs = 60.0;
        let n = 1800;
        let x: Vec<f64> = (0..n).map(|i| ((i * 7 % 23) as f64) * 0.1).collect();
        let y: Vec<f64> = (0..n).map(|i| ((i * 13 % 31) as f64) * 0.05).collect();
        let fx = lowpass(&x, fs, 1.0).unwrap();
        let fy = lowpass(&y, fs, 1.0).unwrap();
        let combo: Vec<f64> = x.iter().zip(&y).map(|(a, b)| 2.0 * a - 0.5 * b).collect();
        let fc = lowpass(&combo, fs, 1.0).unwrap();
        for i in 0..n {
            let want = 2.0 * fx[i] - 0.5 * fy[i];
            assert!((fc[i] - want).abs() < 1e-9, "linearity at {i}");
        }

        // symmetric impulse response = zero phase
        let mut imp = vec![0.0; 1201];
        imp[600] = 1.0;
        let f = lowpass(&imp, fs, 1.0).unwrap();
        for k in 1..400 {
            assert!(
                (f[600 - k] - f[600 + k]).abs() < 1e-9,
                "impulse response asymmetric at lag {k}"
            );
        }
    }

    #[test]
    fn detect_onsets_synchronized_bumps_and_flat_traces() {
        let fs = 30.0;
        let t_len = 600;
        let bump = |t: usize| crate::phantom::event_bump(t as f64 / fs - 10.0);
        let rows: Vec<Vec<f64>> =
            (0..5).map(|_| (0..t_len).map(|t| 1.0 + 0.5 * bump(t)).collect()).collect();
        let tr = traces_from_rows(rows, fs);
        let table = detect_onsets(&tr, OnsetKind::Dilation, &OnsetParams::default()).unwrap();
        assert_eq!(table.events.len(), 1);
        let onsets: Vec<f64> = table.events[0].onsets_s.iter().map(|o| o.unwrap()).collect();
        for w in onsets.windows(2) {
            assert!((w[0] - w[1]).abs() < 1e-9, "identical bumps must onset together");
        }

        let flat = traces_from_rows(vec![vec![2.0; 300]; 4], fs);
        let table = detect_onsets(&flat, OnsetKind::Dilation, &OnsetParams::default()).unwrap();
        assert!(table.events.is_empty());
    }

    #[test]
    fn detect_onsets_invariant_to_affine_rescaling() {
        let fs = 30.0;
        let t_len = 900;
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|z| {
                (0..t_len)
                    .map(|t| {
                        1.0 + 0.4 * crate::phantom::event_bump(t as f64 / fs - 12.0 - z as f64 * 0.2)
                    })
                    .collect()
            })
            .collect();
        let tr = traces_from_rows(rows.clone(), fs);
        let scaled = traces_from_rows(
            rows.iter()
                .map(|r| r.iter().map(|v| 40.0 * v + 7.0).collect())
                .collect(),
            fs,
        );
        let a = detect_onsets(&tr, OnsetKind::Dilation, &OnsetParams::default()).unwrap();
        let b = detect_onsets(&scaled, OnsetKind::Dilation, &OnsetParams::default()).unwrap();
        assert_eq!(a.events.len(), 1);
        assert_eq!(b.events.len(), 1);
        for (x, y) in a.events[0].onsets_s.iter().zip(&b.events[0].onsets_s) {
            assert!((x.unwrap() - y.unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn spearman_perfect_orders() {
        let depths = [10.0, 20.0, 30.0, 40.0];
        let increasing = [Some(1.0), Some(2.0), Some(3.0), Some(4.0)];
        let decreasing = [Some(4.0), Some(3.0), Some(2.0), Some(1.0)];
        assert!((onset_depth_ordering(&increasing, &depths).unwrap() - 1.0).abs() < 1e-12);
        assert!((onset_depth_ordering(&decreasing, &depths).unwrap() + 1.0).abs() < 1e-12);
        assert!(onset_depth_ordering(&increasing[..2], &depths[..2]).is_err());
    }

    #[test]
    fn diameter_of_discrete_disk() {
        // radius-3 disk has 29 voxels; equivalent diameter 2*sqrt(29/pi)
        let dims = (1, 9, 9);
        let mut vol = Volume3D::zeros(dims);
        for y in 0..9i32 {
            for x in 0..9i32 {
                if (y - 4).pow(2) + (x - 4).pow(2) <= 9 {
                    let i = vol.index(0, y as usize, x as usize);
                    vol.data[i] = 1.0;
                }
            }
        }
        vol.voxel_size_um = Some([1.0, 1.0, 1.0]);
        let roi = full_roi(dims);
        let d = measure_diameter(&vol, &roi, 0, 0.5).unwrap();
        let want = 2.0 * (29.0f64 / std::f64::consts::PI).sqrt();
        assert!((d - want).abs() < 1e-12);
        assert!((d - 6.0).abs() < 0.1, "close to 6 um for a radius-3 disk");

        // empty cross-section errors
        let empty = Volume3D::zeros(dims);
        assert!(matches!(
            measure_diameter(&empty, &roi, 0, 0.5),
            Err(AnalysisError::EmptyCrossSection { z: 0 })
        ));
    }

    #[test]
    fn diameter_scaling_law() {
        // quadrupling the area doubles the equivalent diameter
        let dims = (1, 20, 20);
        let mut small = Volume3D::zeros(dims);
        let mut big = Volume3D::zeros(dims);
        for y in 0..20usize {
            for x in 0..20usize {
                if y >= 9 && y < 11 && x >= 9 && x < 11 {
                    let i = small.index(0, y, x);
                    small.data[i] = 1.0;
                }
                if y >= 8 && y < 12 && x >= 8 && x < 12 {
                    let i = big.index(0, y, x);
                    big.data[i] = 1.0;
                }
            }
        }
        let roi = full_roi(dims);
        let d_small = diameter_voxels(&small, &roi, 0, 0.5).unwrap();
        let d_big = diameter_voxels(&big, &roi, 0, 0.5).unwrap();
        assert!((d_big / d_small - 2.0).abs() < 1e-12);
    }

    #[test]
    fn diameter_ratio_of_constructed_pair_is_two() {
        // identical tube rendered at 1x and 2x voxel density
        let spec1 = crate::phantom::PhantomSpec {
            dims: (2, 8, 32, 32),
            noiseless: true,
            ..crate::phantom::PhantomSpec::default()
        };
        let mut spec2 = spec1.clone();
        spec2.magnification = 2.0;
        let (m1, _) = crate::phantom::generate(&spec1).unwrap();
        let (m2, _) = crate::phantom::generate(&spec2).unwrap();
        let roi1 = crate::phantom::default_roi(&spec1, 0, 2);
        let roi2 = crate::phantom::default_roi(&spec2, 0, 2);
        let summary =
            diameter_ratio(&m1, &[roi1], &m2, &[roi2], 0.5).unwrap();
        assert!(
            (summary.mean - 2.0).abs() < 0.15,
            "noise-free 2x phantom pair should give ratio close to 2, got {}",
            summary.mean
        );
    }
}
