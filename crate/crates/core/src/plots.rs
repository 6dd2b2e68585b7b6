//! Minimal self-contained SVG emission for traces, correlation matrices,
//! and onset ladders. No timestamps or external resources, so identical
//! inputs produce identical bytes.

use crate::analysis::{CorrelationReport, OnsetTable, TraceMatrix};

const W: f64 = 720.0;
const H: f64 = 420.0;
const MARGIN: f64 = 48.0;

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"monospace\" font-size=\"11\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <text x=\"{MARGIN}\" y=\"20\">{title}</text>\n"
    )
}

fn color_for(i: usize, n: usize) -> String {
    // darker colors for deeper slices
    let f = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
    let v = (200.0 - 170.0 * f) as u8;
    format!("rgb({},{},{})", v / 2, v / 2, v)
}

/// Per-depth trace lines, deeper slices darker.
pub fn traces_svg(traces: &TraceMatrix, title: &str) -> String {
    let mut out = svg_open(title);
    let t_len = traces.num_frames();
    let n = traces.num_slices();
    if t_len >= 2 && n > 0 {
        let lo = traces.values.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
        let hi = traces.values.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(1e-12);
        for (i, row) in traces.values.iter().enumerate() {
            let mut points = String::new();
            for (t, v) in row.iter().enumerate() {
                let x = MARGIN + (W - 2.0 * MARGIN) * t as f64 / (t_len - 1) as f64;
                let y = H - MARGIN - (H - 2.0 * MARGIN) * (v - lo) / span;
                points.push_str(&format!("{x:.1},{y:.1} "));
            }
            out.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1\" points=\"{}\"/>\n",
                color_for(i, n),
                points.trim_end()
            ));
        }
        let t_max = (t_len - 1) as f64 / traces.frame_rate_hz;
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\">0 s</text><text x=\"{}\" y=\"{}\">{t_max:.1} s</text>\n",
            MARGIN,
            H - MARGIN / 2.0,
            W - MARGIN - 40.0,
            H - MARGIN / 2.0
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// Correlation matrix heatmap; blue negative, white zero, red positive,
/// grey for masked entries.
pub fn correlation_svg(report: &CorrelationReport, title: &str) -> String {
    let mut out = svg_open(title);
    let n = report.matrix.len();
    if n > 0 {
        let side = (H - 2.0 * MARGIN) / n as f64;
        for (i, row) in report.matrix.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let fill = if v.is_nan() {
                    "rgb(220,220,220)".to_string()
                } else {
                    let v = v.clamp(-1.0, 1.0);
                    if v >= 0.0 {
                        let c = (255.0 * (1.0 - v)) as u8;
                        format!("rgb(255,{c},{c})")
                    } else {
                        let c = (255.0 * (1.0 + v)) as u8;
                        format!("rgb({c},{c},255)")
                    }
                };
                out.push_str(&format!(
                    "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{side:.2}\" height=\"{side:.2}\" fill=\"{fill}\"/>\n",
                    MARGIN + j as f64 * side,
                    MARGIN + i as f64 * side,
                ));
            }
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Onset ladder: one marker per (depth, onset) pair per event.
pub fn onsets_svg(table: &OnsetTable, z_depths_um: &[f64], title: &str) -> String {
    let mut out = svg_open(title);
    let all: Vec<f64> = table
        .events
        .iter()
        .flat_map(|e| e.onsets_s.iter().flatten().cloned())
        .collect();
    if !all.is_empty() && z_depths_um.len() > 1 {
        let (t0, t1) = (
            all.iter().cloned().fold(f64::INFINITY, f64::min),
            all.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        );
        let t_span = (t1 - t0).max(1e-9);
        let d0 = z_depths_um.first().copied().unwrap_or(0.0);
        let d1 = z_depths_um.last().copied().unwrap_or(1.0);
        let d_span = (d1 - d0).abs().max(1e-9);
        for (ei, e) in table.events.iter().enumerate() {
            for (row, onset) in e.onsets_s.iter().enumerate() {
                if let Some(s) = onset {
                    let x = MARGIN + (W - 2.0 * MARGIN) * (s - t0) / t_span;
                    let y = MARGIN + (H - 2.0 * MARGIN) * (z_depths_um[row] - d0) / d_span;
                    out.push_str(&format!(
                        "<circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"3\" fill=\"{}\"/>\n",
                        color_for(ei, table.events.len().max(2))
                    ));
                }
            }
        }
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\">onset {t0:.2}..{t1:.2} s, depth {d0:.0}..{d1:.0} um</text>\n",
            MARGIN,
            H - MARGIN / 2.0
        ));
    }
    out.push_str("</svg>\n");
    out
}
