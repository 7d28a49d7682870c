//! Deterministic SVG figures over sweep results: quality vs warmdown
//! fraction per bit-width (with ±1 SEM bars), the scaling fit with its
//! 95% prediction band and held-out points, and paired penalties with
//! confidence bands. Every file embeds its exact axis mapping in a header
//! comment so plotted coordinates can be inverted and checked.

use crate::error::{Error, Result};
use crate::quant::QuantMode;
use crate::schedule::{LrTag, WdTag};
use crate::stats::{
    paired_penalty, predict_interval, summarize_cell, PairedPenalty, HoldoutReport, ScalingFit,
};
use crate::trainer::{RunRecord, RunStatus};
use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 30.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 50.0;

/// Sample count for fit lines and prediction bands.
pub const BAND_SAMPLES: usize = 33;

/// Affine data→pixel mapping, embedded verbatim in each SVG so readers
/// (and tests) can invert plotted coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisMap {
    pub x_min: f64,
    pub x_scale: f64,
    pub x_px0: f64,
    pub y_min: f64,
    pub y_scale: f64,
    pub y_px0: f64,
}

impl AxisMap {
    /// Builds the map from data ranges; degenerate ranges get unit padding.
    fn fit(x_lo: f64, x_hi: f64, y_lo: f64, y_hi: f64) -> AxisMap {
        let (x_lo, x_hi) = pad_range(x_lo, x_hi);
        let (y_lo, y_hi) = pad_range(y_lo, y_hi);
        AxisMap {
            x_min: x_lo,
            x_scale: (WIDTH - MARGIN_L - MARGIN_R) / (x_hi - x_lo),
            x_px0: MARGIN_L,
            y_min: y_lo,
            y_scale: (HEIGHT - MARGIN_T - MARGIN_B) / (y_hi - y_lo),
            y_px0: HEIGHT - MARGIN_B,
        }
    }

    pub fn px_x(&self, x: f64) -> f64 {
        self.x_px0 + (x - self.x_min) * self.x_scale
    }

    pub fn px_y(&self, y: f64) -> f64 {
        self.y_px0 - (y - self.y_min) * self.y_scale
    }

    pub fn data_x(&self, px: f64) -> f64 {
        (px - self.x_px0) / self.x_scale + self.x_min
    }

    pub fn data_y(&self, px: f64) -> f64 {
        (self.y_px0 - px) / self.y_scale + self.y_min
    }

    pub fn header_comment(&self) -> String {
        format!(
            "<!-- axis-map x_min={:.9} x_scale={:.9} x_px0={:.9} \
             y_min={:.9} y_scale={:.9} y_px0={:.9} ; \
             px_x = x_px0 + (x - x_min)*x_scale ; \
             px_y = y_px0 - (y - y_min)*y_scale -->",
            self.x_min, self.x_scale, self.x_px0, self.y_min, self.y_scale, self.y_px0
        )
    }

    /// Recovers the map from an emitted SVG's header comment.
    pub fn parse(svg: &str) -> Result<AxisMap> {
        let line = svg
            .lines()
            .find(|l| l.contains("axis-map"))
            .ok_or_else(|| Error::data("SVG lacks an axis-map comment"))?;
        let mut vals = std::collections::HashMap::new();
        for token in line.split_whitespace() {
            if let Some((k, v)) = token.split_once('=') {
                if let Ok(num) = v.parse::<f64>() {
                    vals.insert(k.to_string(), num);
                }
            }
        }
        let get = |k: &str| {
            vals.get(k)
                .copied()
                .ok_or_else(|| Error::data(format!("axis-map missing {k}")))
        };
        Ok(AxisMap {
            x_min: get("x_min")?,
            x_scale: get("x_scale")?,
            x_px0: get("x_px0")?,
            y_min: get("y_min")?,
            y_scale: get("y_scale")?,
            y_px0: get("y_px0")?,
        })
    }
}

fn pad_range(lo: f64, hi: f64) -> (f64, f64) {
    if hi - lo < 1e-12 {
        (lo - 1.0, hi + 1.0)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

fn mode_colour(mode: QuantMode) -> &'static str {
    match mode {
        QuantMode::Fp16 => "#1f77b4",
        QuantMode::Int8 => "#ff7f0e",
        QuantMode::Int6 => "#2ca02c",
        QuantMode::Int4 => "#d62728",
    }
}

fn svg_open(title: &str, map: &AxisMap) -> String {
    let mut s = String::new();
    s.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
    );
    s.push_str(&map.header_comment());
    s.push('\n');
    let _ = writeln!(
        s,
        "<title>{title}</title>\n<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>"
    );
    // Plot frame.
    let _ = writeln!(
        s,
        "<rect x=\"{MARGIN_L}\" y=\"{MARGIN_T}\" width=\"{:.6}\" height=\"{:.6}\" \
         fill=\"none\" stroke=\"#333333\" stroke-width=\"1\"/>",
        WIDTH - MARGIN_L - MARGIN_R,
        HEIGHT - MARGIN_T - MARGIN_B
    );
    s
}

fn axis_ticks(s: &mut String, map: &AxisMap, x_label: &str, y_label: &str) {
    let x_hi = map.data_x(WIDTH - MARGIN_R);
    let y_hi = map.data_y(MARGIN_T);
    for i in 0..=4 {
        let fx = map.x_min + (x_hi - map.x_min) * i as f64 / 4.0;
        let px = map.px_x(fx);
        let _ = writeln!(
            s,
            "<line x1=\"{px:.6}\" y1=\"{:.6}\" x2=\"{px:.6}\" y2=\"{:.6}\" stroke=\"#333333\"/>\
             <text x=\"{px:.6}\" y=\"{:.6}\" font-size=\"11\" text-anchor=\"middle\">{fx:.3}</text>",
            HEIGHT - MARGIN_B,
            HEIGHT - MARGIN_B + 5.0,
            HEIGHT - MARGIN_B + 18.0
        );
        let fy = map.y_min + (y_hi - map.y_min) * i as f64 / 4.0;
        let py = map.px_y(fy);
        let _ = writeln!(
            s,
            "<line x1=\"{:.6}\" y1=\"{py:.6}\" x2=\"{MARGIN_L}\" y2=\"{py:.6}\" stroke=\"#333333\"/>\
             <text x=\"{:.6}\" y=\"{:.6}\" font-size=\"11\" text-anchor=\"end\">{fy:.3}</text>",
            MARGIN_L - 5.0,
            MARGIN_L - 8.0,
            py + 4.0
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.6}\" y=\"{:.6}\" font-size=\"12\" text-anchor=\"middle\">{x_label}</text>",
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        HEIGHT - 10.0
    );
    let _ = writeln!(
        s,
        "<text x=\"14\" y=\"{:.6}\" font-size=\"12\" text-anchor=\"middle\" \
         transform=\"rotate(-90 14 {:.6})\">{y_label}</text>",
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0,
        (MARGIN_T + HEIGHT - MARGIN_B) / 2.0
    );
}

fn finals_for(
    records: &[RunRecord],
    size: &str,
    mode: QuantMode,
    wd: WdTag,
    lr: LrTag,
) -> Vec<f64> {
    records
        .iter()
        .filter(|r| {
            r.status == RunStatus::Completed
                && r.spec.size == size
                && r.spec.mode == mode
                && r.spec.wd == wd
                && r.spec.lr == lr
        })
        .filter_map(|r| r.final_bpb)
        .collect()
}

/// One plotted point: (warmdown fraction, mean final BPB, SEM if n ≥ 2).
type SeriesPoint = (f64, f64, Option<f64>);

/// Final BPB vs warmdown fraction for one size: one polyline per
/// bit-width present, with ±1 SEM error bars. Missing cells leave gaps
/// and an embedded warning comment.
pub fn fig_warmdown(records: &[RunRecord], size: &str, lr: LrTag) -> Result<String> {
    let mut series: Vec<(QuantMode, Vec<SeriesPoint>)> = Vec::new();
    let mut missing = Vec::new();
    let (mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for mode in QuantMode::ALL {
        let mut pts = Vec::new();
        for wd in WdTag::ALL {
            let finals = finals_for(records, size, mode, wd, lr);
            if finals.is_empty() {
                missing.push((mode, wd));
                continue;
            }
            let summary = summarize_cell(&finals)?;
            let sem = summary.sem.unwrap_or(0.0);
            y_lo = y_lo.min(summary.mean - sem);
            y_hi = y_hi.max(summary.mean + sem);
            pts.push((wd.fraction(), summary.mean, summary.sem));
        }
        if !pts.is_empty() {
            series.push((mode, pts));
        }
    }
    if series.is_empty() {
        return Err(Error::data(format!("no completed cells for size {size}")));
    }
    let map = AxisMap::fit(0.0, 0.5, y_lo, y_hi);
    let mut s = svg_open(
        &format!("Final BPB vs warmdown fraction ({size})"),
        &map,
    );
    for (mode, wd) in &missing {
        let _ = writeln!(
            s,
            "<!-- warning: missing cell bits={} wd={} -->",
            mode.as_str(),
            wd.as_str()
        );
    }
    axis_ticks(&mut s, &map, "warmdown fraction", "final BPB");
    for (mode, pts) in &series {
        let colour = mode_colour(*mode);
        let path: Vec<String> = pts
            .iter()
            .map(|&(x, y, _)| format!("{:.6},{:.6}", map.px_x(x), map.px_y(y)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"2\" points=\"{}\"/>",
            path.join(" ")
        );
        for &(x, y, sem) in pts {
            let (px, py) = (map.px_x(x), map.px_y(y));
            if let Some(sem) = sem {
                let _ = writeln!(
                    s,
                    "<line x1=\"{px:.6}\" y1=\"{:.6}\" x2=\"{px:.6}\" y2=\"{:.6}\" \
                     stroke=\"{colour}\" stroke-width=\"1\"/>",
                    map.px_y(y - sem),
                    map.px_y(y + sem)
                );
            }
            let _ = writeln!(
                s,
                "<circle cx=\"{px:.6}\" cy=\"{py:.6}\" r=\"3\" fill=\"{colour}\"/>"
            );
        }
    }
    legend(&mut s, series.iter().map(|(m, _)| *m));
    s.push_str("</svg>\n");
    Ok(s)
}

fn legend(s: &mut String, modes: impl Iterator<Item = QuantMode>) {
    for (i, mode) in modes.enumerate() {
        let y = MARGIN_T + 14.0 + 16.0 * i as f64;
        let _ = writeln!(
            s,
            "<rect x=\"{:.6}\" y=\"{:.6}\" width=\"10\" height=\"10\" fill=\"{}\"/>\
             <text x=\"{:.6}\" y=\"{:.6}\" font-size=\"11\">{}</text>",
            WIDTH - MARGIN_R - 90.0,
            y - 9.0,
            mode_colour(mode),
            WIDTH - MARGIN_R - 76.0,
            y,
            mode.as_str()
        );
    }
}

/// Scaling fit: prediction band polygon, fit line, and held-out points on
/// ln-size axes. The band polygon has `2·BAND_SAMPLES` vertices: the
/// upper edge left→right, then the lower edge right→left.
pub fn fig_scaling(fit: &ScalingFit, holdout: &HoldoutReport) -> Result<String> {
    let xs: Vec<f64> = holdout.points.iter().map(|p| p.size_m.ln()).collect();
    let x_lo = xs.iter().copied().fold(f64::INFINITY, f64::min).min(fit.x_bar - 1.0);
    let x_hi = xs
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
        .max(fit.x_bar + 1.0);
    let sample_x: Vec<f64> = (0..BAND_SAMPLES)
        .map(|i| x_lo + (x_hi - x_lo) * i as f64 / (BAND_SAMPLES - 1) as f64)
        .collect();
    let mut band = Vec::with_capacity(BAND_SAMPLES);
    for &x in &sample_x {
        let (pred, hw) = predict_interval(fit, x.exp(), 0.95)?;
        band.push((x, pred, hw));
    }
    let y_lo = band
        .iter()
        .map(|&(_, p, h)| p - h)
        .chain(holdout.points.iter().map(|p| p.measured_mbpb))
        .fold(f64::INFINITY, f64::min);
    let y_hi = band
        .iter()
        .map(|&(_, p, h)| p + h)
        .chain(holdout.points.iter().map(|p| p.measured_mbpb))
        .fold(f64::NEG_INFINITY, f64::max);
    let map = AxisMap::fit(x_lo, x_hi, y_lo, y_hi);

    let mut s = svg_open("Quantisation penalty vs ln(size) with 95% PI", &map);
    axis_ticks(&mut s, &map, "ln(size in M params)", "penalty (mBPB)");
    let mut poly: Vec<String> = band
        .iter()
        .map(|&(x, p, h)| format!("{:.6},{:.6}", map.px_x(x), map.px_y(p + h)))
        .collect();
    poly.extend(
        band.iter()
            .rev()
            .map(|&(x, p, h)| format!("{:.6},{:.6}", map.px_x(x), map.px_y(p - h))),
    );
    let _ = writeln!(
        s,
        "<polygon fill=\"#2ca02c\" fill-opacity=\"0.15\" stroke=\"none\" points=\"{}\"/>",
        poly.join(" ")
    );
    let line: Vec<String> = band
        .iter()
        .map(|&(x, p, _)| format!("{:.6},{:.6}", map.px_x(x), map.px_y(p)))
        .collect();
    let _ = writeln!(
        s,
        "<polyline fill=\"none\" stroke=\"#2ca02c\" stroke-width=\"2\" points=\"{}\"/>",
        line.join(" ")
    );
    for p in &holdout.points {
        let colour = if p.inside { "#1f77b4" } else { "#d62728" };
        let _ = writeln!(
            s,
            "<circle cx=\"{:.6}\" cy=\"{:.6}\" r=\"4\" fill=\"{colour}\"/>",
            map.px_x(p.size_m.ln()),
            map.px_y(p.measured_mbpb)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Paired penalty per size with its 95% CI band on ln-size axes.
pub fn fig_penalty_ci(pairs: &[(f64, PairedPenalty)]) -> Result<String> {
    if pairs.is_empty() {
        return Err(Error::data("no paired penalties to plot"));
    }
    let mut pairs: Vec<&(f64, PairedPenalty)> = pairs.iter().collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite sizes"));
    let x_lo = pairs.first().expect("non-empty").0.ln();
    let x_hi = pairs.last().expect("non-empty").0.ln();
    let y_lo = pairs
        .iter()
        .map(|(_, p)| p.ci_mbpb.0)
        .fold(f64::INFINITY, f64::min)
        .min(0.0);
    let y_hi = pairs
        .iter()
        .map(|(_, p)| p.ci_mbpb.1)
        .fold(f64::NEG_INFINITY, f64::max)
        .max(0.0);
    let map = AxisMap::fit(x_lo, x_hi, y_lo, y_hi);
    let mut s = svg_open("Paired penalty vs ln(size) with 95% CI", &map);
    axis_ticks(&mut s, &map, "ln(size in M params)", "paired diff (mBPB)");
    let zero_y = map.px_y(0.0);
    let _ = writeln!(
        s,
        "<line x1=\"{MARGIN_L}\" y1=\"{zero_y:.6}\" x2=\"{:.6}\" y2=\"{zero_y:.6}\" \
         stroke=\"#999999\" stroke-dasharray=\"4 3\"/>",
        WIDTH - MARGIN_R
    );
    if pairs.len() > 1 {
        let mut poly: Vec<String> = pairs
            .iter()
            .map(|(sz, p)| format!("{:.6},{:.6}", map.px_x(sz.ln()), map.px_y(p.ci_mbpb.1)))
            .collect();
        poly.extend(
            pairs
                .iter()
                .rev()
                .map(|(sz, p)| format!("{:.6},{:.6}", map.px_x(sz.ln()), map.px_y(p.ci_mbpb.0))),
        );
        let _ = writeln!(
            s,
            "<polygon fill=\"#1f77b4\" fill-opacity=\"0.15\" stroke=\"none\" points=\"{}\"/>",
            poly.join(" ")
        );
    }
    let line: Vec<String> = pairs
        .iter()
        .map(|(sz, p)| format!("{:.6},{:.6}", map.px_x(sz.ln()), map.px_y(p.mean_mbpb)))
        .collect();
    let _ = writeln!(
        s,
        "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"{}\"/>",
        line.join(" ")
    );
    for (sz, p) in &pairs {
        let _ = writeln!(
            s,
            "<circle cx=\"{:.6}\" cy=\"{:.6}\" r=\"3\" fill=\"#1f77b4\"/>",
            map.px_x(sz.ln()),
            map.px_y(p.mean_mbpb)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Builds the paired-penalty inputs for [`fig_penalty_ci`] from records:
/// per size, `mode` vs FP16 at one (warmdown, LR).
pub fn penalty_pairs(
    records: &[RunRecord],
    mode: QuantMode,
    wd: WdTag,
    lr: LrTag,
) -> Result<Vec<(f64, PairedPenalty)>> {
    let mut sizes: Vec<String> = Vec::new();
    for r in records {
        if !sizes.contains(&r.spec.size) {
            sizes.push(r.spec.size.clone());
        }
    }
    let mut out = Vec::new();
    for size in sizes {
        let a: Vec<(u64, f64)> = records
            .iter()
            .filter(|r| {
                r.status == RunStatus::Completed
                    && r.spec.size == size
                    && r.spec.mode == mode
                    && r.spec.wd == wd
                    && r.spec.lr == lr
            })
            .filter_map(|r| r.final_bpb.map(|b| (r.spec.seed, b)))
            .collect();
        let b: Vec<(u64, f64)> = records
            .iter()
            .filter(|r| {
                r.status == RunStatus::Completed
                    && r.spec.size == size
                    && r.spec.mode == QuantMode::Fp16
                    && r.spec.wd == wd
                    && r.spec.lr == lr
            })
            .filter_map(|r| r.final_bpb.map(|b| (r.spec.seed, b)))
            .collect();
        if let Ok(pp) = paired_penalty(&a, &b) {
            out.push((crate::stats::size_m(&size)?, pp));
        }
    }
    Ok(out)
}
