//! Analysis layer over sweep records: per-cell summaries (mean ± SEM),
//! paired per-seed penalties with z-tests and seed votes, the log-linear
//! scaling fit with new-observation prediction intervals and held-out
//! validation, the energy/CO₂/water footprint arithmetic, and the CSV/JSON
//! table emitters.
//!
//! Convention: records store BPB; analyses report penalties in mBPB
//! (BPB × 1000) at this boundary.

use crate::error::{Error, Result};
use crate::quant::QuantMode;
use crate::schedule::{LrTag, WdTag};
use crate::trainer::{RunRecord, RunStatus};
use serde::Serialize;
use std::collections::BTreeMap;

/// Two-sided z threshold for calling a paired difference significant.
pub const Z_THRESHOLD: f64 = 1.96;

pub fn mbpb(bpb: f64) -> f64 {
    bpb * 1000.0
}

// ---------------------------------------------------------------------
// Cell summaries
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CellSummary {
    pub mean: f64,
    /// Standard error of the mean; absent for a single observation.
    pub sem: Option<f64>,
    pub n: usize,
}

pub fn summarize_cell(values: &[f64]) -> Result<CellSummary> {
    if values.is_empty() {
        return Err(Error::data("no values to summarise"));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let sem = if n >= 2 {
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        Some((var / n as f64).sqrt())
    } else {
        None
    };
    Ok(CellSummary { mean, sem, n })
}

// ---------------------------------------------------------------------
// Paired per-seed penalties
// ---------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairedPenalty {
    /// Per-seed A − B in mBPB, in ascending seed order.
    pub diffs_mbpb: Vec<f64>,
    pub mean_mbpb: f64,
    pub se_mbpb: f64,
    pub z: f64,
    /// 95% CI as mean ± 1.96·SE.
    pub ci_mbpb: (f64, f64),
    /// Seeds where A is strictly lower (better); ties prefer neither.
    pub votes_for_a: usize,
    pub n: usize,
}

impl PairedPenalty {
    pub fn significant(&self) -> bool {
        self.z.abs() >= Z_THRESHOLD
    }
}

/// Pairs two cells by seed and tests the per-seed BPB difference A − B.
pub fn paired_penalty(a: &[(u64, f64)], b: &[(u64, f64)]) -> Result<PairedPenalty> {
    let bm: BTreeMap<u64, f64> = b.iter().copied().collect();
    let mut shared: Vec<(u64, f64, f64)> = a
        .iter()
        .filter_map(|&(seed, va)| bm.get(&seed).map(|&vb| (seed, va, vb)))
        .collect();
    shared.sort_by_key(|&(seed, _, _)| seed);
    if shared.len() < 2 {
        return Err(Error::data(format!(
            "need ≥2 shared seeds, found {}",
            shared.len()
        )));
    }
    let diffs: Vec<f64> = shared.iter().map(|&(_, va, vb)| mbpb(va - vb)).collect();
    let votes_for_a = shared.iter().filter(|&&(_, va, vb)| va < vb).count();
    let n = diffs.len();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1) as f64;
    let se = (var / n as f64).sqrt();
    let z = if se == 0.0 {
        if mean == 0.0 {
            0.0
        } else {
            f64::INFINITY * mean.signum()
        }
    } else {
        mean / se
    };
    Ok(PairedPenalty {
        mean_mbpb: mean,
        se_mbpb: se,
        z,
        ci_mbpb: (mean - Z_THRESHOLD * se, mean + Z_THRESHOLD * se),
        votes_for_a,
        n,
        diffs_mbpb: diffs,
    })
}

// ---------------------------------------------------------------------
// Log-linear scaling fit
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalingFit {
    /// Intercept (mBPB): penalty = a + b·ln(size_M).
    pub a: f64,
    /// Slope (mBPB per ln size_M).
    pub b: f64,
    pub slope_se: f64,
    /// Residual standard deviation √(SSR/(n−2)).
    pub sigma: f64,
    pub n: usize,
    pub x_bar: f64,
    pub sxx: f64,
}

/// Ordinary least squares of penalty (mBPB) on ln(size in millions),
/// two-pass for numerical stability.
pub fn fit_log_linear(points: &[(f64, f64)]) -> Result<ScalingFit> {
    let n = points.len();
    if n < 3 {
        return Err(Error::data(format!("need ≥3 points for a fit, got {n}")));
    }
    if let Some(&(s, _)) = points.iter().find(|&&(s, _)| s <= 0.0) {
        return Err(Error::domain(format!("non-positive size {s}")));
    }
    let xs: Vec<f64> = points.iter().map(|&(s, _)| s.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|&(_, p)| p).collect();
    let x_bar = xs.iter().sum::<f64>() / n as f64;
    let y_bar = ys.iter().sum::<f64>() / n as f64;
    let sxx: f64 = xs.iter().map(|x| (x - x_bar) * (x - x_bar)).sum();
    if sxx < 1e-12 {
        return Err(Error::numerics("degenerate size spread (Sxx ≈ 0)"));
    }
    let sxy: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - x_bar) * (y - y_bar))
        .sum();
    let b = sxy / sxx;
    let a = y_bar - b * x_bar;
    let ssr: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            let r = y - (a + b * x);
            r * r
        })
        .sum();
    let sigma = (ssr.max(0.0) / (n - 2) as f64).sqrt();
    Ok(ScalingFit {
        a,
        b,
        slope_se: sigma / sxx.sqrt(),
        sigma,
        n,
        x_bar,
        sxx,
    })
}

/// New-observation prediction interval at `level`:
/// half-width = t·σ̂·√(1 + 1/n + (ln s − x̄)²/Sxx).
pub fn predict_interval(fit: &ScalingFit, size_m: f64, level: f64) -> Result<(f64, f64)> {
    if size_m <= 0.0 {
        return Err(Error::domain(format!("non-positive size {size_m}")));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(Error::domain(format!("level {level} outside (0, 1)")));
    }
    let x = size_m.ln();
    let prediction = fit.a + fit.b * x;
    let t = t_quantile((fit.n - 2) as u64, 0.5 + level / 2.0)?;
    let spread = 1.0 + 1.0 / fit.n as f64 + (x - fit.x_bar) * (x - fit.x_bar) / fit.sxx;
    Ok((prediction, t * fit.sigma * spread.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HoldoutPoint {
    pub size_m: f64,
    pub predicted_mbpb: f64,
    pub measured_mbpb: f64,
    pub residual_mbpb: f64,
    pub half_width_mbpb: f64,
    pub inside: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HoldoutReport {
    pub points: Vec<HoldoutPoint>,
    pub inside_count: usize,
    pub n: usize,
}

/// Scores held-out (size, measured-penalty) points against the fit's 95%
/// prediction interval.
pub fn holdout_validate(fit: &ScalingFit, measured: &[(f64, f64)]) -> Result<HoldoutReport> {
    if measured.is_empty() {
        return Err(Error::data("no held-out points"));
    }
    let mut points = Vec::with_capacity(measured.len());
    for &(size_m, y) in measured {
        let (predicted, half_width) = predict_interval(fit, size_m, 0.95)?;
        let residual = y - predicted;
        points.push(HoldoutPoint {
            size_m,
            predicted_mbpb: predicted,
            measured_mbpb: y,
            residual_mbpb: residual,
            half_width_mbpb: half_width,
            inside: residual.abs() <= half_width,
        });
    }
    let inside_count = points.iter().filter(|p| p.inside).count();
    Ok(HoldoutReport {
        inside_count,
        n: points.len(),
        points,
    })
}

// ---------------------------------------------------------------------
// Student-t quantiles (hand-rolled: Lanczos ln Γ, Lentz continued
// fraction for the regularised incomplete beta, bisection inversion)
// ---------------------------------------------------------------------

fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7, 9 coefficients.
    const COEFFS: [f64; 8] = [
        676.5203681218851,
        -1259.1392167224028,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507343278686905,
        -0.13857109526572012,
        9.984_369_578_019_572e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // Reflection keeps the approximation in its accurate half-plane.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = 0.999_999_999_999_809_9;
    for (i, &c) in COEFFS.iter().enumerate() {
        acc += c / (x + (i + 1) as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-14;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularised incomplete beta I_x(a, b).
fn inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

fn t_cdf(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    let tail = 0.5 * inc_beta(df / 2.0, 0.5, x);
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Student-t inverse CDF, accurate to better than 1e-4.
pub fn t_quantile(df: u64, p: f64) -> Result<f64> {
    if df < 1 {
        return Err(Error::domain("t quantile needs df ≥ 1"));
    }
    if !(0.0 < p && p < 1.0) {
        return Err(Error::domain(format!("probability {p} outside (0, 1)")));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    if p < 0.5 {
        return Ok(-t_quantile(df, 1.0 - p)?);
    }
    let dff = df as f64;
    let mut hi = 2.0;
    while t_cdf(hi, dff) < p {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::numerics("t quantile bracket expansion failed"));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if t_cdf(mid, dff) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-10 * (1.0 + hi) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

// ---------------------------------------------------------------------
// Footprint arithmetic
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Footprint {
    pub gpu_hours: f64,
    pub gpu_kw: f64,
    pub host_overhead: f64,
    pub pue: f64,
    pub grid_intensity_g_per_kwh: f64,
    pub water_l_per_kwh: f64,
    pub energy_kwh: f64,
    pub co2_kg: f64,
    pub water_l: f64,
}

/// E = H·P·(1+α)·PUE; CO₂ = E·intensity/1000; water = E·water factor.
pub fn footprint(
    gpu_hours: f64,
    gpu_kw: f64,
    host_overhead: f64,
    pue: f64,
    grid_intensity_g_per_kwh: f64,
    water_l_per_kwh: f64,
) -> Result<Footprint> {
    for (name, v) in [
        ("gpu_hours", gpu_hours),
        ("gpu_kw", gpu_kw),
        ("host_overhead", host_overhead),
        ("pue", pue),
        ("grid_intensity", grid_intensity_g_per_kwh),
        ("water_factor", water_l_per_kwh),
    ] {
        if v.is_nan() || v < 0.0 {
            return Err(Error::domain(format!("{name} must be ≥ 0, got {v}")));
        }
    }
    let energy_kwh = gpu_hours * gpu_kw * (1.0 + host_overhead) * pue;
    Ok(Footprint {
        gpu_hours,
        gpu_kw,
        host_overhead,
        pue,
        grid_intensity_g_per_kwh,
        water_l_per_kwh,
        energy_kwh,
        co2_kg: energy_kwh * grid_intensity_g_per_kwh / 1000.0,
        water_l: energy_kwh * water_l_per_kwh,
    })
}

// ---------------------------------------------------------------------
// Record aggregation and table emitters
// ---------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table {
    pub title: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&self.headers.join(","));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// (seed → final BPB) for one cell selection, completed runs only.
fn cell_finals(
    records: &[RunRecord],
    size: &str,
    mode: QuantMode,
    wd: WdTag,
    lr: LrTag,
) -> Vec<(u64, f64)> {
    let mut finals: Vec<(u64, f64)> = records
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
    finals.sort_by_key(|&(seed, _)| seed);
    finals
}

fn sizes_in(records: &[RunRecord]) -> Vec<String> {
    let mut sizes: Vec<String> = Vec::new();
    for r in records {
        if !sizes.contains(&r.spec.size) {
            sizes.push(r.spec.size.clone());
        }
    }
    sizes
}

fn mean_of(finals: &[(u64, f64)]) -> Option<f64> {
    if finals.is_empty() {
        None
    } else {
        Some(finals.iter().map(|&(_, v)| v).sum::<f64>() / finals.len() as f64)
    }
}

fn fmt_bpb(v: Option<f64>) -> String {
    v.map_or("—".to_string(), |v| format!("{v:.4}"))
}

/// Per-size mean BPB at FP16/INT8/INT6 with the INT6 penalty, at one
/// (warmdown, LR) setting.
pub fn quality_table(records: &[RunRecord], wd: WdTag, lr: LrTag) -> Table {
    let mut rows = Vec::new();
    for size in sizes_in(records) {
        let fp = mean_of(&cell_finals(records, &size, QuantMode::Fp16, wd, lr));
        let i8 = mean_of(&cell_finals(records, &size, QuantMode::Int8, wd, lr));
        let i6 = mean_of(&cell_finals(records, &size, QuantMode::Int6, wd, lr));
        let penalty = match (fp, i6) {
            (Some(f), Some(q)) => format!("{:+.2}", mbpb(q - f)),
            _ => "—".to_string(),
        };
        rows.push(vec![
            size,
            fmt_bpb(fp),
            fmt_bpb(i8),
            fmt_bpb(i6),
            penalty,
        ]);
    }
    Table {
        title: format!("Quality by bit-width at {}/{}", wd.as_str(), lr.as_str()),
        headers: ["Size", "FP16 BPB", "INT8 BPB", "INT6 BPB", "INT6 penalty"]
            .map(String::from)
            .to_vec(),
        rows,
    }
}

/// Held-out scaling-law validation rows.
pub fn scaling_table(report: &HoldoutReport) -> Table {
    let rows = report
        .points
        .iter()
        .map(|p| {
            vec![
                format!("{:.0}M", p.size_m),
                format!("{:.2}", p.predicted_mbpb),
                format!("{:.2}", p.measured_mbpb),
                format!("{:+.2}", p.residual_mbpb),
                format!("±{:.2}", p.half_width_mbpb),
                if p.inside { "yes" } else { "no" }.to_string(),
            ]
        })
        .collect();
    Table {
        title: format!(
            "Held-out scaling-law validation ({}/{} inside)",
            report.inside_count, report.n
        ),
        headers: [
            "Size",
            "Predicted (mBPB)",
            "Measured (mBPB)",
            "Residual",
            "95% PI half-width",
            "Inside PI?",
        ]
        .map(String::from)
        .to_vec(),
        rows,
    }
}

/// Per-size wd10 vs wd33 paired comparison at one (bits, LR) setting.
pub fn warmdown_table(records: &[RunRecord], mode: QuantMode, lr: LrTag) -> Result<Table> {
    let mut rows = Vec::new();
    for size in sizes_in(records) {
        let a = cell_finals(records, &size, mode, WdTag::Wd10, lr);
        let b = cell_finals(records, &size, mode, WdTag::Wd33, lr);
        if a.is_empty() && b.is_empty() {
            continue;
        }
        let Ok(pp) = paired_penalty(&a, &b) else {
            // Not enough shared seeds for a test — report the row as n/a
            // rather than failing the whole table.
            rows.push(vec![
                size,
                "n/a".into(),
                "n/a".into(),
                "n/a".into(),
                "n/a".into(),
                "n/a".into(),
            ]);
            continue;
        };
        let verdict = if pp.significant() {
            if pp.mean_mbpb > 0.0 {
                "wd33 (sig.)"
            } else {
                "wd10 (sig.)"
            }
        } else {
            "noise"
        };
        rows.push(vec![
            size,
            format!("{:+.2}", pp.mean_mbpb),
            format!("{:.2}", pp.se_mbpb),
            format!("{:+.2}", pp.z),
            format!("{} / {}", pp.votes_for_a, pp.n),
            verdict.to_string(),
        ]);
    }
    Ok(Table {
        title: format!(
            "wd10 vs wd33 at {}/{}",
            mode.as_str(),
            lr.as_str()
        ),
        headers: [
            "Size",
            "mean wd10 − wd33",
            "SE (mBPB)",
            "z",
            "seeds preferring wd10",
            "verdict",
        ]
        .map(String::from)
        .to_vec(),
        rows,
    })
}

/// Per-size INT4/INT6 penalties over FP16 at wd33.
pub fn aggressive_precision_table(records: &[RunRecord], lr: LrTag) -> Table {
    let wd = WdTag::Wd33;
    let mut rows = Vec::new();
    for size in sizes_in(records) {
        let fp = mean_of(&cell_finals(records, &size, QuantMode::Fp16, wd, lr));
        let i6 = mean_of(&cell_finals(records, &size, QuantMode::Int6, wd, lr));
        let i4 = mean_of(&cell_finals(records, &size, QuantMode::Int4, wd, lr));
        let (Some(f), Some(q6), Some(q4)) = (fp, i6, i4) else {
            continue;
        };
        let p6 = mbpb(q6 - f);
        let p4 = mbpb(q4 - f);
        let ratio = if p6.abs() > 1e-9 {
            format!("{:.1}", p4 / p6)
        } else {
            "—".to_string()
        };
        rows.push(vec![
            size,
            format!("{f:.4}"),
            format!("{p6:+.2}"),
            format!("{p4:+.2}"),
            ratio,
        ]);
    }
    Table {
        title: format!("INT4 vs INT6 penalties at wd33/{}", lr.as_str()),
        headers: [
            "Size",
            "FP16 BPB",
            "INT6 penalty",
            "INT4 penalty (wd33)",
            "INT4/INT6 ratio",
        ]
        .map(String::from)
        .to_vec(),
        rows,
    }
}

/// Size label → parameter count in millions: published labels parse
/// directly ("30M" → 30.0); desk presets fall back to the exact count.
pub fn size_m(name: &str) -> Result<f64> {
    if let Some(stripped) = name.strip_suffix('M') {
        if let Ok(v) = stripped.parse::<f64>() {
            return Ok(v);
        }
    }
    let cfg = crate::model::size_preset(name)?;
    Ok(crate::model::param_count(&cfg) as f64 / 1e6)
}

/// Per-size (size_M, mean penalty of `mode` over FP16 in mBPB) pairs at
/// one (warmdown, LR) setting — the scaling fit's inputs.
pub fn penalty_points(
    records: &[RunRecord],
    mode: QuantMode,
    wd: WdTag,
    lr: LrTag,
) -> Result<Vec<(f64, f64)>> {
    let mut points = Vec::new();
    for size in sizes_in(records) {
        let fp = mean_of(&cell_finals(records, &size, QuantMode::Fp16, wd, lr));
        let q = mean_of(&cell_finals(records, &size, mode, wd, lr));
        if let (Some(f), Some(qv)) = (fp, q) {
            points.push((size_m(&size)?, mbpb(qv - f)));
        }
    }
    Ok(points)
}

/// Machine-readable bundle of every analysis for one record set.
pub fn analysis_summary_json(
    records: &[RunRecord],
    wd: WdTag,
    lr: LrTag,
) -> Result<serde_json::Value> {
    let mut cells = serde_json::Map::new();
    for size in sizes_in(records) {
        for mode in QuantMode::ALL {
            let finals = cell_finals(records, &size, mode, wd, lr);
            if finals.is_empty() {
                continue;
            }
            let values: Vec<f64> = finals.iter().map(|&(_, v)| v).collect();
            let summary = summarize_cell(&values)?;
            cells.insert(
                format!("{size}/{}/{}", mode.as_str(), wd.as_str()),
                serde_json::to_value(summary).map_err(|e| Error::data(e.to_string()))?,
            );
        }
    }
    Ok(serde_json::json!({
        "records": records.len(),
        "completed": records
            .iter()
            .filter(|r| r.status == RunStatus::Completed)
            .count(),
        "cells": cells,
    }))
}
