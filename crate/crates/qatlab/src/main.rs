//! Command-line entry point: single training runs, sweep execution,
//! enumeration audits, results analysis into CSV/JSON tables, checkpoint
//! grid-distance probes, footprint arithmetic, and SVG figures.

use clap::{Args, Parser, Subcommand};
use qatlab::grid::{builtin_design, enumerate, load_design_toml, read_records, BUILTIN_DESIGNS};
use qatlab::model::{load_checkpoint, save_checkpoint, CheckpointMeta};
use qatlab::optim::OptimKind;
use qatlab::quant::QuantMode;
use qatlab::report;
use qatlab::schedule::{LrTag, WarmdownShape, WdTag};
use qatlab::stats;
use qatlab::trainer::{train_run_with_model, RunSpec, RunStatus};
use qatlab::{Error, Result};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_USAGE: u8 = 1;
const EXIT_DIVERGED: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(
    name = "qatlab",
    version,
    about = "Desk-scale quantisation-aware-training laboratory",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand)]
enum Verb {
    /// Train one cell and print its record as JSON on stdout.
    Run(RunArgs),
    /// Execute a sweep design against a results file (resumable).
    Grid(GridArgs),
    /// Print cell counts for sweep designs without executing anything.
    Audit(AuditArgs),
    /// Summarise a results file into CSV tables or fit coefficients.
    Analyze(AnalyzeArgs),
    /// Recompute the mean weight-to-grid distance of a checkpoint.
    Probe(ProbeArgs),
    /// Energy / CO2 / water arithmetic for a compute budget.
    Footprint(FootprintArgs),
    /// Emit SVG figures from a results file.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Model size preset (e.g. desk-S, desk-M, 30M).
    #[arg(long, default_value = "desk-S")]
    size: String,
    /// Quantisation mode: fp16 | int8 | int6 | int4.
    #[arg(long, default_value = "fp16")]
    bits: String,
    /// Warmdown fraction as a tag (wd33) or a fraction (0.33).
    #[arg(long, default_value = "wd33")]
    wd: String,
    /// Learning-rate magnitude tag: lr05 | lr1x | lr2x | adamw_cal.
    #[arg(long, default_value = "lr1x")]
    lr: String,
    /// Warmdown shape: linear | cosine.
    #[arg(long, default_value = "linear")]
    shape: String,
    /// Optimiser kind: muon_adamw | all_adamw.
    #[arg(long, default_value = "muon_adamw")]
    optim: String,
    #[arg(long, default_value_t = 1337)]
    seed: u64,
    /// Total optimiser steps.
    #[arg(long, default_value_t = 1500)]
    steps: u64,
    /// Warmup steps (default: min(100, steps/10)).
    #[arg(long)]
    warmup: Option<u64>,
    #[arg(long, default_value_t = 64)]
    seq_len: usize,
    #[arg(long, default_value_t = 128)]
    batch_tokens: usize,
    #[arg(long, default_value_t = 1)]
    grad_accum: usize,
    #[arg(long, default_value_t = 6)]
    eval_count: usize,
    /// Cap on validation bytes per evaluation (0 = whole split).
    #[arg(long, default_value_t = 8192)]
    eval_bytes: usize,
    /// Probe the weight-grid distance every N steps (0 = off).
    #[arg(long, default_value_t = 0)]
    probe_every: u64,
    /// Byte corpus to train on.
    #[arg(long)]
    data: PathBuf,
    /// Train/validation split point as a fraction of the corpus.
    #[arg(long, default_value_t = 0.9)]
    split: f64,
    /// Keep the tied embedding in full precision even in integer modes.
    #[arg(long)]
    fp_embedding: bool,
    /// Also append the record to this JSONL results file.
    #[arg(long, env = "QATLAB_RESULTS")]
    results: Option<PathBuf>,
    /// Save the final master weights as a checkpoint.
    #[arg(long)]
    save_checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    /// Built-in design name (see `qatlab audit` for the list).
    #[arg(long, conflicts_with = "design_file")]
    design: Option<String>,
    /// Custom design as TOML (`name`, `[params]`, `[[blocks]]`).
    #[arg(long)]
    design_file: Option<PathBuf>,
    /// Byte corpus to train on.
    #[arg(long)]
    data: PathBuf,
    /// JSONL results file; cells already recorded there are skipped.
    #[arg(long, env = "QATLAB_RESULTS")]
    results: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct AuditArgs {
    /// Audit a single design instead of all built-ins.
    #[arg(long)]
    design: Option<String>,
    /// Audit a custom TOML design.
    #[arg(long, conflicts_with = "design")]
    design_file: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Analysis kind: summary | penalty | fit | predict.
    #[arg(long)]
    kind: String,
    /// JSONL results file.
    #[arg(long, env = "QATLAB_RESULTS")]
    results: PathBuf,
    /// Quantisation mode the penalty/fit/predict kinds compare to fp16.
    #[arg(long, default_value = "int6")]
    bits: String,
    /// Warmdown cell to analyse (tag or fraction).
    #[arg(long, default_value = "wd33")]
    wd: String,
    #[arg(long, default_value = "lr1x")]
    lr: String,
    /// Comma-separated sizes the `predict` kind fits on; the rest of the
    /// sizes present are scored as held-out points.
    #[arg(long, default_value = "15M,30M,50M,100M")]
    fit_sizes: String,
    /// Emit JSON instead of CSV (summary and fit kinds).
    #[arg(long)]
    json: bool,
    /// Write the artifact here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProbeArgs {
    /// Checkpoint file written by `run --save-checkpoint`.
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct FootprintArgs {
    #[arg(long, allow_negative_numbers = true)]
    gpu_hours: f64,
    /// Per-GPU draw in kW.
    #[arg(long, allow_negative_numbers = true)]
    gpu_kw: f64,
    /// Host overhead as a fraction of GPU energy (0.30 = +30%).
    #[arg(long, allow_negative_numbers = true)]
    host_overhead: f64,
    /// Datacentre power usage effectiveness.
    #[arg(long, allow_negative_numbers = true)]
    pue: f64,
    /// Grid carbon intensity in gCO2 per kWh.
    #[arg(long, allow_negative_numbers = true)]
    grid_intensity: f64,
    /// Water usage in litres per kWh.
    #[arg(long, allow_negative_numbers = true)]
    water: f64,
}

#[derive(Args)]
struct ReportArgs {
    /// Figure kind: warmdown | scaling | penalty-ci | all.
    #[arg(long, default_value = "all")]
    figure: String,
    /// JSONL results file.
    #[arg(long, env = "QATLAB_RESULTS")]
    results: PathBuf,
    /// Directory the SVG files are written into.
    #[arg(long)]
    out: PathBuf,
    /// Size the warmdown figure plots.
    #[arg(long, default_value = "desk-S")]
    size: String,
    /// Quantisation mode for the scaling and penalty-CI figures.
    #[arg(long, default_value = "int6")]
    bits: String,
    #[arg(long, default_value = "wd33")]
    wd: String,
    #[arg(long, default_value = "lr1x")]
    lr: String,
    /// Comma-separated sizes the scaling figure's fit uses.
    #[arg(long, default_value = "15M,30M,50M,100M")]
    fit_sizes: String,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version are successes; anything else is a usage error.
            return if e.use_stderr() {
                eprint!("{e}");
                ExitCode::from(EXIT_USAGE)
            } else {
                print!("{e}");
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.verb) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Io(_) => EXIT_IO,
                _ => EXIT_USAGE,
            })
        }
    }
}

fn dispatch(verb: Verb) -> Result<u8> {
    match verb {
        Verb::Run(a) => cmd_run(a),
        Verb::Grid(a) => cmd_grid(a),
        Verb::Audit(a) => cmd_audit(a),
        Verb::Analyze(a) => cmd_analyze(a),
        Verb::Probe(a) => cmd_probe(a),
        Verb::Footprint(a) => cmd_footprint(a),
        Verb::Report(a) => cmd_report(a),
    }
}

/// Accepts either a warmdown tag ("wd33") or a fraction ("0.33").
fn parse_wd(s: &str) -> Result<WdTag> {
    if let Ok(tag) = WdTag::parse(s) {
        return Ok(tag);
    }
    let frac: f64 = s
        .parse()
        .map_err(|_| Error::config(format!("warmdown '{s}' is neither a tag nor a number")))?;
    WdTag::ALL
        .into_iter()
        .find(|t| (t.fraction() - frac).abs() < 1e-9)
        .ok_or_else(|| {
            Error::config(format!(
                "warmdown fraction {s} is not one of 0, 0.10, 0.33, 0.50"
            ))
        })
}

fn parse_sizes(csv: &str) -> Vec<String> {
    csv.split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

fn write_artifact(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_run(a: RunArgs) -> Result<u8> {
    let mut spec = RunSpec::desk_default(
        &a.size,
        QuantMode::parse(&a.bits)?,
        parse_wd(&a.wd)?,
        a.seed,
        a.steps,
        &a.data.to_string_lossy(),
    );
    spec.lr = LrTag::parse(&a.lr)?;
    spec.shape = WarmdownShape::parse(&a.shape)?;
    spec.optim = OptimKind::parse(&a.optim)?;
    if let Some(w) = a.warmup {
        spec.warmup_steps = w;
    }
    spec.seq_len = a.seq_len;
    spec.batch_tokens = a.batch_tokens;
    spec.grad_accum_steps = a.grad_accum;
    spec.eval_count = a.eval_count;
    spec.eval_bytes = a.eval_bytes;
    spec.probe_every = a.probe_every;
    spec.split_fraction = a.split;
    spec.quantise_embedding = !a.fp_embedding;

    let (record, model) = train_run_with_model(&spec)?;
    if let Some(path) = &a.save_checkpoint {
        let mut meta = CheckpointMeta::new();
        meta.insert("cell_key".into(), record.cell_key.clone());
        meta.insert("steps".into(), record.spec.total_steps.to_string());
        if let Some(p) = record.probes.last() {
            meta.insert("probe_step".into(), p.step.to_string());
            meta.insert(
                "mean_grid_distance".into(),
                format!("{:.17e}", p.mean_grid_distance),
            );
        }
        save_checkpoint(path, &model, &meta)?;
    }
    if let Some(results) = &a.results {
        append_record(results, &record)?;
    }
    let json = serde_json::to_string(&record).map_err(|e| Error::data(e.to_string()))?;
    println!("{json}");
    Ok(match record.status {
        RunStatus::Completed => 0,
        RunStatus::Diverged { at_step } => {
            eprintln!("error: run diverged at step {at_step}");
            EXIT_DIVERGED
        }
    })
}

fn append_record(path: &Path, record: &qatlab::trainer::RunRecord) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    let line = serde_json::to_string(record).map_err(|e| Error::data(e.to_string()))?;
    writeln!(f, "{line}")?;
    f.flush()?;
    Ok(())
}

fn load_design(name: Option<&str>, file: Option<&Path>) -> Result<qatlab::grid::GridDesign> {
    match (name, file) {
        (Some(n), None) => builtin_design(n),
        (None, Some(p)) => load_design_toml(p),
        _ => Err(Error::config(
            "exactly one of --design or --design-file is required",
        )),
    }
}

fn cmd_grid(a: GridArgs) -> Result<u8> {
    let design = load_design(a.design.as_deref(), a.design_file.as_deref())?;
    if design.params.batch_tokens > 1024 {
        eprintln!(
            "warning: design '{}' carries published-scale batch settings; \
             expect very long wall clocks (use `audit` for counts only)",
            design.name
        );
    }
    let specs = enumerate(&design, &a.data.to_string_lossy());
    let summary = qatlab::grid::execute(&specs, a.workers, &a.results)?;
    eprintln!(
        "grid '{}': {} completed, {} skipped, {} diverged ({} cells total)",
        design.name,
        summary.completed,
        summary.skipped,
        summary.diverged,
        specs.len()
    );
    Ok(if summary.diverged > 0 { EXIT_DIVERGED } else { 0 })
}

fn cmd_audit(a: AuditArgs) -> Result<u8> {
    let designs: Vec<qatlab::grid::GridDesign> = if let Some(path) = &a.design_file {
        vec![load_design_toml(path)?]
    } else if let Some(name) = &a.design {
        vec![builtin_design(name)?]
    } else {
        BUILTIN_DESIGNS
            .iter()
            .map(|n| builtin_design(n))
            .collect::<Result<_>>()?
    };
    println!("{:<14} {:>6}", "design", "cells");
    let mut published = 0usize;
    let mut desk = 0usize;
    for d in &designs {
        let count = d.cell_count();
        debug_assert_eq!(count, enumerate(d, "unused").len());
        println!("{:<14} {:>6}", d.name, count);
        if d.name.starts_with("desk-") {
            desk += count;
        } else {
            published += count;
        }
    }
    if desk > 0 && published > 0 {
        println!("{:<14} {:>6}", "published", published);
        println!("{:<14} {:>6}", "desk", desk);
    }
    println!("{:<14} {:>6}", "total", published + desk);
    Ok(0)
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<u8> {
    let records = read_records(&a.results)?;
    if records.is_empty() {
        return Err(Error::data(format!(
            "no records in {}",
            a.results.display()
        )));
    }
    let mode = QuantMode::parse(&a.bits)?;
    let wd = parse_wd(&a.wd)?;
    let lr = LrTag::parse(&a.lr)?;
    let artifact = match a.kind.as_str() {
        "summary" => {
            if a.json {
                let value = stats::analysis_summary_json(&records, wd, lr)?;
                serde_json::to_string_pretty(&value).map_err(|e| Error::data(e.to_string()))? + "\n"
            } else {
                stats::quality_table(&records, wd, lr).to_csv()
            }
        }
        "penalty" => stats::warmdown_table(&records, mode, lr)?.to_csv(),
        "fit" => {
            let fit_sizes: Vec<f64> = parse_sizes(&a.fit_sizes)
                .iter()
                .map(|s| stats::size_m(s))
                .collect::<Result<_>>()?;
            let points: Vec<(f64, f64)> = stats::penalty_points(&records, mode, wd, lr)?
                .into_iter()
                .filter(|(sz, _)| fit_sizes.iter().any(|f| (f - sz).abs() < 1e-9))
                .collect();
            let fit = stats::fit_log_linear(&points)?;
            let value = serde_json::to_value(fit).map_err(|e| Error::data(e.to_string()))?;
            serde_json::to_string_pretty(&value).map_err(|e| Error::data(e.to_string()))? + "\n"
        }
        "predict" => {
            let (fit, holdout) = predict_split(&records, mode, wd, lr, &a.fit_sizes)?;
            let report = stats::holdout_validate(&fit, &holdout)?;
            stats::scaling_table(&report).to_csv()
        }
        other => {
            return Err(Error::config(format!(
                "unknown analysis kind '{other}' (expected summary|penalty|fit|predict)"
            )))
        }
    };
    write_artifact(a.out.as_deref(), &artifact)?;
    Ok(0)
}

/// Splits per-size penalty points into fit inputs (named sizes) and
/// held-out points (every other size present).
fn predict_split(
    records: &[qatlab::trainer::RunRecord],
    mode: QuantMode,
    wd: WdTag,
    lr: LrTag,
    fit_sizes_csv: &str,
) -> Result<(stats::ScalingFit, Vec<(f64, f64)>)> {
    let fit_sizes: Vec<f64> = parse_sizes(fit_sizes_csv)
        .iter()
        .map(|s| stats::size_m(s))
        .collect::<Result<_>>()?;
    let points = stats::penalty_points(records, mode, wd, lr)?;
    let (fit_points, holdout): (Vec<_>, Vec<_>) = points
        .into_iter()
        .partition(|(sz, _)| fit_sizes.iter().any(|f| (f - sz).abs() < 1e-9));
    let fit = stats::fit_log_linear(&fit_points)?;
    if holdout.is_empty() {
        return Err(Error::data(
            "no held-out sizes: every size with data is in --fit-sizes",
        ));
    }
    Ok((fit, holdout))
}

fn cmd_probe(a: ProbeArgs) -> Result<u8> {
    let (model, meta) = load_checkpoint(&a.checkpoint)?;
    let distance = model.mean_grid_distance()?;
    let value = serde_json::json!({
        "checkpoint": a.checkpoint.to_string_lossy(),
        "mean_grid_distance": distance,
        "logged": meta.get("mean_grid_distance")
            .and_then(|s| s.parse::<f64>().ok()),
    });
    println!(
        "{}",
        serde_json::to_string_pretty(&value).map_err(|e| Error::data(e.to_string()))?
    );
    Ok(0)
}

fn cmd_footprint(a: FootprintArgs) -> Result<u8> {
    let fp = stats::footprint(
        a.gpu_hours,
        a.gpu_kw,
        a.host_overhead,
        a.pue,
        a.grid_intensity,
        a.water,
    )?;
    let value = serde_json::to_value(fp).map_err(|e| Error::data(e.to_string()))?;
    println!(
        "{}",
        serde_json::to_string_pretty(&value).map_err(|e| Error::data(e.to_string()))?
    );
    Ok(0)
}

fn cmd_report(a: ReportArgs) -> Result<u8> {
    let records = read_records(&a.results)?;
    if records.is_empty() {
        return Err(Error::data(format!(
            "no records in {}",
            a.results.display()
        )));
    }
    let mode = QuantMode::parse(&a.bits)?;
    let wd = parse_wd(&a.wd)?;
    let lr = LrTag::parse(&a.lr)?;
    std::fs::create_dir_all(&a.out)?;
    let mut written = Vec::new();
    let wants = |k: &str| a.figure == k || a.figure == "all";
    if wants("warmdown") {
        let svg = report::fig_warmdown(&records, &a.size, lr)?;
        written.push(write_svg(&a.out, "warmdown.svg", &svg)?);
    }
    if wants("scaling") {
        let (fit, holdout) = predict_split(&records, mode, wd, lr, &a.fit_sizes)?;
        let hreport = stats::holdout_validate(&fit, &holdout)?;
        let svg = report::fig_scaling(&fit, &hreport)?;
        written.push(write_svg(&a.out, "scaling.svg", &svg)?);
    }
    if wants("penalty-ci") {
        let pairs = report::penalty_pairs(&records, mode, wd, lr)?;
        let svg = report::fig_penalty_ci(&pairs)?;
        written.push(write_svg(&a.out, "penalty-ci.svg", &svg)?);
    }
    if written.is_empty() {
        return Err(Error::config(format!(
            "unknown figure '{}' (expected warmdown|scaling|penalty-ci|all)",
            a.figure
        )));
    }
    for path in &written {
        println!("{}", path.display());
    }
    Ok(0)
}

fn write_svg(dir: &Path, file: &str, svg: &str) -> Result<PathBuf> {
    let path = dir.join(file);
    std::fs::write(&path, svg)?;
    Ok(path)
}
