//! Factorial sweep designs and their executor. Designs are named entries
//! in a registry — each one a union of factor blocks crossed into
//! `RunSpec`s — enumerable at published scale for auditing counts and at
//! desk scale for actually running. Execution is cell-idempotent: results
//! land in a JSONL file keyed by canonical cell identity, corrupt lines
//! are quarantined to a sidecar, and a worker pool feeds one writer.

use crate::error::{Error, Result};
use crate::optim::OptimKind;
use crate::quant::QuantMode;
use crate::schedule::{LrTag, WarmdownShape, WdTag};
use crate::trainer::{train_run, RunRecord, RunSpec, RunStatus};
use serde::{Deserialize, Serialize};
use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

pub const FULL_SEEDS: [u64; 5] = [1337, 42, 0, 7, 2024];
pub const REDUCED_SEEDS: [u64; 3] = [1337, 42, 0];

/// One full cross product of factor lists.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactorBlock {
    pub bits: Vec<QuantMode>,
    pub wds: Vec<WdTag>,
    pub lrs: Vec<LrTag>,
    pub sizes: Vec<String>,
    pub seeds: Vec<u64>,
    pub total_steps: Vec<u64>,
    pub shapes: Vec<WarmdownShape>,
    pub optims: Vec<OptimKind>,
}

impl FactorBlock {
    pub fn cell_count(&self) -> usize {
        self.bits.len()
            * self.wds.len()
            * self.lrs.len()
            * self.sizes.len()
            * self.seeds.len()
            * self.total_steps.len()
            * self.shapes.len()
            * self.optims.len()
    }
}

/// Plumbing shared by every cell of a design (not part of cell identity).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RunParams {
    pub seq_len: usize,
    pub batch_tokens: usize,
    pub grad_accum_steps: usize,
    pub eval_count: usize,
    pub eval_bytes: usize,
    pub probe_every: u64,
}

impl RunParams {
    /// Published-scale settings; designs carrying these are meant for
    /// count audits, not desk execution.
    pub fn published() -> Self {
        RunParams {
            seq_len: 256,
            batch_tokens: 8192,
            grad_accum_steps: 2,
            eval_count: 6,
            eval_bytes: 0,
            probe_every: 0,
        }
    }

    /// Desk-scale settings sized for single-core wall clocks.
    pub fn desk() -> Self {
        RunParams {
            seq_len: 64,
            batch_tokens: 128,
            grad_accum_steps: 1,
            eval_count: 6,
            eval_bytes: 8192,
            probe_every: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridDesign {
    pub name: String,
    pub blocks: Vec<FactorBlock>,
    pub params: RunParams,
}

impl GridDesign {
    pub fn cell_count(&self) -> usize {
        self.blocks.iter().map(FactorBlock::cell_count).sum()
    }
}

const PHASE2_SIZES: [&str; 4] = ["15M", "30M", "50M", "100M"];
const PHASE2_BITS: [QuantMode; 3] = [QuantMode::Fp16, QuantMode::Int8, QuantMode::Int6];
const ALL_WDS: [WdTag; 4] = [WdTag::Wd00, WdTag::Wd10, WdTag::Wd33, WdTag::Wd50];

#[allow(clippy::too_many_arguments)]
fn block(
    bits: &[QuantMode],
    wds: &[WdTag],
    lrs: &[LrTag],
    sizes: &[&str],
    seeds: &[u64],
    total_steps: &[u64],
    shape: WarmdownShape,
    optim: OptimKind,
) -> FactorBlock {
    FactorBlock {
        bits: bits.to_vec(),
        wds: wds.to_vec(),
        lrs: lrs.to_vec(),
        sizes: sizes.iter().map(|s| s.to_string()).collect(),
        seeds: seeds.to_vec(),
        total_steps: total_steps.to_vec(),
        shapes: vec![shape],
        optims: vec![optim],
    }
}

/// Built-in designs: the published factorial grids (audit scale) and
/// their desk-scale mirrors (size, T, and seed count substituted per the
/// mapping documented on each entry).
pub fn builtin_design(name: &str) -> Result<GridDesign> {
    use OptimKind::{AllAdamw, MuonAdamw};
    use WarmdownShape::{Cosine, Linear};
    let linear_muon = |bits: &[QuantMode],
                       wds: &[WdTag],
                       lrs: &[LrTag],
                       sizes: &[&str],
                       seeds: &[u64],
                       t: &[u64]| {
        block(bits, wds, lrs, sizes, seeds, t, Linear, MuonAdamw)
    };
    let design = match name {
        // 3 bits × 4 warmdowns × 3 LR magnitudes × 4 sizes × 5 seeds.
        "phase2" => GridDesign {
            name: name.into(),
            blocks: vec![linear_muon(
                &PHASE2_BITS,
                &ALL_WDS,
                &[LrTag::Lr05, LrTag::Lr1x, LrTag::Lr2x],
                &PHASE2_SIZES,
                &FULL_SEEDS,
                &[9000],
            )],
            params: RunParams::published(),
        },
        // The lr1x slice of phase2 rerun under AdamW at its calibrated LR.
        "d1" => GridDesign {
            name: name.into(),
            blocks: vec![block(
                &PHASE2_BITS,
                &ALL_WDS,
                &[LrTag::AdamwCal],
                &PHASE2_SIZES,
                &FULL_SEEDS,
                &[9000],
                Linear,
                AllAdamw,
            )],
            params: RunParams::published(),
        },
        // Longer training: 30M at 27k/81k across wd × bits (reduced
        // seeds), plus a 9-cell 100M block at 27k wd33.
        "d2" => GridDesign {
            name: name.into(),
            blocks: vec![
                linear_muon(
                    &PHASE2_BITS,
                    &ALL_WDS,
                    &[LrTag::Lr1x],
                    &["30M"],
                    &REDUCED_SEEDS,
                    &[27_000, 81_000],
                ),
                linear_muon(
                    &PHASE2_BITS,
                    &[WdTag::Wd33],
                    &[LrTag::Lr1x],
                    &["100M"],
                    &REDUCED_SEEDS,
                    &[27_000],
                ),
            ],
            params: RunParams::published(),
        },
        // Cosine warmdown over the wd33 cells.
        "d3" => GridDesign {
            name: name.into(),
            blocks: vec![block(
                &PHASE2_BITS,
                &[WdTag::Wd33],
                &[LrTag::Lr1x],
                &PHASE2_SIZES,
                &FULL_SEEDS,
                &[9000],
                Cosine,
                MuonAdamw,
            )],
            params: RunParams::published(),
        },
        // Five held-out sizes for scaling-law validation.
        "d4" => GridDesign {
            name: name.into(),
            blocks: vec![linear_muon(
                &PHASE2_BITS,
                &[WdTag::Wd33],
                &[LrTag::Lr1x],
                &["5M", "8M", "175M", "250M", "350M"],
                &FULL_SEEDS,
                &[9000],
            )],
            params: RunParams::published(),
        },
        // INT4 across the phase2 sizes.
        "d5" => GridDesign {
            name: name.into(),
            blocks: vec![linear_muon(
                &[QuantMode::Int4],
                &ALL_WDS,
                &[LrTag::Lr1x],
                &PHASE2_SIZES,
                &FULL_SEEDS,
                &[9000],
            )],
            params: RunParams::published(),
        },
        // INT4 below the phase2 range.
        "d6" => GridDesign {
            name: name.into(),
            blocks: vec![linear_muon(
                &[QuantMode::Int4],
                &ALL_WDS,
                &[LrTag::Lr1x],
                &["3M", "5M", "8M", "10M"],
                &FULL_SEEDS,
                &[9000],
            )],
            params: RunParams::published(),
        },
        // Grid-distance snapshots every 200 steps, reduced seeds.
        "m2" => GridDesign {
            name: name.into(),
            blocks: vec![linear_muon(
                &PHASE2_BITS,
                &[WdTag::Wd33],
                &[LrTag::Lr1x],
                &["30M"],
                &REDUCED_SEEDS,
                &[9000],
            )],
            params: RunParams {
                probe_every: 200,
                ..RunParams::published()
            },
        },
        // Desk mirror of phase2: sizes → {desk-S, desk-M}, T 9000 → 1500,
        // seeds reduced, single LR.
        "desk-phase2" => GridDesign {
            name: name.into(),
            blocks: vec![linear_muon(
                &PHASE2_BITS,
                &ALL_WDS,
                &[LrTag::Lr1x],
                &["desk-S", "desk-M"],
                &REDUCED_SEEDS,
                &[1500],
            )],
            params: RunParams::desk(),
        },
        // Desk mirror of m2: desk-S, T 1600 so the 200-step probe cadence
        // divides evenly.
        "desk-m2" => GridDesign {
            name: name.into(),
            blocks: vec![linear_muon(
                &PHASE2_BITS,
                &[WdTag::Wd33],
                &[LrTag::Lr1x],
                &["desk-S"],
                &REDUCED_SEEDS,
                &[1600],
            )],
            params: RunParams {
                probe_every: 200,
                ..RunParams::desk()
            },
        },
        // Minimal directional check: warmdown effect in FP16/INT6 plus
        // the INT4 < INT6 < FP16 quality ordering at wd33.
        "desk-smoke" => GridDesign {
            name: name.into(),
            blocks: vec![
                linear_muon(
                    &[QuantMode::Fp16, QuantMode::Int6],
                    &[WdTag::Wd00],
                    &[LrTag::Lr1x],
                    &["desk-S"],
                    &REDUCED_SEEDS,
                    &[1500],
                ),
                linear_muon(
                    &[QuantMode::Fp16, QuantMode::Int6, QuantMode::Int4],
                    &[WdTag::Wd33],
                    &[LrTag::Lr1x],
                    &["desk-S"],
                    &REDUCED_SEEDS,
                    &[1500],
                ),
            ],
            params: RunParams::desk(),
        },
        other => {
            return Err(Error::config(format!("unknown grid design '{other}'")))
        }
    };
    Ok(design)
}

pub const BUILTIN_DESIGNS: [&str; 11] = [
    "phase2",
    "d1",
    "d2",
    "d3",
    "d4",
    "d5",
    "d6",
    "m2",
    "desk-phase2",
    "desk-m2",
    "desk-smoke",
];

/// Loads a custom design from TOML matching the serialised `GridDesign`
/// schema (`name`, `[params]`, one or more `[[blocks]]` tables).
pub fn load_design_toml(path: &Path) -> Result<GridDesign> {
    let text = std::fs::read_to_string(path)?;
    let design: GridDesign = toml::from_str(&text)
        .map_err(|e| Error::config(format!("design file {}: {e}", path.display())))?;
    if design.blocks.is_empty() {
        return Err(Error::config("design has no factor blocks"));
    }
    Ok(design)
}

/// Expands a design into concrete `RunSpec`s in deterministic order
/// (blocks in declaration order; within a block, the nesting is
/// bits → wd → lr → size → seed → T → shape → optimiser).
pub fn enumerate(design: &GridDesign, data_path: &str) -> Vec<RunSpec> {
    let mut specs = Vec::with_capacity(design.cell_count());
    let p = design.params;
    for b in &design.blocks {
        for &bits in &b.bits {
            for &wd in &b.wds {
                for &lr in &b.lrs {
                    for size in &b.sizes {
                        for &seed in &b.seeds {
                            for &t in &b.total_steps {
                                for &shape in &b.shapes {
                                    for &optim in &b.optims {
                                        specs.push(RunSpec {
                                            size: size.clone(),
                                            mode: bits,
                                            wd,
                                            shape,
                                            lr,
                                            optim,
                                            seed,
                                            total_steps: t,
                                            warmup_steps: 100.min(t / 10),
                                            batch_tokens: p.batch_tokens,
                                            seq_len: p.seq_len,
                                            grad_accum_steps: p.grad_accum_steps,
                                            eval_count: p.eval_count,
                                            probe_every: p.probe_every,
                                            data_path: data_path.to_string(),
                                            split_fraction: 0.9,
                                            eval_bytes: p.eval_bytes,
                                            quantise_embedding: true,
                                        });
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    specs
}

/// Partial cell identity; `None` fields match anything.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CellFilter {
    pub bits: Option<QuantMode>,
    pub wd: Option<WdTag>,
    pub lr: Option<LrTag>,
    pub size: Option<String>,
    pub seed: Option<u64>,
    pub total_steps: Option<u64>,
    pub shape: Option<WarmdownShape>,
    pub optim: Option<OptimKind>,
}

impl CellFilter {
    pub fn matches(&self, spec: &RunSpec) -> bool {
        self.bits.is_none_or(|v| spec.mode == v)
            && self.wd.is_none_or(|v| spec.wd == v)
            && self.lr.is_none_or(|v| spec.lr == v)
            && self.size.as_ref().is_none_or(|v| &spec.size == v)
            && self.seed.is_none_or(|v| spec.seed == v)
            && self.total_steps.is_none_or(|v| spec.total_steps == v)
            && self.shape.is_none_or(|v| spec.shape == v)
            && self.optim.is_none_or(|v| spec.optim == v)
    }

    /// Parses `key=value` clauses joined by `|` or `,`
    /// (e.g. `bits=int6|wd=wd33`).
    pub fn parse(text: &str) -> Result<Self> {
        let mut f = CellFilter::default();
        for clause in text.split(['|', ',']).filter(|c| !c.trim().is_empty()) {
            let (key, value) = clause
                .split_once('=')
                .ok_or_else(|| Error::config(format!("filter clause '{clause}' lacks '='")))?;
            let value = value.trim();
            match key.trim() {
                "bits" => f.bits = Some(QuantMode::parse(value)?),
                "wd" => f.wd = Some(WdTag::parse(value)?),
                "lr" => f.lr = Some(LrTag::parse(value)?),
                "size" => f.size = Some(value.to_string()),
                "seed" => {
                    f.seed = Some(value.parse().map_err(|_| {
                        Error::config(format!("bad seed '{value}'"))
                    })?)
                }
                "T" => {
                    f.total_steps = Some(value.parse().map_err(|_| {
                        Error::config(format!("bad T '{value}'"))
                    })?)
                }
                "shape" => f.shape = Some(WarmdownShape::parse(value)?),
                "optim" => f.optim = Some(OptimKind::parse(value)?),
                other => {
                    return Err(Error::config(format!("unknown filter key '{other}'")))
                }
            }
        }
        Ok(f)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ExecSummary {
    pub completed: usize,
    pub skipped: usize,
    pub diverged: usize,
}

/// Guard file taken with an exclusive create; its existence signals a
/// concurrent writer on the same results file.
struct ResultsLock {
    path: PathBuf,
}

impl ResultsLock {
    fn acquire(results: &Path) -> Result<Self> {
        let path = results.with_extension("jsonl.lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(ResultsLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Io(
                std::io::Error::new(
                    std::io::ErrorKind::AlreadyExists,
                    format!(
                        "results file is locked by {} — remove it if no sweep is running",
                        path.display()
                    ),
                ),
            )),
            Err(e) => Err(Error::Io(e)),
        }
    }
}

impl Drop for ResultsLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Reads all well-formed records; malformed lines are appended to
/// `<results>.quarantine` and dropped from the results file.
pub fn read_records(results: &Path) -> Result<Vec<RunRecord>> {
    let text = std::fs::read_to_string(results)?;
    let mut records = Vec::new();
    let mut good_lines = Vec::new();
    let mut bad_lines = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<RunRecord>(line) {
            Ok(rec) => {
                records.push(rec);
                good_lines.push(line);
            }
            Err(_) => bad_lines.push(line),
        }
    }
    if !bad_lines.is_empty() {
        let sidecar = results.with_extension("jsonl.quarantine");
        let mut q = OpenOptions::new().create(true).append(true).open(&sidecar)?;
        for line in &bad_lines {
            writeln!(q, "{line}")?;
        }
        let mut rewritten = good_lines.join("\n");
        if !rewritten.is_empty() {
            rewritten.push('\n');
        }
        std::fs::write(results, rewritten)?;
    }
    Ok(records)
}

/// All records matching the filter, ordered by cell key.
pub fn query(results: &Path, filter: &CellFilter) -> Result<Vec<RunRecord>> {
    let mut records: Vec<RunRecord> = read_records(results)?
        .into_iter()
        .filter(|r| filter.matches(&r.spec))
        .collect();
    records.sort_by(|a, b| a.cell_key.cmp(&b.cell_key));
    Ok(records)
}

/// Runs every spec whose cell key is not already in the results file.
/// Cells are independent; `workers` threads pull from a shared queue and
/// a single writer appends finished records, so per-cell numerics cannot
/// depend on the worker count.
pub fn execute(specs: &[RunSpec], workers: usize, results: &Path) -> Result<ExecSummary> {
    if workers == 0 {
        return Err(Error::config("workers must be ≥ 1"));
    }
    let _lock = ResultsLock::acquire(results)?;
    let done: std::collections::HashSet<String> = if results.exists() {
        read_records(results)?
            .into_iter()
            .map(|r| r.cell_key)
            .collect()
    } else {
        std::collections::HashSet::new()
    };

    let mut summary = ExecSummary::default();
    let pending: Vec<&RunSpec> = specs
        .iter()
        .filter(|s| {
            let fresh = !done.contains(&s.cell_key());
            if !fresh {
                summary.skipped += 1;
            }
            fresh
        })
        .collect();

    let file = OpenOptions::new().create(true).append(true).open(results)?;
    let mut out = BufWriter::new(file);
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<Result<RunRecord>>();

    std::thread::scope(|scope| -> Result<()> {
        for _ in 0..workers.min(pending.len().max(1)) {
            let tx = tx.clone();
            let pending = &pending;
            let next = &next;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= pending.len() {
                    break;
                }
                if tx.send(train_run(pending[i])).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        for outcome in rx {
            let record = outcome?;
            if matches!(record.status, RunStatus::Diverged { .. }) {
                summary.diverged += 1;
            } else {
                summary.completed += 1;
            }
            let line = serde_json::to_string(&record)
                .map_err(|e| Error::data(format!("record encode: {e}")))?;
            writeln!(out, "{line}")?;
            out.flush()?;
        }
        Ok(())
    })?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_cell_counts() {
        let expected = [
            ("phase2", 720),
            ("d1", 240),
            ("d2", 81),
            ("d3", 60),
            ("d4", 75),
            ("d5", 80),
            ("d6", 80),
            ("m2", 9),
        ];
        let mut total = 0;
        for (name, count) in expected {
            let design = builtin_design(name).unwrap();
            assert_eq!(design.cell_count(), count, "{name}");
            assert_eq!(enumerate(&design, "x").len(), count, "{name} enumeration");
            total += count;
        }
        assert_eq!(total, 1345);
    }

    #[test]
    fn desk_design_counts() {
        assert_eq!(builtin_design("desk-smoke").unwrap().cell_count(), 15);
        assert_eq!(builtin_design("desk-phase2").unwrap().cell_count(), 72);
        assert_eq!(builtin_design("desk-m2").unwrap().cell_count(), 9);
        assert!(builtin_design("phase3").is_err());
    }

    #[test]
    fn d5_is_all_int4_and_m2_probes() {
        let d5 = builtin_design("d5").unwrap();
        let specs = enumerate(&d5, "x");
        assert_eq!(specs.len(), 80);
        assert!(specs.iter().all(|s| s.mode == QuantMode::Int4));
        let m2 = enumerate(&builtin_design("m2").unwrap(), "x");
        assert_eq!(m2.len(), 9);
        assert!(m2.iter().all(|s| s.probe_every == 200 && s.seed != 7));
    }

    #[test]
    fn enumeration_is_stable_and_unique() {
        let design = builtin_design("phase2").unwrap();
        let a = enumerate(&design, "x");
        let b = enumerate(&design, "x");
        let keys: Vec<String> = a.iter().map(|s| s.cell_key()).collect();
        assert_eq!(keys, b.iter().map(|s| s.cell_key()).collect::<Vec<_>>());
        let unique: std::collections::HashSet<&String> = keys.iter().collect();
        assert_eq!(unique.len(), keys.len());
    }

    #[test]
    fn filter_parsing_and_matching() {
        let design = builtin_design("desk-smoke").unwrap();
        let specs = enumerate(&design, "x");
        let f = CellFilter::parse("bits=int6|wd=wd33").unwrap();
        let hits: Vec<&RunSpec> = specs.iter().filter(|s| f.matches(s)).collect();
        assert_eq!(hits.len(), 3); // three seeds
        assert!(CellFilter::parse("bits=int9").is_err());
        assert!(CellFilter::parse("flavour=mint").is_err());
        assert_eq!(CellFilter::parse("").unwrap(), CellFilter::default());
        let all: Vec<&RunSpec> = specs
            .iter()
            .filter(|s| CellFilter::default().matches(s))
            .collect();
        assert_eq!(all.len(), specs.len());
    }

    #[test]
    fn toml_design_round_trip() {
        let design = builtin_design("desk-smoke").unwrap();
        let text = toml::to_string(&design).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("design.toml");
        std::fs::write(&path, &text).unwrap();
        let loaded = load_design_toml(&path).unwrap();
        assert_eq!(loaded.cell_count(), 15);
        assert_eq!(
            enumerate(&loaded, "x")
                .iter()
                .map(|s| s.cell_key())
                .collect::<Vec<_>>(),
            enumerate(&design, "x")
                .iter()
                .map(|s| s.cell_key())
                .collect::<Vec<_>>()
        );
    }

    fn micro_specs(n: usize) -> Vec<RunSpec> {
        let design = builtin_design("desk-smoke").unwrap();
        let corpus = concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures/corpus.txt");
        let mut specs = enumerate(&design, corpus);
        specs.truncate(n);
        for s in &mut specs {
            s.total_steps = 4;
            s.warmup_steps = 0;
            s.eval_count = 2;
            s.eval_bytes = 512;
        }
        specs
    }

    #[test]
    fn execute_runs_then_resumes_idempotently() {
        let dir = tempfile::tempdir().unwrap();
        let results = dir.path().join("results.jsonl");
        let specs = micro_specs(4);
        let s1 = execute(&specs, 2, &results).unwrap();
        assert_eq!((s1.completed, s1.skipped, s1.diverged), (4, 0, 0));
        let s2 = execute(&specs, 2, &results).unwrap();
        assert_eq!((s2.completed, s2.skipped, s2.diverged), (0, 4, 0));
        assert_eq!(read_records(&results).unwrap().len(), 4);
    }

    #[test]
    fn worker_count_does_not_change_records() {
        let dir = tempfile::tempdir().unwrap();
        let specs = micro_specs(4);
        let r1 = dir.path().join("w1.jsonl");
        let r4 = dir.path().join("w4.jsonl");
        execute(&specs, 1, &r1).unwrap();
        execute(&specs, 4, &r4).unwrap();
        let mut a = read_records(&r1).unwrap();
        let mut b = read_records(&r4).unwrap();
        a.sort_by(|x, y| x.cell_key.cmp(&y.cell_key));
        b.sort_by(|x, y| x.cell_key.cmp(&y.cell_key));
        assert_eq!(a.len(), b.len());
        for (mut x, mut y) in a.into_iter().zip(b) {
            x.wall_time_secs = 0.0;
            y.wall_time_secs = 0.0;
            assert_eq!(x, y);
        }
    }

    #[test]
    fn corrupt_lines_are_quarantined_and_execution_continues() {
        let dir = tempfile::tempdir().unwrap();
        let results = dir.path().join("results.jsonl");
        let specs = micro_specs(2);
        execute(&specs[..1], 1, &results).unwrap();
        let mut text = std::fs::read_to_string(&results).unwrap();
        text.push_str("{ this is not json\n");
        std::fs::write(&results, text).unwrap();
        let summary = execute(&specs, 1, &results).unwrap();
        assert_eq!((summary.completed, summary.skipped), (1, 1));
        let quarantine = results.with_extension("jsonl.quarantine");
        assert!(quarantine.exists());
        assert!(std::fs::read_to_string(&quarantine)
            .unwrap()
            .contains("not json"));
        assert_eq!(read_records(&results).unwrap().len(), 2);
    }

    #[test]
    fn lock_blocks_concurrent_execution_and_is_released() {
        let dir = tempfile::tempdir().unwrap();
        let results = dir.path().join("results.jsonl");
        let specs = micro_specs(1);
        let lock = ResultsLock::acquire(&results).unwrap();
        assert!(execute(&specs, 1, &results).is_err());
        drop(lock);
        assert!(execute(&specs, 1, &results).is_ok());
    }

    #[test]
    fn query_filters_and_orders() {
        let dir = tempfile::tempdir().unwrap();
        let results = dir.path().join("results.jsonl");
        let specs = micro_specs(4);
        execute(&specs, 1, &results).unwrap();
        let all = query(&results, &CellFilter::default()).unwrap();
        assert_eq!(all.len(), 4);
        assert!(all.windows(2).all(|w| w[0].cell_key <= w[1].cell_key));
        let f = CellFilter {
            seed: Some(1337),
            ..CellFilter::default()
        };
        let hits = query(&results, &f).unwrap();
        assert!(!hits.is_empty());
        assert!(hits.iter().all(|r| r.spec.seed == 1337));
        let none = CellFilter {
            seed: Some(999),
            ..CellFilter::default()
        };
        assert!(query(&results, &none).unwrap().is_empty());
        assert!(query(dir.path().join("missing.jsonl").as_path(), &CellFilter::default()).is_err());
    }
}
