//! Cartesian hyperparameter sweeps with replicates.
//!
//! Sweep directory layout: `sweep_plan.csv`, `data/` (shared unless an axis
//! touches the dataset), `lvm/<hash>/` (one trained LVM per distinct LVM
//! configuration), `cells/cNNN_rR/` (one run directory per cell and
//! replicate, each with a one-row `row.csv`), and finally
//! `sweep_rows.csv` and `sweep_summary.csv`.

use std::collections::HashMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use anyhow::{anyhow, bail, Context, Result};
use lfs_core::LfsError;
use log::{info, warn};
use toml::Value;

use crate::config::{value_label, ExperimentConfig};
use crate::pipeline::{self, Options, PairKind, Paths, Stage};

pub const PLAN: &str = "sweep_plan.csv";
pub const ROWS: &str = "sweep_rows.csv";
pub const SUMMARY: &str = "sweep_summary.csv";
pub const CELL_ROW: &str = "row.csv";

const METRIC_COLUMNS: [&str; 9] = [
    "status",
    "error_ia",
    "error_vf",
    "e2e_error_ia",
    "e2e_error_vf",
    "lvm_error",
    "w_ai_seconds",
    "diverged",
    "message",
];

/// One point of the grid.
#[derive(Clone, Debug)]
pub struct Cell {
    pub index: usize,
    /// `(path, value)` for every axis, in axis order.
    pub assignments: Vec<(String, Value)>,
    pub config: ExperimentConfig,
}

impl Cell {
    pub fn labels(&self) -> Vec<String> {
        self.assignments.iter().map(|(_, v)| value_label(v)).collect()
    }
}

/// Expands the sweep axes of `base` into validated cells.
pub fn plan(base: &ExperimentConfig) -> Result<Vec<Cell>> {
    let axes = &base.sweep.axes;
    if let Some(a) = axes.iter().find(|a| a.values.is_empty()) {
        bail!("sweep axis {} has no values", a.path);
    }
    let count: usize = axes.iter().map(|a| a.values.len()).product();
    let total = count * base.sweep.replicates;
    if total > base.sweep.cap {
        bail!(
            "the sweep has {count} cells x {} replicates = {total} runs, above the cap of {}",
            base.sweep.replicates,
            base.sweep.cap
        );
    }
    let mut cells = Vec::with_capacity(count);
    for index in 0..count {
        // last axis varies fastest
        let mut rest = index;
        let mut picks = vec![0; axes.len()];
        for (i, a) in axes.iter().enumerate().rev() {
            picks[i] = rest % a.values.len();
            rest /= a.values.len();
        }
        let mut cfg = base.clone();
        let mut assignments = Vec::new();
        for (a, &p) in axes.iter().zip(&picks) {
            let v = a.values[p].clone();
            cfg = cfg
                .with(&a.path, v.clone())
                .with_context(|| format!("sweep cell {index}: {} = {v}", a.path))?;
            assignments.push((a.path.clone(), v));
        }
        cells.push(Cell {
            index,
            assignments,
            config: cfg,
        });
    }
    Ok(cells)
}

/// Outcome of one cell and replicate.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub cell: usize,
    pub replicate: usize,
    pub labels: Vec<String>,
    pub ok: bool,
    pub error_ia: Option<f64>,
    pub error_vf: Option<f64>,
    pub e2e_error_ia: Option<f64>,
    pub e2e_error_vf: Option<f64>,
    pub lvm_error: Option<f64>,
    pub w_ai: Option<f64>,
    pub diverged: bool,
    pub message: String,
}

impl SweepRow {
    fn failed(cell: usize, replicate: usize, labels: Vec<String>, message: String, diverged: bool) -> Self {
        Self {
            cell,
            replicate,
            labels,
            ok: false,
            error_ia: None,
            error_vf: None,
            e2e_error_ia: None,
            e2e_error_vf: None,
            lvm_error: None,
            w_ai: None,
            diverged,
            message,
        }
    }
}

fn num(x: Option<f64>) -> String {
    x.map_or(String::new(), |v| format!("{v:.17e}"))
}

fn parse_num(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        Ok(Some(s.parse().with_context(|| format!("bad number {s:?}"))?))
    }
}

pub fn rows_header(axes: &[String]) -> Vec<String> {
    let mut h = vec!["cell".to_string(), "replicate".to_string()];
    h.extend(axes.iter().cloned());
    h.extend(METRIC_COLUMNS.iter().map(|s| s.to_string()));
    h
}

pub fn write_rows(path: &Path, axes: &[String], rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(rows_header(axes))?;
    for r in rows {
        let mut rec = vec![r.cell.to_string(), r.replicate.to_string()];
        rec.extend(r.labels.iter().cloned());
        rec.extend([
            if r.ok { "ok" } else { "failed" }.to_string(),
            num(r.error_ia),
            num(r.error_vf),
            num(r.e2e_error_ia),
            num(r.e2e_error_vf),
            num(r.lvm_error),
            num(r.w_ai),
            u8::from(r.diverged).to_string(),
            r.message.clone(),
        ]);
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a rows table; returns the axis names and the rows.
pub fn read_rows(path: &Path) -> Result<(Vec<String>, Vec<SweepRow>)> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let n_axes = header
        .len()
        .checked_sub(2 + METRIC_COLUMNS.len())
        .ok_or_else(|| anyhow!("{} is not a sweep rows table", path.display()))?;
    let axes = header[2..2 + n_axes].to_vec();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = |i: usize| rec.get(i).unwrap_or("");
        let m = 2 + n_axes;
        rows.push(SweepRow {
            cell: f(0).parse()?,
            replicate: f(1).parse()?,
            labels: (2..m).map(|i| f(i).to_string()).collect(),
            ok: f(m) == "ok",
            error_ia: parse_num(f(m + 1))?,
            error_vf: parse_num(f(m + 2))?,
            e2e_error_ia: parse_num(f(m + 3))?,
            e2e_error_vf: parse_num(f(m + 4))?,
            lvm_error: parse_num(f(m + 5))?,
            w_ai: parse_num(f(m + 6))?,
            diverged: f(m + 7) == "1",
            message: f(m + 8).to_string(),
        });
    }
    Ok((axes, rows))
}

/// Mean and sample standard deviation (`None` below two values).
pub fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.len() > 1).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(mean), std)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub cell: usize,
    pub labels: Vec<String>,
    pub ok: usize,
    pub failed: usize,
    pub error_ia: (Option<f64>, Option<f64>),
    pub error_vf: (Option<f64>, Option<f64>),
    pub e2e_error_ia: (Option<f64>, Option<f64>),
    pub e2e_error_vf: (Option<f64>, Option<f64>),
    pub lvm_error: (Option<f64>, Option<f64>),
    pub best_ia: bool,
    pub best_vf: bool,
}

/// Axis that names the architecture for best-row flags: the LIN family,
/// else the LVM family, else none (one group).
fn architecture_axis(axes: &[String]) -> Option<usize> {
    ["lin.family", "lvm.family"]
        .iter()
        .find_map(|a| axes.iter().position(|x| x == a))
}

/// Per-cell means and standard deviations over successful replicates.
/// Within each architecture the cells with the lowest mean Error_IA and
/// Error_VF are flagged.
pub fn summarize(axes: &[String], rows: &[SweepRow]) -> Vec<SummaryRow> {
    let mut cells: Vec<usize> = rows.iter().map(|r| r.cell).collect();
    cells.sort_unstable();
    cells.dedup();
    let mut out: Vec<SummaryRow> = cells
        .iter()
        .map(|&cell| {
            let mine: Vec<&SweepRow> = rows.iter().filter(|r| r.cell == cell).collect();
            let good: Vec<&&SweepRow> = mine.iter().filter(|r| r.ok).collect();
            let stat =
                |f: &dyn Fn(&SweepRow) -> Option<f64>| mean_std(&good.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
            SummaryRow {
                cell,
                labels: mine[0].labels.clone(),
                ok: good.len(),
                failed: mine.len() - good.len(),
                error_ia: stat(&|r| r.error_ia),
                error_vf: stat(&|r| r.error_vf),
                e2e_error_ia: stat(&|r| r.e2e_error_ia),
                e2e_error_vf: stat(&|r| r.e2e_error_vf),
                lvm_error: stat(&|r| r.lvm_error),
                best_ia: false,
                best_vf: false,
            }
        })
        .collect();
    let arch = architecture_axis(axes);
    let group = |s: &SummaryRow| arch.map(|i| s.labels[i].clone()).unwrap_or_default();
    let mut groups: Vec<String> = out.iter().map(group).collect();
    groups.sort();
    groups.dedup();
    for g in groups {
        for metric in [0, 1] {
            let pick = |s: &SummaryRow| if metric == 0 { s.error_ia.0 } else { s.error_vf.0 };
            let best = out
                .iter()
                .enumerate()
                .filter(|(_, s)| group(s) == g)
                .filter_map(|(i, s)| pick(s).map(|m| (i, m)))
                .min_by(|a, b| a.1.total_cmp(&b.1));
            if let Some((i, _)) = best {
                if metric == 0 {
                    out[i].best_ia = true;
                } else {
                    out[i].best_vf = true;
                }
            }
        }
    }
    out
}

pub fn write_summary(path: &Path, axes: &[String], summary: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    let mut h = vec!["cell".to_string()];
    h.extend(axes.iter().cloned());
    for col in ["replicates_ok", "replicates_failed"] {
        h.push(col.into());
    }
    for m in ["error_ia", "error_vf", "e2e_error_ia", "e2e_error_vf", "lvm_error"] {
        h.push(format!("{m}_mean"));
        h.push(format!("{m}_std"));
    }
    h.push("best_ia".into());
    h.push("best_vf".into());
    w.write_record(h)?;
    for s in summary {
        let mut rec = vec![s.cell.to_string()];
        rec.extend(s.labels.iter().cloned());
        rec.push(s.ok.to_string());
        rec.push(s.failed.to_string());
        for (m, sd) in [s.error_ia, s.error_vf, s.e2e_error_ia, s.e2e_error_vf, s.lvm_error] {
            rec.push(num(m));
            rec.push(num(sd));
        }
        rec.push(u8::from(s.best_ia).to_string());
        rec.push(u8::from(s.best_vf).to_string());
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

fn write_plan(path: &Path, axes: &[String], cells: &[Cell], replicates: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut h = vec!["cell".to_string(), "replicate".to_string()];
    h.extend(axes.iter().cloned());
    w.write_record(h)?;
    for c in cells {
        for r in 0..replicates {
            let mut rec = vec![c.index.to_string(), r.to_string()];
            rec.extend(c.labels());
            w.write_record(rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// One planned run: cell, replicate and axis labels.
pub type PlannedRun = (usize, usize, Vec<String>);

/// Runs listed in a plan file, plus its axis names.
pub fn read_plan(path: &Path) -> Result<(Vec<String>, Vec<PlannedRun>)> {
    let mut r = csv::Reader::from_path(path)?;
    let axes: Vec<String> = r.headers()?.iter().skip(2).map(str::to_string).collect();
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        out.push((
            rec[0].parse()?,
            rec[1].parse()?,
            rec.iter().skip(2).map(str::to_string).collect(),
        ));
    }
    Ok((axes, out))
}

fn is_divergence(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        matches!(
            c.downcast_ref::<LfsError>(),
            Some(LfsError::Diverged { .. } | LfsError::TrainingDiverged { .. })
        )
    })
}

type Slot = Arc<Mutex<Option<std::result::Result<Paths, String>>>>;

/// Trains each distinct LVM once, however many cells use it.
struct LvmCache {
    root: PathBuf,
    slots: Mutex<HashMap<String, Slot>>,
}

impl LvmCache {
    fn get(&self, cfg: &ExperimentConfig, data: &Path, opts: &Options) -> Result<Paths> {
        let key = cfg.lvm_hash();
        let slot = self
            .slots
            .lock()
            .expect("cache lock")
            .entry(key.clone())
            .or_default()
            .clone();
        let mut guard = slot.lock().expect("slot lock");
        if guard.is_none() {
            let paths = Paths {
                data: data.to_path_buf(),
                run: self.root.join(&key[..16]),
            };
            let done = pipeline::train(cfg, &paths, opts, Stage::Lvm).map(|_| paths);
            *guard = Some(done.map_err(|e| format!("{e:#}")));
        }
        guard.clone().expect("filled").map_err(|e| anyhow!("LVM stage: {e}"))
    }
}

fn run_cell(cfg: &ExperimentConfig, data: &Path, run: &Path, cache: &LvmCache, opts: &Options) -> Result<SweepRow> {
    let shared = cache.get(cfg, data, opts)?;
    let paths = Paths {
        data: data.to_path_buf(),
        run: run.to_path_buf(),
    };
    pipeline::share_lvm(&shared, &paths)?;
    pipeline::train(cfg, &paths, opts, Stage::Lin)?;
    let classic = pipeline::evaluate(cfg, &paths, opts, PairKind::Classic)?;
    let e2e = if cfg.e2e.enabled {
        pipeline::train(cfg, &paths, opts, Stage::E2e)?;
        Some(pipeline::evaluate(cfg, &paths, opts, PairKind::E2e)?)
    } else {
        None
    };
    Ok(SweepRow {
        cell: 0,
        replicate: 0,
        labels: Vec::new(),
        ok: true,
        error_ia: Some(classic.report.error_ia),
        error_vf: Some(classic.report.error_vf),
        e2e_error_ia: e2e.as_ref().map(|e| e.report.error_ia),
        e2e_error_vf: e2e.as_ref().map(|e| e.report.error_vf),
        lvm_error: Some(classic.lvm_error),
        w_ai: (!opts.deterministic)
            .then(|| classic.rollout_seconds.iter().sum::<f64>() / classic.rollout_seconds.len() as f64),
        diverged: false,
        message: String::new(),
    })
}

/// Runs every cell and replicate of `base.sweep` under `dir` on up to
/// `opts.workers` threads. Failed cells become failed rows.
pub fn run_sweep(base: &ExperimentConfig, dir: &Path, opts: &Options) -> Result<(Vec<SweepRow>, Vec<SummaryRow>)> {
    let cells = plan(base)?;
    let axes: Vec<String> = base.sweep.axes.iter().map(|a| a.path.clone()).collect();
    let reps = base.sweep.replicates;
    fs::create_dir_all(dir.join("cells")).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("config.toml"), base.to_toml()?)?;
    write_plan(&dir.join(PLAN), &axes, &cells, reps)?;
    let per_cell_data = axes.iter().any(|a| a.starts_with("dataset."));
    let shared_data = dir.join("data");
    if !per_cell_data {
        pipeline::gen_data(base, &shared_data, opts.workers)?;
    }
    let cache = LvmCache {
        root: dir.join("lvm"),
        slots: Mutex::new(HashMap::new()),
    };
    let jobs: Vec<(usize, usize)> = cells
        .iter()
        .flat_map(|c| (0..reps).map(move |r| (c.index, r)))
        .collect();
    let results: Mutex<Vec<Option<SweepRow>>> = Mutex::new(vec![None; jobs.len()]);
    let next = AtomicUsize::new(0);
    // one thread per cell; the generator inside a cell stays sequential
    let inner = Options { workers: 1, ..*opts };
    info!(
        "sweep: {} cells x {reps} replicates on {} workers",
        cells.len(),
        opts.workers.max(1)
    );
    std::thread::scope(|scope| {
        for _ in 0..opts.workers.clamp(1, jobs.len().max(1)) {
            scope.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::Relaxed);
                let Some(&(ci, rep)) = jobs.get(j) else { break };
                let cell = &cells[ci];
                let cfg = cell.config.replicate(rep);
                let run = dir.join("cells").join(format!("c{ci:03}_r{rep}"));
                let data = if per_cell_data {
                    run.join("data")
                } else {
                    shared_data.clone()
                };
                let outcome = catch_unwind(AssertUnwindSafe(|| {
                    if per_cell_data {
                        pipeline::gen_data(&cfg, &data, 1)?;
                    }
                    run_cell(&cfg, &data, &run, &cache, &inner)
                }));
                let row = match outcome {
                    Ok(Ok(mut row)) => {
                        row.cell = ci;
                        row.replicate = rep;
                        row.labels = cell.labels();
                        row
                    }
                    Ok(Err(e)) => {
                        warn!("cell {ci} replicate {rep} failed: {e:#}");
                        SweepRow::failed(ci, rep, cell.labels(), format!("{e:#}"), is_divergence(&e))
                    }
                    Err(_) => SweepRow::failed(ci, rep, cell.labels(), "panicked".into(), false),
                };
                let _ = fs::create_dir_all(&run);
                if let Err(e) = write_rows(&run.join(CELL_ROW), &axes, std::slice::from_ref(&row)) {
                    warn!("could not write the row file of cell {ci}: {e:#}");
                }
                results.lock().expect("results lock")[j] = Some(row);
            });
        }
    });
    let rows: Vec<SweepRow> = results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every job finished"))
        .collect();
    let summary = summarize(&axes, &rows);
    write_rows(&dir.join(ROWS), &axes, &rows)?;
    write_summary(&dir.join(SUMMARY), &axes, &summary)?;
    Ok((rows, summary))
}
