//! Collects the tables of a run or sweep directory into `report/`, with a
//! plain-text summary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use crate::sweep::{self, mean_std, summarize, SweepRow};

pub const REPORT_DIR: &str = "report";
pub const SUMMARY_TXT: &str = "summary.txt";
pub const LVM_ERROR_VS_C: &str = "fig_lvm_error_vs_c.csv";

fn is_table(name: &str) -> bool {
    name.ends_with(".csv")
        && (name.starts_with("metrics")
            || name.starts_with("timing")
            || name.ends_with("_train.csv")
            || name.starts_with("sweep_")
            || name == crate::pipeline::PROVENANCE)
}

/// Everything the report was built from and what it wrote.
#[derive(Clone, Debug, Default)]
pub struct Report {
    pub tables: Vec<PathBuf>,
    pub missing_cells: Vec<(usize, usize)>,
    pub summary: String,
}

/// Rows from `sweep_rows.csv`, or from the per-cell row files of an
/// unfinished sweep.
fn sweep_rows(dir: &Path) -> Result<Option<(Vec<String>, Vec<SweepRow>)>> {
    let full = dir.join(sweep::ROWS);
    if full.exists() {
        return Ok(Some(sweep::read_rows(&full)?));
    }
    let cells = dir.join("cells");
    if !cells.is_dir() {
        return Ok(None);
    }
    let mut names: Vec<PathBuf> = fs::read_dir(&cells)?
        .filter_map(|e| e.ok().map(|e| e.path().join(sweep::CELL_ROW)))
        .filter(|p| p.exists())
        .collect();
    names.sort();
    let mut axes = Vec::new();
    let mut rows = Vec::new();
    for p in names {
        let (a, r) = sweep::read_rows(&p)?;
        axes = a;
        rows.extend(r);
    }
    rows.sort_by_key(|r| (r.cell, r.replicate));
    Ok(Some((axes, rows)))
}

pub fn build_report(dir: &Path) -> Result<Report> {
    if !dir.is_dir() {
        bail!("{} is not a directory", dir.display());
    }
    let mut names: Vec<String> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().and_then(|e| e.file_name().into_string().ok()))
        .filter(|n| is_table(n))
        .collect();
    names.sort();
    let sweep = sweep_rows(dir)?;
    let plan_path = dir.join(sweep::PLAN);
    if names.is_empty() && sweep.is_none() && !plan_path.exists() {
        bail!("{} holds no run or sweep results", dir.display());
    }
    let out = dir.join(REPORT_DIR);
    fs::create_dir_all(&out)?;
    let mut report = Report::default();
    let mut text = String::new();
    let _ = writeln!(text, "Report for {}", dir.display());

    for n in &names {
        let dst = out.join(n);
        fs::copy(dir.join(n), &dst)?;
        report.tables.push(dst);
    }

    for suffix in ["", "_e2e"] {
        let p = dir.join(format!("metrics{suffix}.csv"));
        if let Ok(body) = fs::read_to_string(&p) {
            let pair = if suffix.is_empty() { "classic" } else { "end-to-end" };
            let _ = writeln!(text, "\n{pair} pair:");
            for line in body.lines().filter(|l| {
                ["Error_IA,", "Error_VF,", "W_AI,", "S_W,"]
                    .iter()
                    .any(|k| l.starts_with(k))
            }) {
                let parts: Vec<&str> = line.split(',').filter(|s| !s.is_empty()).collect();
                let _ = writeln!(text, "  {:<9} {}", parts[0], parts.get(1).unwrap_or(&""));
            }
        }
    }

    if let Some((axes, rows)) = &sweep {
        let summary = summarize(axes, rows);
        if !dir.join(sweep::SUMMARY).exists() {
            let p = out.join(sweep::SUMMARY);
            sweep::write_summary(&p, axes, &summary)?;
            report.tables.push(p);
        }
        let failed = rows.iter().filter(|r| !r.ok).count();
        let _ = writeln!(
            text,
            "\nsweep over {}: {} rows, {failed} failed",
            axes.join(" x "),
            rows.len()
        );
        for s in &summary {
            let f = |x: (Option<f64>, Option<f64>)| match x {
                (Some(m), Some(sd)) => format!("{m:.4} ({sd:.4})"),
                (Some(m), None) => format!("{m:.4}"),
                _ => "-".into(),
            };
            let flag = match (s.best_ia, s.best_vf) {
                (true, true) => "  best IA, best VF",
                (true, false) => "  best IA",
                (false, true) => "  best VF",
                _ => "",
            };
            let _ = writeln!(
                text,
                "  cell {:>3} [{}]  Error_IA {}  Error_VF {}{flag}",
                s.cell,
                s.labels.join(", "),
                f(s.error_ia),
                f(s.error_vf)
            );
        }
        if let Some(ci) = axes.iter().position(|a| a == "lvm.c") {
            let p = out.join(LVM_ERROR_VS_C);
            write_lvm_error_vs_c(&p, ci, rows)?;
            report.tables.push(p);
        }
    }

    if plan_path.exists() {
        let (_, planned) = sweep::read_plan(&plan_path)?;
        let done: Vec<(usize, usize)> = sweep
            .as_ref()
            .map(|(_, r)| r.iter().map(|r| (r.cell, r.replicate)).collect())
            .unwrap_or_default();
        for (cell, rep, labels) in planned {
            if !done.contains(&(cell, rep)) {
                report.missing_cells.push((cell, rep));
                let _ = writeln!(text, "  MISSING cell {cell} replicate {rep} [{}]", labels.join(", "));
            }
        }
        if report.missing_cells.is_empty() {
            let _ = writeln!(text, "\nall planned cells are present");
        } else {
            let _ = writeln!(text, "\n{} planned runs are missing", report.missing_cells.len());
        }
    }

    fs::write(out.join(SUMMARY_TXT), &text)?;
    report.summary = text;
    Ok(report)
}

fn write_lvm_error_vs_c(path: &Path, axis: usize, rows: &[SweepRow]) -> Result<()> {
    let mut cs: Vec<(usize, String)> = rows
        .iter()
        .filter_map(|r| {
            r.labels[axis]
                .parse::<usize>()
                .ok()
                .map(|c| (c, r.labels[axis].clone()))
        })
        .collect();
    cs.sort();
    cs.dedup();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["c", "lvm_error_mean", "lvm_error_std", "n"])?;
    for (c, label) in cs {
        let xs: Vec<f64> = rows
            .iter()
            .filter(|r| r.labels[axis] == label && r.ok)
            .filter_map(|r| r.lvm_error)
            .collect();
        let (m, sd) = mean_std(&xs);
        let fmt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.17e}"));
        w.write_record([c.to_string(), fmt(m), fmt(sd), xs.len().to_string()])?;
    }
    w.flush()?;
    Ok(())
}
