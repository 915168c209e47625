//! Interfacial area, rollout error aggregates and speedup.

use std::fmt::Write as _;

use crate::error::{invalid, LfsError, Result};
use crate::field::GridFrame;
use crate::Scalar;

pub const DEFAULT_ISO: f64 = 0.5;

/// Length of the `iso` contour through the cell-centre samples of `frame`,
/// by marching squares with linear edge interpolation, scaled by the
/// frame's cell size.
///
/// Values `>= iso` count as inside. Saddle squares are split by the average
/// of their four corners: when it is inside, the two inside corners are
/// joined.
pub fn interfacial_area<S: Scalar>(frame: &GridFrame<S>, iso: f64) -> f64 {
    let k = frame.k();
    let v: Vec<f64> = frame.values().iter().map(|x| x.as_f64()).collect();
    contour_length(&v, k, k, iso) * frame.cell_size()
}

/// Marching-squares contour length on a `rows×cols` node grid with unit
/// spacing.
pub fn contour_length(values: &[f64], rows: usize, cols: usize, iso: f64) -> f64 {
    assert_eq!(values.len(), rows * cols, "value grid shape");
    let mut total = 0.0;
    for i in 0..rows.saturating_sub(1) {
        for j in 0..cols.saturating_sub(1) {
            // corners clockwise from top-left, positions as (x, y) with y down
            let c = [
                (values[i * cols + j], (0.0, 0.0)),
                (values[i * cols + j + 1], (1.0, 0.0)),
                (values[(i + 1) * cols + j + 1], (1.0, 1.0)),
                (values[(i + 1) * cols + j], (0.0, 1.0)),
            ];
            total += square_length(&c, iso);
        }
    }
    total
}

fn crossing(a: (f64, (f64, f64)), b: (f64, (f64, f64)), iso: f64) -> (f64, f64) {
    let t = (iso - a.0) / (b.0 - a.0);
    (a.1 .0 + t * (b.1 .0 - a.1 .0), a.1 .1 + t * (b.1 .1 - a.1 .1))
}

fn dist(p: (f64, f64), q: (f64, f64)) -> f64 {
    (p.0 - q.0).hypot(p.1 - q.1)
}

fn square_length(c: &[(f64, (f64, f64)); 4], iso: f64) -> f64 {
    let inside: [bool; 4] = c.map(|(v, _)| v >= iso);
    let n_inside = inside.iter().filter(|&&b| b).count();
    if n_inside == 0 || n_inside == 4 {
        return 0.0;
    }
    // edge e joins corner e and corner e+1
    let cut: Vec<usize> = (0..4).filter(|&e| inside[e] != inside[(e + 1) % 4]).collect();
    let point = |e: usize| crossing(c[e], c[(e + 1) % 4], iso);
    if cut.len() == 2 {
        return dist(point(cut[0]), point(cut[1]));
    }
    // saddle: inside corners are 0 and 2, or 1 and 3
    let centre = c.iter().map(|(v, _)| v).sum::<f64>() / 4.0;
    let joined = centre >= iso;
    // if the inside corners are joined, each outside corner is cut off by
    // the two edges adjacent to it; otherwise each inside corner is
    let isolate = |corner: usize| dist(point((corner + 3) % 4), point(corner));
    let corners: Vec<usize> = (0..4).filter(|&k| inside[k] != joined).collect();
    corners.iter().map(|&k| isolate(k)).sum()
}

/// Relative scalar error `|pred - truth| / truth`.
fn scalar_rel(pred: f64, truth: f64) -> f64 {
    (pred - truth).abs() / truth.abs()
}

/// Per-frame relative field error `‖pred - truth‖ / ‖truth‖`; `None` when
/// the truth has zero norm.
pub fn frame_rel_error<S: Scalar>(pred: &GridFrame<S>, truth: &GridFrame<S>) -> Result<Option<f64>> {
    if pred.k() != truth.k() {
        return Err(LfsError::Shape(format!("frame k {} vs {}", pred.k(), truth.k())));
    }
    let tn = truth.norm();
    if tn == 0.0 {
        return Ok(None);
    }
    let diff = pred
        .values()
        .iter()
        .zip(truth.values())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(Some(diff / tn))
}

/// Mean relative field error of one rollout over its frames, skipping
/// zero-norm truth frames. Returns `(mean, frames_used, frames_skipped)`.
pub fn series_vf_error<S: Scalar>(pred: &[GridFrame<S>], truth: &[GridFrame<S>]) -> Result<(f64, usize, usize)> {
    if pred.len() != truth.len() {
        return Err(LfsError::Shape(format!(
            "{} predicted frames vs {} true",
            pred.len(),
            truth.len()
        )));
    }
    let (mut sum, mut used, mut skipped) = (0.0, 0, 0);
    for (p, t) in pred.iter().zip(truth) {
        match frame_rel_error(p, t)? {
            Some(e) => {
                sum += e;
                used += 1;
            }
            None => skipped += 1,
        }
    }
    if used == 0 {
        return Err(invalid("every ground-truth frame has zero norm"));
    }
    Ok((sum / used as f64, used, skipped))
}

/// Per-series outcome of a test rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesMetrics {
    pub series_id: usize,
    pub v: f64,
    pub ia_true: f64,
    pub ia_pred: f64,
    /// `None` when the true final interfacial area is zero.
    pub ia_rel_err: Option<f64>,
    pub vf_rel_err: f64,
    pub vf_frames_skipped: usize,
}

impl SeriesMetrics {
    pub fn excluded(&self) -> bool {
        self.ia_rel_err.is_none()
    }
}

/// Scores one rollout against its ground truth.
pub fn score_series<S: Scalar>(
    series_id: usize,
    v: f64,
    pred: &[GridFrame<S>],
    truth: &[GridFrame<S>],
    iso: f64,
) -> Result<SeriesMetrics> {
    let (vf, _, skipped) = series_vf_error(pred, truth)?;
    let ia_true = interfacial_area(truth.last().expect("non-empty"), iso);
    let ia_pred = interfacial_area(pred.last().expect("non-empty"), iso);
    Ok(SeriesMetrics {
        series_id,
        v,
        ia_true,
        ia_pred,
        ia_rel_err: (ia_true > 0.0).then(|| scalar_rel(ia_pred, ia_true)),
        vf_rel_err: vf,
        vf_frames_skipped: skipped,
    })
}

/// Mean final-frame IA relative error over non-excluded series, plus the
/// ids of excluded series.
pub fn error_ia(rows: &[SeriesMetrics]) -> Result<(f64, Vec<usize>)> {
    let used: Vec<f64> = rows.iter().filter_map(|r| r.ia_rel_err).collect();
    let excluded = rows.iter().filter(|r| r.excluded()).map(|r| r.series_id).collect();
    if used.is_empty() {
        return Err(invalid("no series with a nonzero true interfacial area"));
    }
    Ok((used.iter().sum::<f64>() / used.len() as f64, excluded))
}

/// Mean over series of the per-series mean frame error.
pub fn error_vf(rows: &[SeriesMetrics]) -> Result<f64> {
    if rows.is_empty() {
        return Err(invalid("no series to score"));
    }
    Ok(rows.iter().map(|r| r.vf_rel_err).sum::<f64>() / rows.len() as f64)
}

/// `S_W = W_ref / W_AI`.
pub fn measure_speedup(w_reference: f64, w_ai: f64) -> Result<f64> {
    if !(w_reference > 0.0 && w_ai > 0.0) || !w_reference.is_finite() || !w_ai.is_finite() {
        return Err(invalid(format!(
            "speedup needs positive times, got reference {w_reference} and rollout {w_ai}"
        )));
    }
    Ok(w_reference / w_ai)
}

/// Per-series rows plus aggregates and provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<SeriesMetrics>,
    pub error_ia: f64,
    pub error_vf: f64,
    /// Mean rollout wall clock, seconds; `None` when timing is reported
    /// separately for reproducibility.
    pub w_ai: Option<f64>,
    pub s_w: Option<f64>,
    /// Ordered `(name, hash)` pairs.
    pub provenance: Vec<(String, String)>,
}

impl MetricsReport {
    pub fn new(
        rows: Vec<SeriesMetrics>,
        timing: Option<(f64, f64)>,
        provenance: Vec<(String, String)>,
    ) -> Result<Self> {
        let (error_ia, _) = error_ia(&rows)?;
        let error_vf = error_vf(&rows)?;
        let (w_ai, s_w) = match timing {
            Some((w_ai, w_ref)) => (Some(w_ai), Some(measure_speedup(w_ref, w_ai)?)),
            None => (None, None),
        };
        Ok(Self {
            rows,
            error_ia,
            error_vf,
            w_ai,
            s_w,
            provenance,
        })
    }

    /// CSV table: one row per series, then footer rows of the form
    /// `name,,value` (aggregates) and provenance hashes.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("series_id,v,ia_true,ia_pred,ia_rel_err,vf_rel_err,excluded_flag\n");
        for r in &self.rows {
            let ia_err = r.ia_rel_err.map_or(String::new(), |e| format!("{e:.17e}"));
            let _ = writeln!(
                s,
                "{},{:.17e},{:.17e},{:.17e},{},{:.17e},{}",
                r.series_id,
                r.v,
                r.ia_true,
                r.ia_pred,
                ia_err,
                r.vf_rel_err,
                u8::from(r.excluded())
            );
        }
        let _ = writeln!(s, "Error_IA,,,,{:.17e},,", self.error_ia);
        let _ = writeln!(s, "Error_VF,,,,,{:.17e},", self.error_vf);
        if let (Some(w), Some(sw)) = (self.w_ai, self.s_w) {
            let _ = writeln!(s, "W_AI,,,,{w:.6e},,");
            let _ = writeln!(s, "S_W,,,,{sw:.6e},,");
        }
        for (name, hash) in &self.provenance {
            let _ = writeln!(s, "{name},{hash},,,,,");
        }
        s
    }
}
