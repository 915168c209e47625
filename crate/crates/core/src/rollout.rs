//! Full rollouts from an initial frame and their scoring.

use std::time::Instant;

use crate::error::{invalid, LfsError, Result};
use crate::field::{ConfigNormalizer, Dataset, GridFrame};
use crate::lin::{advance, HistoryBuffer, LatentIntegrator, Lin};
use crate::lvm::{LatentState, Lvm};
use crate::metrics::{score_series, SeriesMetrics};
use crate::Scalar;

/// A trained encoder/decoder plus integrator and the normalization they
/// were trained with.
#[derive(Clone, Debug)]
pub struct SurrogatePair<S: Scalar> {
    pub lvm: Lvm<S>,
    pub lin: Lin<S>,
    pub normalizer: ConfigNormalizer,
}

impl<S: Scalar> SurrogatePair<S> {
    pub fn new(lvm: Lvm<S>, lin: Lin<S>, normalizer: ConfigNormalizer) -> Result<Self> {
        if lvm.c() != lin.spec.c {
            return Err(LfsError::Shape(format!(
                "LVM has c={} but the LIN has c={}",
                lvm.c(),
                lin.spec.c
            )));
        }
        Ok(Self { lvm, lin, normalizer })
    }
}

#[derive(Clone, Debug)]
pub struct RolloutResult<S> {
    /// `ĝ_1..ĝ_T`, with `ĝ_1 = D(E(g_1))`.
    pub frames: Vec<GridFrame<S>>,
    pub latents: Vec<LatentState<S>>,
    /// Encode + advance + decode time, excluding scoring.
    pub wall_clock_seconds: f64,
    pub series_id: usize,
    pub v: f64,
}

/// Advances `l1` for `total_steps − 1` steps. Config slots are set to
/// `(v_norm, t/T)` at every step; a non-finite latent aborts with the norm
/// trace so far.
pub fn roll_latents<S: Scalar, I: LatentIntegrator<S> + ?Sized>(
    lin: &I,
    l1: LatentState<S>,
    v_norm: f64,
    total_steps: usize,
) -> Result<Vec<LatentState<S>>> {
    if total_steps < 2 {
        return Err(invalid(format!("a rollout needs T >= 2, got {total_steps}")));
    }
    if l1.c() != lin.c() {
        return Err(LfsError::Shape(format!(
            "latent has c={} but the LIN has c={}",
            l1.c(),
            lin.c()
        )));
    }
    let t_norm = |t: usize| t as f64 / total_steps as f64;
    let first = l1.with_config(v_norm, t_norm(1));
    let mut buffer = HistoryBuffer::starting_at(lin.s(), &first.values);
    let mut norms = vec![first.norm()];
    let mut out = Vec::with_capacity(total_steps);
    out.push(first);
    for t in 2..=total_steps {
        let next = advance(lin, &mut buffer, v_norm, t_norm(t))?;
        let n = next.norm();
        norms.push(n);
        if !n.is_finite() {
            return Err(LfsError::Diverged { step: t, norms });
        }
        out.push(next);
    }
    Ok(out)
}

/// Predicts `T` frames from `g1` and `v` alone.
pub fn full_rollout<S: Scalar>(
    pair: &SurrogatePair<S>,
    g1: &GridFrame<S>,
    v: f64,
    total_steps: usize,
    series_id: usize,
) -> Result<RolloutResult<S>> {
    let start = Instant::now();
    let l1 = pair.lvm.encode(g1)?;
    let latents = roll_latents(&pair.lin, l1, pair.normalizer.v_norm(v), total_steps)?;
    let values: Vec<Vec<S>> = latents.iter().map(|l| l.values.clone()).collect();
    let frames = pair.lvm.decode_batch(&values)?;
    let wall_clock_seconds = start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
    Ok(RolloutResult {
        frames,
        latents,
        wall_clock_seconds,
        series_id,
        v,
    })
}

/// Full rollouts of every test series, scored against ground truth.
/// Returns per-series metrics and the rollout wall-clock times.
pub fn evaluate_test_split<S: Scalar>(
    pair: &SurrogatePair<S>,
    dataset: &Dataset<S>,
    iso: f64,
) -> Result<(Vec<SeriesMetrics>, Vec<f64>)> {
    if dataset.test_ids.is_empty() {
        return Err(invalid("the test split is empty"));
    }
    let mut rows = Vec::new();
    let mut times = Vec::new();
    for s in dataset.test() {
        let r = full_rollout(pair, s.frame(1), s.inlet_velocity, s.len(), s.series_id)?;
        rows.push(score_series(s.series_id, s.inlet_velocity, &r.frames, s.frames(), iso)?);
        times.push(r.wall_clock_seconds);
    }
    Ok((rows, times))
}
