//! Grid frames, simulation series and train/test datasets.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LfsError, Result};
use crate::Scalar;

/// A `k×k` volume-fraction field, row-major, row 0 at the top.
#[derive(Clone, Debug, PartialEq)]
pub struct GridFrame<S> {
    k: usize,
    values: Vec<S>,
    cell_size: f64,
}

impl<S: Scalar> GridFrame<S> {
    pub fn new(k: usize, values: Vec<S>) -> Result<Self> {
        if k == 0 || values.len() != k * k {
            return Err(LfsError::Shape(format!(
                "frame with k={k} needs {} values, got {}",
                k * k,
                values.len()
            )));
        }
        Ok(Self {
            k,
            values,
            cell_size: 1.0,
        })
    }

    pub fn zeros(k: usize) -> Self {
        Self::constant(k, S::zero())
    }

    pub fn constant(k: usize, value: S) -> Self {
        Self {
            k,
            values: vec![value; k * k],
            cell_size: 1.0,
        }
    }

    pub fn from_fn(k: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let values = (0..k * k).map(|i| S::lit(f(i / k, i % k))).collect();
        Self {
            k,
            values,
            cell_size: 1.0,
        }
    }

    pub fn with_cell_size(mut self, cell_size: f64) -> Self {
        assert!(cell_size > 0.0, "cell size must be positive");
        self.cell_size = cell_size;
        self
    }

    #[inline]
    pub fn k(&self) -> usize {
        self.k
    }

    #[inline]
    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    #[inline]
    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [S] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<S> {
        self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> S {
        self.values[row * self.k + col]
    }

    /// Euclidean norm of the values, in `f64`.
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
    }

    /// Sum of all values (total liquid content in cell units).
    pub fn total(&self) -> f64 {
        self.values.iter().map(|v| v.as_f64()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> GridFrame<T> {
        GridFrame {
            k: self.k,
            values: self.values.iter().map(|v| T::lit(v.as_f64())).collect(),
            cell_size: self.cell_size,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Synthetic,
    Ingested,
}

/// Frames `t = 1..T` of one simulation at a fixed inlet velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulationSeries<S> {
    frames: Vec<GridFrame<S>>,
    pub inlet_velocity: f64,
    pub series_id: usize,
    pub source: Source,
    /// `Some(false)` when the generator did not reach a quasi-steady state.
    pub quasi_steady: Option<bool>,
}

impl<S: Scalar> SimulationSeries<S> {
    pub fn new(frames: Vec<GridFrame<S>>, inlet_velocity: f64, series_id: usize, source: Source) -> Result<Self> {
        if frames.len() < 2 {
            return Err(invalid(format!(
                "a series needs at least 2 frames, got {}",
                frames.len()
            )));
        }
        let k = frames[0].k();
        if let Some(bad) = frames.iter().position(|f| f.k() != k) {
            return Err(LfsError::Shape(format!(
                "frame {} has k={} but frame 1 has k={k}",
                bad + 1,
                frames[bad].k()
            )));
        }
        if !inlet_velocity.is_finite() {
            return Err(invalid("inlet velocity must be finite"));
        }
        Ok(Self {
            frames,
            inlet_velocity,
            series_id,
            source,
            quasi_steady: None,
        })
    }

    pub fn frames(&self) -> &[GridFrame<S>] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<GridFrame<S>> {
        self.frames
    }

    /// Number of frames `T`.
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn k(&self) -> usize {
        self.frames[0].k()
    }

    /// Frame at 1-based time `t`.
    pub fn frame(&self, t: usize) -> &GridFrame<S> {
        &self.frames[t - 1]
    }

    pub fn last(&self) -> &GridFrame<S> {
        self.frames.last().expect("series is never empty")
    }

    pub fn cast<T: Scalar>(&self) -> SimulationSeries<T> {
        SimulationSeries {
            frames: self.frames.iter().map(GridFrame::cast).collect(),
            inlet_velocity: self.inlet_velocity,
            series_id: self.series_id,
            source: self.source,
            quasi_steady: self.quasi_steady,
        }
    }
}

/// Keeps every `factor`-th frame counted backward from the final frame, so
/// the last frame always survives. Output length is `⌊T/factor⌋`.
pub fn downsample_time<S: Scalar>(series: &SimulationSeries<S>, factor: usize) -> Result<SimulationSeries<S>> {
    if factor == 0 {
        return Err(invalid("downsampling factor must be positive"));
    }
    let t = series.len();
    if t < factor {
        return Err(invalid(format!("series of length {t} is shorter than factor {factor}")));
    }
    let keep = t / factor;
    if keep < 2 {
        return Err(invalid(format!(
            "factor {factor} leaves {keep} frame(s) of {t}; a series needs 2"
        )));
    }
    // 1-based positions T - j·factor for j = keep-1 .. 0
    let frames = (0..keep)
        .rev()
        .map(|j| series.frames[t - 1 - j * factor].clone())
        .collect();
    let mut out = SimulationSeries::new(frames, series.inlet_velocity, series.series_id, series.source)?;
    out.quasi_steady = series.quasi_steady;
    Ok(out)
}

/// Min-max velocity normalization over the training split plus `t/T`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigNormalizer {
    pub v_min: f64,
    pub v_max: f64,
    pub total_steps: usize,
}

impl ConfigNormalizer {
    pub fn new(v_min: f64, v_max: f64, total_steps: usize) -> Result<Self> {
        if v_max.partial_cmp(&v_min) != Some(std::cmp::Ordering::Greater) || !v_min.is_finite() || !v_max.is_finite() {
            return Err(LfsError::Degenerate(format!(
                "velocity range [{v_min}, {v_max}] is empty; need v_max > v_min"
            )));
        }
        if total_steps == 0 {
            return Err(invalid("total steps must be positive"));
        }
        Ok(Self {
            v_min,
            v_max,
            total_steps,
        })
    }

    pub fn v_norm(&self, v: f64) -> f64 {
        (v - self.v_min) / (self.v_max - self.v_min)
    }

    pub fn t_norm(&self, t: usize) -> f64 {
        t as f64 / self.total_steps as f64
    }

    /// `(v_norm, t_norm)` for 1-based `t ∈ [1, T]`.
    pub fn normalize(&self, v: f64, t: usize) -> Result<(f64, f64)> {
        if t == 0 || t > self.total_steps {
            return Err(invalid(format!("timestep {t} outside [1, {}]", self.total_steps)));
        }
        Ok((self.v_norm(v), self.t_norm(t)))
    }
}

/// Series plus a disjoint train/test partition.
#[derive(Clone, Debug)]
pub struct Dataset<S> {
    pub series: Vec<SimulationSeries<S>>,
    /// Positions into `series`.
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
    pub v_min: f64,
    pub v_max: f64,
}

impl<S: Scalar> Dataset<S> {
    /// Builds a dataset from an explicit partition, validating disjointness
    /// and coverage and deriving the velocity range from the train split.
    pub fn from_split(
        series: Vec<SimulationSeries<S>>,
        mut train_ids: Vec<usize>,
        mut test_ids: Vec<usize>,
    ) -> Result<Self> {
        train_ids.sort_unstable();
        test_ids.sort_unstable();
        let n = series.len();
        let mut seen = vec![false; n];
        for &i in train_ids.iter().chain(&test_ids) {
            if i >= n {
                return Err(invalid(format!("split index {i} out of range for {n} series")));
            }
            if seen[i] {
                return Err(invalid(format!("series {i} appears in the split twice")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(invalid("split does not cover every series"));
        }
        if train_ids.is_empty() {
            return Err(invalid("train split is empty"));
        }
        let vs = train_ids.iter().map(|&i| series[i].inlet_velocity);
        let v_min = vs.clone().fold(f64::INFINITY, f64::min);
        let v_max = vs.fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            series,
            train_ids,
            test_ids,
            v_min,
            v_max,
        })
    }

    pub fn train(&self) -> impl Iterator<Item = &SimulationSeries<S>> {
        self.train_ids.iter().map(|&i| &self.series[i])
    }

    pub fn test(&self) -> impl Iterator<Item = &SimulationSeries<S>> {
        self.test_ids.iter().map(|&i| &self.series[i])
    }

    /// Common frame side `k`; errors on mixed resolutions.
    pub fn k(&self) -> Result<usize> {
        let k = self.series[0].k();
        if self.series.iter().any(|s| s.k() != k) {
            return Err(LfsError::Shape("dataset mixes grid sizes".into()));
        }
        Ok(k)
    }

    /// Common series length `T`; errors on mixed lengths.
    pub fn steps(&self) -> Result<usize> {
        let t = self.series[0].len();
        if self.series.iter().any(|s| s.len() != t) {
            return Err(LfsError::Shape("dataset mixes series lengths".into()));
        }
        Ok(t)
    }

    pub fn normalizer(&self) -> Result<ConfigNormalizer> {
        ConfigNormalizer::new(self.v_min, self.v_max, self.steps()?)
    }

    /// Test series whose velocity lies outside the training range.
    pub fn extrapolated_test_ids(&self) -> Vec<usize> {
        self.test_ids
            .iter()
            .copied()
            .filter(|&i| {
                let v = self.series[i].inlet_velocity;
                v < self.v_min || v > self.v_max
            })
            .collect()
    }

    pub fn cast<T: Scalar>(&self) -> Dataset<T> {
        Dataset {
            series: self.series.iter().map(SimulationSeries::cast).collect(),
            train_ids: self.train_ids.clone(),
            test_ids: self.test_ids.clone(),
            v_min: self.v_min,
            v_max: self.v_max,
        }
    }
}

/// `(v_norm, t_norm)` for a series velocity at 1-based step `t`.
pub fn normalize_config<S: Scalar>(v: f64, t: usize, dataset: &Dataset<S>, total_steps: usize) -> Result<(f64, f64)> {
    ConfigNormalizer::new(dataset.v_min, dataset.v_max, total_steps)?.normalize(v, t)
}

/// Seeded random partition into `n_train` training series and the rest.
pub fn split_dataset<S: Scalar>(series: Vec<SimulationSeries<S>>, n_train: usize, seed: u64) -> Result<Dataset<S>> {
    let n = series.len();
    if n_train == 0 || n_train >= n {
        return Err(invalid(format!("n_train must lie in [1, {}), got {n_train}", n)));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = order.split_off(n_train);
    Dataset::from_split(series, order, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(t: usize, v: f64, id: usize) -> SimulationSeries<f32> {
        let frames = (1..=t).map(|i| GridFrame::constant(2, i as f32)).collect();
        SimulationSeries::new(frames, v, id, Source::Synthetic).unwrap()
    }

    #[test]
    fn downsample_keeps_last_frame() {
        let s = series(5000, 0.01, 0);
        let d = downsample_time(&s, 10).unwrap();
        assert_eq!(d.len(), 500);
        assert_eq!(d.last().get(0, 0), 5000.0);
        assert_eq!(d.frame(1).get(0, 0), 10.0);
    }

    #[test]
    fn downsample_by_one_is_identity() {
        let s = series(7, 0.01, 0);
        assert_eq!(downsample_time(&s, 1).unwrap(), s);
    }

    #[test]
    fn downsample_ten_by_five() {
        let d = downsample_time(&series(10, 0.01, 0), 5).unwrap();
        let kept: Vec<f32> = d.frames().iter().map(|f| f.get(0, 0)).collect();
        assert_eq!(kept, vec![5.0, 10.0]);
    }

    #[test]
    fn downsample_drops_leading_remainder() {
        let d = downsample_time(&series(11, 0.01, 0), 5).unwrap();
        let kept: Vec<f32> = d.frames().iter().map(|f| f.get(0, 0)).collect();
        assert_eq!(kept, vec![6.0, 11.0]);
    }

    #[test]
    fn downsample_rejects_zero_factor() {
        assert!(downsample_time(&series(4, 0.01, 0), 0).is_err());
    }

    #[test]
    fn series_rejects_mixed_k_and_short() {
        let frames = vec![GridFrame::<f32>::zeros(2), GridFrame::zeros(3)];
        assert!(SimulationSeries::new(frames, 0.0, 0, Source::Synthetic).is_err());
        assert!(SimulationSeries::new(vec![GridFrame::<f32>::zeros(2)], 0.0, 0, Source::Synthetic).is_err());
    }

    fn dataset(vs: &[f64]) -> Vec<SimulationSeries<f32>> {
        vs.iter().enumerate().map(|(i, &v)| series(500, v, i)).collect()
    }

    #[test]
    fn normalize_endpoints() {
        let ds = Dataset::from_split(dataset(&[0.005, 0.015, 0.01]), vec![0, 1], vec![2]).unwrap();
        assert_eq!(normalize_config(0.005, 500, &ds, 500).unwrap(), (0.0, 1.0));
        assert_eq!(normalize_config(0.015, 1, &ds, 500).unwrap(), (1.0, 0.002));
        let (v, _) = normalize_config(0.01, 1, &ds, 500).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
        assert!(normalize_config(0.01, 0, &ds, 500).is_err());
        assert!(normalize_config(0.01, 501, &ds, 500).is_err());
    }

    #[test]
    fn normalize_rejects_degenerate_range() {
        let ds = Dataset::from_split(dataset(&[0.01, 0.01]), vec![0, 1], vec![]).unwrap();
        assert!(matches!(
            normalize_config(0.01, 1, &ds, 500),
            Err(LfsError::Degenerate(_))
        ));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let vs: Vec<f64> = (0..50).map(|i| 0.005 + i as f64 * 1e-4).collect();
        let a = split_dataset(dataset(&vs), 40, 3).unwrap();
        assert_eq!((a.train_ids.len(), a.test_ids.len()), (40, 10));
        let b = split_dataset(dataset(&vs), 40, 3).unwrap();
        assert_eq!(a.train_ids, b.train_ids);
        assert_eq!(a.test_ids, b.test_ids);
        for i in &a.test_ids {
            assert!(!a.train_ids.contains(i));
        }
        let train_v: Vec<f64> = a.train().map(|s| s.inlet_velocity).collect();
        assert_eq!(a.v_min, train_v.iter().copied().fold(f64::INFINITY, f64::min));
        assert_eq!(a.v_max, train_v.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }

    #[test]
    fn split_minimal_and_invalid() {
        let d = split_dataset(dataset(&[0.01, 0.02]), 1, 0).unwrap();
        assert_eq!((d.train_ids.len(), d.test_ids.len()), (1, 1));
        assert!(split_dataset(dataset(&[0.01, 0.02]), 2, 0).is_err());
        assert!(split_dataset(dataset(&[0.01, 0.02]), 0, 0).is_err());
    }

    #[test]
    fn extrapolated_tests_are_flagged() {
        let ds = Dataset::from_split(dataset(&[0.01, 0.02, 0.03]), vec![0, 1], vec![2]).unwrap();
        assert_eq!(ds.extrapolated_test_ids(), vec![2]);
    }

    proptest::proptest! {
        #[test]
        fn normalization_is_monotone(v1 in 0.0f64..1.0, v2 in 0.0f64..1.0, t1 in 1usize..=500, t2 in 1usize..=500) {
            let n = ConfigNormalizer::new(0.2, 0.7, 500).unwrap();
            if v1 < v2 { proptest::prop_assert!(n.v_norm(v1) < n.v_norm(v2)); }
            if t1 < t2 { proptest::prop_assert!(n.t_norm(t1) < n.t_norm(t2)); }
        }
    }
}
