use std::cell::Cell;

use lfs_core::field::{ConfigNormalizer, Dataset, GridFrame, SimulationSeries, Source};
use lfs_core::lin::{HistoryBuffer, LatentIntegrator, Lin, LinFamily, LinSpec};
use lfs_core::lvm::{LatentState, Lvm, LvmSpec, SvdLvm};
use lfs_core::rollout::{evaluate_test_split, full_rollout, roll_latents, SurrogatePair};
use lfs_core::{LfsError, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const K: usize = 8;

fn random_frames(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..K * K).map(|_| rng.gen_range(0.0..1.0)).collect())
        .collect()
}

fn zero_mlp(c: usize, s: usize) -> Lin<f64> {
    let mut lin = Lin::build(&LinSpec::new(LinFamily::Mlp, c, s)).unwrap();
    lin.store.fill(0.0);
    lin
}

fn norm() -> ConfigNormalizer {
    ConfigNormalizer::new(0.0, 1.0, 10).unwrap()
}

struct Counting {
    c: usize,
    calls: Cell<usize>,
}

impl LatentIntegrator<f64> for Counting {
    fn c(&self) -> usize {
        self.c
    }
    fn s(&self) -> usize {
        1
    }
    fn predict_delta(&self, _: &HistoryBuffer<f64>) -> Result<Vec<f64>> {
        self.calls.set(self.calls.get() + 1);
        Ok(vec![0.0; self.c])
    }
}

struct Constant(Vec<f64>);

impl LatentIntegrator<f64> for Constant {
    fn c(&self) -> usize {
        self.0.len()
    }
    fn s(&self) -> usize {
        2
    }
    fn predict_delta(&self, _: &HistoryBuffer<f64>) -> Result<Vec<f64>> {
        Ok(self.0.clone())
    }
}

/// Multiplies the newest latent by a huge factor, so it overflows quickly.
struct Exploding;

impl LatentIntegrator<f64> for Exploding {
    fn c(&self) -> usize {
        4
    }
    fn s(&self) -> usize {
        1
    }
    fn predict_delta(&self, buf: &HistoryBuffer<f64>) -> Result<Vec<f64>> {
        Ok(buf.newest().iter().map(|x| x * 1e150).collect())
    }
}

#[test]
fn zero_lin_with_svd_keeps_free_components_fixed() {
    let frames = random_frames(6, 1);
    let svd = SvdLvm::<f64>::fit(&frames, K, 6, false).unwrap();
    let basis: Vec<Vec<f64>> = (0..6).map(|j| svd.basis_column(j)).collect();
    let pair = SurrogatePair::new(Lvm::Svd(svd), zero_mlp(6, 1), norm()).unwrap();
    // a training frame lies in the span of a full-rank basis
    let g1 = GridFrame::new(K, frames[0].clone()).unwrap();
    let coeff: Vec<f64> = basis
        .iter()
        .map(|u| u.iter().zip(&frames[0]).map(|(a, b)| a * b).sum())
        .collect();
    let v = 0.25;
    let r = full_rollout(&pair, &g1, v, 10, 0).unwrap();
    assert_eq!(r.frames.len(), 10);
    for (t, (frame, latent)) in r.frames.iter().zip(&r.latents).enumerate() {
        let t_norm = (t + 1) as f64 / 10.0;
        assert_eq!(&latent.values[..4], &r.latents[0].values[..4]);
        assert_eq!(latent.values[4], v);
        assert_eq!(latent.values[5], t_norm);
        // the frame is g1 with its two config-slot coordinates replaced
        for (p, got) in frame.values().iter().enumerate() {
            let want = frames[0][p] + (v - coeff[4]) * basis[4][p] + (t_norm - coeff[5]) * basis[5][p];
            assert!((got - want).abs() < 1e-10, "t={} pixel {p}", t + 1);
        }
    }
}

#[test]
fn zero_lin_reproduces_g1_when_the_slots_are_inert() {
    // basis columns for the config slots are zero, so they never reach the frame
    let frames = random_frames(4, 2);
    let mut svd = SvdLvm::<f64>::fit(&frames, K, 4, false).unwrap();
    svd.c = 6;
    svd.basis_t.extend(std::iter::repeat_n(0.0, 2 * K * K));
    let pair = SurrogatePair::new(Lvm::Svd(svd), zero_mlp(6, 3), norm()).unwrap();
    let g1 = GridFrame::new(K, frames[2].clone()).unwrap();
    let r = full_rollout(&pair, &g1, 0.7, 10, 3).unwrap();
    for f in &r.frames {
        for (a, b) in f.values().iter().zip(g1.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    assert_eq!(r.series_id, 3);
    assert!(r.wall_clock_seconds > 0.0);
}

#[test]
fn two_steps_is_one_advance() {
    let lin = Counting {
        c: 5,
        calls: Cell::new(0),
    };
    let l1 = LatentState::new(vec![1.0; 5]).unwrap();
    let out = roll_latents(&lin, l1, 0.5, 2).unwrap();
    assert_eq!(lin.calls.get(), 1);
    assert_eq!(out.len(), 2);
    let l1 = LatentState::new(vec![1.0; 5]).unwrap();
    roll_latents(&lin, l1, 0.5, 40).unwrap();
    assert_eq!(lin.calls.get(), 1 + 39);
}

#[test]
fn rollout_needs_two_steps() {
    let lin = Counting {
        c: 5,
        calls: Cell::new(0),
    };
    assert!(roll_latents(&lin, LatentState::new(vec![0.0; 5]).unwrap(), 0.0, 1).is_err());
}

#[test]
fn constant_delta_gives_linear_latents() {
    let delta = vec![0.1, -0.2, 0.3, 9.0, 9.0];
    let l1 = vec![1.0, 2.0, 3.0, 0.0, 0.0];
    let out = roll_latents(&Constant(delta.clone()), LatentState::new(l1.clone()).unwrap(), 0.4, 25).unwrap();
    for (i, l) in out.iter().enumerate() {
        let t = i + 1;
        for j in 0..3 {
            let want = l1[j] + (t - 1) as f64 * delta[j];
            assert!((l.values[j] - want).abs() < 1e-12, "t={t} j={j}");
        }
        assert_eq!(l.values[3], 0.4);
        assert_eq!(l.values[4], t as f64 / 25.0);
    }
}

#[test]
fn divergence_reports_step_and_norm_trace() {
    let l1 = LatentState::new(vec![1.0, 1.0, 0.5, 0.1]).unwrap();
    match roll_latents(&Exploding, l1, 0.5, 50) {
        Err(LfsError::Diverged { step, norms }) => {
            assert!(step > 1 && step < 50);
            assert_eq!(norms.len(), step);
            assert!(!norms.last().unwrap().is_finite());
            assert!(norms[..step - 1].iter().all(|n| n.is_finite()));
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn mismatched_latent_dims_are_rejected() {
    let lvm = Lvm::<f64>::build(&LvmSpec::conv(8, 16), 16).unwrap();
    assert!(SurrogatePair::new(lvm, zero_mlp(6, 1), norm()).is_err());
    let lin = Counting {
        c: 5,
        calls: Cell::new(0),
    };
    assert!(roll_latents(&lin, LatentState::new(vec![0.0; 4]).unwrap(), 0.0, 3).is_err());
}

#[test]
fn neural_rollout_is_deterministic() {
    let lvm = Lvm::<f32>::build(&LvmSpec::conv(8, 16), 16).unwrap();
    let lin = Lin::<f32>::build(&LinSpec::new(LinFamily::Recurrent, 8, 2)).unwrap();
    let pair = SurrogatePair::new(lvm, lin, norm()).unwrap();
    let g1 = GridFrame::<f32>::from_fn(16, |r, c| ((r * 16 + c) % 7) as f64 / 7.0);
    let a = full_rollout(&pair, &g1, 0.3, 12, 0).unwrap();
    let b = full_rollout(&pair, &g1, 0.3, 12, 0).unwrap();
    assert_eq!(a.frames, b.frames);
    assert_eq!(a.latents, b.latents);
}

#[test]
fn evaluation_scores_every_test_series() {
    let frames = random_frames(6, 3);
    let series: Vec<SimulationSeries<f64>> = (0..3)
        .map(|i| {
            let fs = (0..5)
                .map(|t| GridFrame::new(K, frames[(i + t) % 6].clone()).unwrap())
                .collect();
            SimulationSeries::new(fs, 0.01 * (i + 1) as f64, i, Source::Synthetic).unwrap()
        })
        .collect();
    let ds = Dataset::from_split(series, vec![0, 2], vec![1]).unwrap();
    let lvm = Lvm::fit_svd(&ds, &LvmSpec::svd(4)).unwrap();
    let pair = SurrogatePair::new(lvm, zero_mlp(4, 1), ds.normalizer().unwrap()).unwrap();
    let (rows, times) = evaluate_test_split(&pair, &ds, 0.5).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].series_id, 1);
    assert_eq!(times.len(), 1);
    assert!(rows[0].vf_rel_err.is_finite());
}
