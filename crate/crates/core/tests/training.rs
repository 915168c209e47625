use lfs_core::field::{normalize_config, Dataset, GridFrame, SimulationSeries, Source};
use lfs_core::lin::{Lin, LinFamily, LinSpec};
use lfs_core::lvm::{Lvm, LvmSpec};
use lfs_core::training::*;
use lfs_nn::Graph;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn blob(k: usize, cx: f64, cy: f64, r: f64) -> GridFrame<f64> {
    GridFrame::from_fn(k, |row, col| {
        let d = ((row as f64 - cy).powi(2) + (col as f64 - cx).powi(2)).sqrt();
        (1.0 - d / r).clamp(0.0, 1.0)
    })
}

/// Series whose frames grow a blob over time; velocity shifts the centre.
fn toy_dataset(k: usize, t: usize, n: usize) -> Dataset<f64> {
    let series = (0..n)
        .map(|i| {
            let frames = (1..=t)
                .map(|s| blob(k, k as f64 * (0.3 + 0.05 * i as f64), k as f64 * 0.4, 2.0 + s as f64))
                .collect();
            SimulationSeries::new(frames, 0.005 + 0.001 * i as f64, i, Source::Synthetic).unwrap()
        })
        .collect();
    Dataset::from_split(series, (0..n - 1).collect(), vec![n - 1]).unwrap()
}

proptest! {
    #[test]
    fn relative_error_equals_scaled_rmse(
        pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 1..40)
    ) {
        let pred: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let target: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let tn = target.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assume!(tn > 1e-6);
        let diff: Vec<f64> = pred.iter().zip(&target).map(|(a, b)| a - b).collect();
        let zeros = vec![0.0; diff.len()];
        let via_rmse = loss_rmse(&diff, &zeros).unwrap() * (diff.len() as f64).sqrt() / tn;
        let re = loss_re(&pred, &target).unwrap();
        prop_assert!((re - via_rmse).abs() <= 1e-12 * re.max(1.0));
    }
}

#[test]
fn graph_losses_match_reference_functions() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pred: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let target: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for kind in [LossKind::RelativeError, LossKind::Rmse] {
        let mut g = Graph::new();
        let p = g.input(lfs_nn::Tensor::from_vec(&[3, 4], pred.clone()).unwrap());
        let items = item_losses(
            &mut g,
            p,
            &lfs_nn::Tensor::from_vec(&[3, 4], target.clone()).unwrap(),
            kind,
        )
        .unwrap();
        for (i, got) in g.value(items).data().iter().enumerate() {
            let (a, b) = (&pred[4 * i..4 * i + 4], &target[4 * i..4 * i + 4]);
            let want = match kind {
                LossKind::RelativeError => loss_re(a, b).unwrap(),
                LossKind::Rmse => loss_rmse(a, b).unwrap(),
            };
            assert!((got - want).abs() < 1e-12);
        }
    }
}

#[test]
fn two_plateaus_cut_lr_by_a_hundred() {
    let mut s = LrSchedule::plateau(1e-3, 3, 0.1);
    let mut lr = 0.0;
    for _ in 0..7 {
        lr = s.step(0.5);
    }
    assert!((lr - 1e-5).abs() < 1e-18);
}

#[test]
fn exponential_schedule_decays_each_epoch() {
    let mut s = LrSchedule::new(&TrainConfig::patch_lvm());
    s.step(1.0);
    let lr = s.step(0.1);
    assert!((lr - 1e-3 * 0.95 * 0.95).abs() < 1e-15);
}

#[test]
fn svd_spec_is_routed_to_closed_form_fit() {
    let ds = toy_dataset(16, 4, 3);
    let err = train_lvm(&ds, &LvmSpec::svd(4), &TrainConfig::lvm()).unwrap_err();
    assert!(err.to_string().contains("fit_svd"));
}

#[test]
fn zero_epochs_leave_weights_unchanged() {
    let ds = toy_dataset(16, 4, 3);
    let spec = LvmSpec::conv(8, 16);
    let fresh = Lvm::<f64>::build(&spec, 16).unwrap();
    let (trained, report) = train_lvm(
        &ds,
        &spec,
        &TrainConfig {
            epochs: 0,
            ..TrainConfig::lvm()
        },
    )
    .unwrap();
    assert_eq!(trained.store().unwrap().checksum(), fresh.store().unwrap().checksum());
    assert!(report.epochs.is_empty());
}

#[test]
fn conv_lvm_overfits_a_single_frame() {
    let gen = lfs_core::datagen::GenConfig::default();
    let frame = lfs_core::datagen::generate_series::<f32>(&gen, 0)
        .unwrap()
        .last()
        .clone();
    let mut lvm = Lvm::<f32>::build(&LvmSpec::conv(64, 16), gen.k).unwrap();
    let cfg = TrainConfig {
        epochs: 2000,
        batch: 1,
        lr_initial: 5e-3,
        schedule: ScheduleKind::Exponential,
        decay: 0.9985,
        ..TrainConfig::lvm()
    };
    let report = fit_lvm(&mut lvm, &[&frame], &[], &cfg).unwrap();
    assert_eq!(report.steps, 2000);
    let rec = lvm.decode(&lvm.encode(&frame).unwrap()).unwrap();
    let err = loss_re(rec.values(), frame.values()).unwrap();
    assert!(err < 1e-3, "single-frame reconstruction error {err}");
}

#[test]
fn lvm_training_is_seeded() {
    let ds = toy_dataset(16, 5, 3).cast::<f32>();
    let cfg = TrainConfig {
        epochs: 3,
        batch: 4,
        ..TrainConfig::lvm()
    };
    let spec = LvmSpec::conv(8, 16);
    let (_, a) = train_lvm(&ds, &spec, &cfg).unwrap();
    let (_, b) = train_lvm(&ds, &spec, &cfg).unwrap();
    assert_eq!(a.checksum, b.checksum);
    assert_eq!(a.epochs.len(), 3);
    assert!(a
        .epochs
        .iter()
        .all(|e| e.train_loss.is_finite() && e.heldout_loss.is_finite()));
}

#[test]
fn encode_dataset_injects_normalized_config() {
    let ds = toy_dataset(16, 6, 4);
    let lvm = Lvm::<f64>::build(&LvmSpec::conv(8, 16), 16).unwrap();
    let lat = encode_dataset(&lvm, &ds).unwrap();
    for (ls, s) in lat.series.iter().zip(&ds.series) {
        assert_eq!(ls.len(), s.len());
        for (t, l) in ls.latents.iter().enumerate() {
            let (v, tn) = normalize_config(s.inlet_velocity, t + 1, &ds, s.len()).unwrap();
            assert_eq!(l[6], v);
            assert_eq!(l[7], tn);
        }
    }
}

#[test]
fn encode_dataset_with_svd_on_rank_c_data_is_exact() {
    // frames span a 2-D space plus zero, and the config slots of the
    // latent are overwritten, so compare only the projection
    let ds = toy_dataset(8, 5, 3);
    let lvm = Lvm::fit_svd(&ds, &LvmSpec::svd(5)).unwrap();
    let train: Vec<&SimulationSeries<f64>> = ds.train().collect();
    let frames: Vec<&GridFrame<f64>> = train.iter().flat_map(|s| s.frames()).collect();
    let rank = frames.len().min(5);
    assert_eq!(rank, 5);
    let svd_exact = Lvm::fit_svd(&ds, &LvmSpec::svd(10)).unwrap();
    for f in &frames {
        let back = svd_exact.decode(&svd_exact.encode(f).unwrap()).unwrap();
        let err: f64 = back
            .values()
            .iter()
            .zip(f.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-10);
    }
    assert_eq!(encode_dataset(&lvm, &ds).unwrap().series[0].len(), 5);
}

#[test]
fn mixed_k_dataset_is_rejected() {
    let a = SimulationSeries::new(vec![GridFrame::<f64>::constant(16, 0.5); 3], 0.01, 0, Source::Synthetic).unwrap();
    let b = SimulationSeries::new(vec![GridFrame::<f64>::constant(8, 0.5); 3], 0.02, 1, Source::Synthetic).unwrap();
    let ds = Dataset::from_split(vec![a, b], vec![0], vec![1]).unwrap();
    let lvm = Lvm::<f64>::build(&LvmSpec::conv(8, 16), 16).unwrap();
    assert!(encode_dataset(&lvm, &ds).is_err());
}

fn decay_series(c: usize, t: usize, seed: u64, v_norm: f64) -> LatentSeries<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut l: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut latents = Vec::new();
    for step in 1..=t {
        l[c - 2] = v_norm;
        l[c - 1] = step as f64 / t as f64;
        latents.push(l.clone());
        for x in &mut l[..c - 2] {
            *x *= 0.99;
        }
    }
    LatentSeries {
        series_id: seed as usize,
        v: v_norm,
        latents,
    }
}

#[test]
fn linear_lin_learns_linear_dynamics() {
    let c = 8;
    let train: Vec<LatentSeries<f64>> = (0..24).map(|i| decay_series(c, 30, i, i as f64 / 23.0)).collect();
    let held = [decay_series(c, 30, 100, 0.5)];
    let mut lin = Lin::<f64>::build(&LinSpec::new(LinFamily::Linear, c, 1)).unwrap();
    let cfg = TrainConfig {
        w: 1,
        epochs: 500,
        ..TrainConfig::default()
    };
    let report = fit_lin(
        &mut lin,
        &train.iter().collect::<Vec<_>>(),
        &held.iter().collect::<Vec<_>>(),
        &cfg,
    )
    .unwrap();
    let last = report.final_heldout().unwrap();
    assert!(last < 1e-2, "held-out one-step loss {last}");
}

#[test]
fn batch_has_k_times_w_loss_terms() {
    let c = 6;
    let series = [decay_series(c, 20, 1, 0.2), decay_series(c, 20, 2, 0.4)];
    let refs: Vec<&LatentSeries<f64>> = series.iter().collect();
    let lin = Lin::<f64>::build(&LinSpec {
        hidden: vec![4],
        ..LinSpec::new(LinFamily::Mlp, c, 2)
    })
    .unwrap();
    for (k, w) in [(1, 1), (5, 3), (7, 10)] {
        let wins: Vec<Window> = windows(&[20, 20], w).into_iter().take(k).collect();
        let batch = LatentBatch::gather(&refs, &wins, 2, w);
        let mut g = Graph::new();
        let bl = lin_batch_loss(&mut g, &lin, &lin.store, &batch, LossKind::RelativeError).unwrap();
        assert_eq!(bl.terms, k * w);
    }
}

#[test]
fn window_one_is_one_step_regression() {
    // with w=1 the batch loss is the mean one-step error from ground truth
    let c = 5;
    let series = [decay_series(c, 10, 3, 0.7)];
    let refs: Vec<&LatentSeries<f64>> = series.iter().collect();
    let lin = Lin::<f64>::build(&LinSpec::new(LinFamily::Linear, c, 1)).unwrap();
    let wins = windows(&[10], 1);
    let batch = LatentBatch::gather(&refs, &wins, 1, 1);
    let mut g = Graph::new();
    let bl = lin_batch_loss(&mut g, &lin, &lin.store, &batch, LossKind::RelativeError).unwrap();
    let got = g.value(bl.loss).data()[0];
    let mut want = 0.0;
    for win in &wins {
        let cur = &series[0].latents[win.t - 1];
        let buf = lfs_core::lin::HistoryBuffer::starting_at(1, cur);
        let d = lfs_core::lin::LatentIntegrator::predict_delta(&lin, &buf).unwrap();
        let mut next: Vec<f64> = cur.iter().zip(&d).map(|(a, b)| a + b).collect();
        let tgt = &series[0].latents[win.t];
        next[c - 2] = tgt[c - 2];
        next[c - 1] = tgt[c - 1];
        want += loss_re(&next, tgt).unwrap();
    }
    want /= wins.len() as f64;
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn window_longer_than_series_is_an_error() {
    let c = 5;
    let series = [decay_series(c, 10, 3, 0.7)];
    let refs: Vec<&LatentSeries<f64>> = series.iter().collect();
    let mut lin = Lin::<f64>::build(&LinSpec::new(LinFamily::Linear, c, 2)).unwrap();
    let cfg = TrainConfig {
        w: 9,
        epochs: 1,
        ..TrainConfig::default()
    };
    assert!(fit_lin(&mut lin, &refs, &[], &cfg).is_err());
    let ok = TrainConfig { w: 8, ..cfg };
    assert!(fit_lin(&mut lin, &refs, &[], &ok).is_ok());
}

#[test]
fn padded_history_rows_are_zero() {
    let series = [decay_series(4, 10, 3, 0.7)];
    let refs: Vec<&LatentSeries<f64>> = series.iter().collect();
    let batch = LatentBatch::gather(&refs, &[Window { series: 0, t: 1 }, Window { series: 0, t: 4 }], 3, 2);
    assert_eq!(&batch.history[0].data()[..4], &[0.0; 4]);
    assert_eq!(&batch.history[1].data()[..4], &[0.0; 4]);
    assert_eq!(&batch.history[2].data()[..4], &series[0].latents[0][..]);
    assert_eq!(&batch.history[0].data()[4..], &series[0].latents[1][..]);
    assert_eq!(&batch.targets[1].data()[4..], &series[0].latents[5][..]);
}

#[test]
fn e2e_with_zero_learning_rate_changes_nothing() {
    let ds = toy_dataset(16, 6, 3);
    let mut lvm = Lvm::<f64>::build(&LvmSpec::conv(8, 16), 16).unwrap();
    let mut lin = Lin::<f64>::build(&LinSpec {
        hidden: vec![8],
        ..LinSpec::new(LinFamily::Mlp, 8, 1)
    })
    .unwrap();
    let (a, b) = (lvm.store().unwrap().checksum(), lin.store.checksum());
    let cfg = TrainConfig {
        w: 3,
        epochs: 2,
        batch: 4,
        lr_initial: 0.0,
        ..TrainConfig::fine_tune()
    };
    let report = train_e2e(&mut lvm, &mut lin, &ds, &cfg).unwrap();
    assert_eq!(report.epochs.len(), 2);
    assert_eq!(lvm.store().unwrap().checksum(), a);
    assert_eq!(lin.store.checksum(), b);
}

#[test]
fn e2e_training_reduces_loss() {
    let ds = toy_dataset(16, 8, 4);
    let mut lvm = Lvm::<f64>::build(&LvmSpec::conv(8, 16), 16).unwrap();
    let mut lin = Lin::<f64>::build(&LinSpec {
        hidden: vec![16],
        ..LinSpec::new(LinFamily::Mlp, 8, 1)
    })
    .unwrap();
    let cfg = TrainConfig {
        w: 3,
        epochs: 40,
        batch: 8,
        lr_initial: 1e-3,
        ..TrainConfig::default()
    };
    let r = train_e2e(&mut lvm, &mut lin, &ds, &cfg).unwrap();
    assert!(r.epochs.last().unwrap().train_loss < 0.5 * r.epochs[0].train_loss);
}

#[test]
fn e2e_rejects_mismatched_latent_dims() {
    let ds = toy_dataset(16, 6, 3);
    let mut lvm = Lvm::<f64>::build(&LvmSpec::conv(8, 16), 16).unwrap();
    let mut lin = Lin::<f64>::build(&LinSpec::new(LinFamily::Linear, 9, 1)).unwrap();
    assert!(train_e2e(
        &mut lvm,
        &mut lin,
        &ds,
        &TrainConfig {
            w: 2,
            ..TrainConfig::fine_tune()
        }
    )
    .is_err());
}
