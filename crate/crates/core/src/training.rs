//! Losses, learning-rate schedules and the three training procedures:
//! autoencoder (LVM), windowed latent rollout (LIN), and end-to-end.

use std::time::Instant;

use lfs_nn::{Adam, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LfsError, Result};
use crate::field::{ConfigNormalizer, Dataset, GridFrame};
use crate::lin::{Lin, LinSpec};
use crate::lvm::{inject_config, Lvm, LvmFamily, LvmSpec};
use crate::Scalar;

/// Added under the square root of per-item losses so the gradient stays
/// finite when a prediction is exact.
const SQRT_EPS: f64 = 1e-30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    RelativeError,
    Rmse,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::RelativeError => "relative_error",
            Self::Rmse => "rmse",
        }
    }
}

/// `‖pred − target‖ / ‖target‖`.
pub fn loss_re<S: Scalar>(pred: &[S], target: &[S]) -> Result<f64> {
    check_len(pred, target)?;
    let tn = target.iter().map(|t| t.as_f64().powi(2)).sum::<f64>().sqrt();
    if tn == 0.0 {
        return Err(LfsError::Degenerate("relative error against a zero target".into()));
    }
    let dn = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p.as_f64() - t.as_f64()).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(dn / tn)
}

/// `sqrt(mean((pred − target)²))`.
pub fn loss_rmse<S: Scalar>(pred: &[S], target: &[S]) -> Result<f64> {
    check_len(pred, target)?;
    if pred.is_empty() {
        return Err(invalid("rmse of empty arrays"));
    }
    let ss: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| (p.as_f64() - t.as_f64()).powi(2))
        .sum();
    Ok((ss / pred.len() as f64).sqrt())
}

fn check_len<S>(a: &[S], b: &[S]) -> Result<()> {
    if a.len() != b.len() {
        return Err(LfsError::Shape(format!(
            "prediction has {} values, target {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Per-item losses `[b]` of `pred` against the constant rows of `target`
/// (both `[b, n]`).
pub fn item_losses<S: Scalar>(g: &mut Graph<S>, pred: Var, target: &Tensor<S>, kind: LossKind) -> Result<Var> {
    let shape = g.shape(pred).to_vec();
    if shape != target.shape() || shape.len() != 2 {
        return Err(LfsError::Shape(format!("loss over {shape:?} vs {:?}", target.shape())));
    }
    let (b, n) = (shape[0], shape[1]);
    let scale: Vec<S> = match kind {
        LossKind::RelativeError => target
            .data()
            .chunks(n)
            .map(|row| {
                let norm = row.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
                if norm == 0.0 {
                    Err(LfsError::Degenerate("relative error against a zero target".into()))
                } else {
                    Ok(S::lit(1.0 / norm))
                }
            })
            .collect::<Result<_>>()?,
        LossKind::Rmse => vec![S::lit(1.0 / (n as f64).sqrt()); b],
    };
    let t = g.input(target.clone());
    let d = g.sub(pred, t);
    let ss = g.sum_squares_rows(d);
    let eps = g.input(Tensor::full(&[b], S::lit(SQRT_EPS)));
    let ss = g.add(ss, eps);
    let norm = g.sqrt(ss);
    let scale = g.input(Tensor::from_vec(&[b], scale).expect("scale shape"));
    Ok(g.mul(norm, scale))
}

/// Accumulates per-item loss vectors and averages them into one value.
struct LossSum {
    total: Option<Var>,
    terms: usize,
}

impl LossSum {
    fn new() -> Self {
        Self { total: None, terms: 0 }
    }

    fn push<S: Scalar>(&mut self, g: &mut Graph<S>, items: Var) {
        self.terms += g.shape(items)[0];
        self.total = Some(match self.total {
            Some(t) => g.add(t, items),
            None => items,
        });
    }

    /// Mean over every pushed term, plus the term count.
    fn finish<S: Scalar>(self, g: &mut Graph<S>) -> BatchLoss {
        let total = self.total.expect("at least one loss term");
        let per_row = g.shape(total)[0];
        let m = g.mean(total);
        let loss = g.scale(m, S::lit(per_row as f64 / self.terms as f64));
        BatchLoss {
            loss,
            terms: self.terms,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BatchLoss {
    pub loss: Var,
    /// Number of per-item losses averaged into `loss`.
    pub terms: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Multiply by `plateau_factor` after `plateau_patience` epochs without
    /// improvement of the held-out loss.
    Plateau,
    /// Multiply by `decay` every epoch.
    Exponential,
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossKind,
    /// Training rollout window.
    pub w: usize,
    pub batch: usize,
    pub epochs: usize,
    pub lr_initial: f64,
    pub schedule: ScheduleKind,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub plateau_threshold: f64,
    pub decay: f64,
    /// Upper bound on optimizer steps per epoch (0 = full pass).
    pub max_batches: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::RelativeError,
            w: 50,
            batch: 32,
            epochs: 100,
            lr_initial: 1e-3,
            schedule: ScheduleKind::Plateau,
            plateau_patience: 15,
            plateau_factor: 0.1,
            plateau_threshold: 1e-6,
            decay: 0.95,
            max_batches: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults for autoencoder training.
    pub fn lvm() -> Self {
        Self {
            plateau_patience: 6,
            ..Self::default()
        }
    }

    /// Defaults for the patch-transformer autoencoder.
    pub fn patch_lvm() -> Self {
        Self {
            schedule: ScheduleKind::Exponential,
            ..Self::lvm()
        }
    }

    /// Fine-tuning defaults for end-to-end training.
    pub fn fine_tune() -> Self {
        Self {
            lr_initial: 1e-5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(invalid("batch size must be at least 1"));
        }
        if self.w == 0 {
            return Err(invalid("rollout window must be at least 1"));
        }
        if !(self.lr_initial >= 0.0 && self.lr_initial.is_finite()) {
            return Err(invalid("learning rate must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Learning-rate state across epochs.
#[derive(Clone, Debug)]
pub struct LrSchedule {
    pub lr: f64,
    kind: ScheduleKind,
    patience: usize,
    factor: f64,
    threshold: f64,
    decay: f64,
    best: f64,
    bad_epochs: usize,
}

impl LrSchedule {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr_initial,
            kind: cfg.schedule,
            patience: cfg.plateau_patience,
            factor: cfg.plateau_factor,
            threshold: cfg.plateau_threshold,
            decay: cfg.decay,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn plateau(lr: f64, patience: usize, factor: f64) -> Self {
        Self::new(&TrainConfig {
            lr_initial: lr,
            plateau_patience: patience,
            plateau_factor: factor,
            ..TrainConfig::default()
        })
    }

    /// Feeds one epoch's held-out loss; returns the rate for the next epoch.
    pub fn step(&mut self, epoch_loss: f64) -> f64 {
        match self.kind {
            ScheduleKind::Plateau => {
                if epoch_loss < self.best - self.threshold {
                    self.best = epoch_loss;
                    self.bad_epochs = 0;
                } else {
                    self.bad_epochs += 1;
                    if self.bad_epochs >= self.patience {
                        self.lr *= self.factor;
                        self.bad_epochs = 0;
                    }
                }
            }
            ScheduleKind::Exponential => self.lr *= self.decay,
            ScheduleKind::Constant => {}
        }
        self.lr
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub heldout_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub wall_clock_seconds: f64,
    pub steps: usize,
    /// Checksum of the final parameters (hex of the store checksums).
    pub checksum: String,
}

impl TrainReport {
    pub fn final_heldout(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.heldout_loss)
    }

    pub fn to_csv(&self, timing: bool) -> String {
        let mut out = String::from(if timing {
            "epoch,train_loss,heldout_loss,lr,seconds\n"
        } else {
            "epoch,train_loss,heldout_loss,lr\n"
        });
        for e in &self.epochs {
            out += &format!("{},{:e},{:e},{:e}", e.epoch, e.train_loss, e.heldout_loss, e.lr);
            if timing {
                out += &format!(",{:.6}", e.seconds);
            }
            out.push('\n');
        }
        out
    }
}

fn checksum_of<S: Scalar>(stores: &[&ParamStore<S>]) -> String {
    stores
        .iter()
        .map(|s| format!("{:016x}", s.checksum()))
        .collect::<Vec<_>>()
        .join("-")
}

fn frame_batch<S: Scalar>(frames: &[&GridFrame<S>]) -> Tensor<S> {
    let kk = frames[0].values().len();
    let data = frames.iter().flat_map(|f| f.values().iter().copied()).collect();
    Tensor::from_vec(&[frames.len(), kk], data).expect("frame batch")
}

// ---------------------------------------------------------------- LVM

/// Reconstruction loss of one batch of frames.
pub fn lvm_batch_loss<S: Scalar>(
    g: &mut Graph<S>,
    lvm: &Lvm<S>,
    store: Option<&ParamStore<S>>,
    frames: &Tensor<S>,
    kind: LossKind,
) -> Result<BatchLoss> {
    let x = g.input(frames.clone());
    let l = lvm.encode_with(g, store, x);
    let y = lvm.decode_with(g, store, l);
    let items = item_losses(g, y, frames, kind)?;
    let mut sum = LossSum::new();
    sum.push(g, items);
    Ok(sum.finish(g))
}

fn lvm_eval<S: Scalar>(lvm: &Lvm<S>, frames: &[&GridFrame<S>], cfg: &TrainConfig) -> Result<f64> {
    let mut total = 0.0;
    for chunk in frames.chunks(cfg.batch) {
        let mut g = Graph::new();
        let bl = lvm_batch_loss(&mut g, lvm, None, &frame_batch(chunk), cfg.loss)?;
        total += g.value(bl.loss).data()[0].as_f64() * chunk.len() as f64;
    }
    Ok(total / frames.len() as f64)
}

/// Trains an autoencoder from scratch. SVD specs are rejected: they are
/// fitted in closed form by [`Lvm::fit_svd`].
pub fn train_lvm<S: Scalar>(dataset: &Dataset<S>, spec: &LvmSpec, cfg: &TrainConfig) -> Result<(Lvm<S>, TrainReport)> {
    if spec.family == LvmFamily::Svd {
        return Err(invalid("the svd family has no iterative training; use Lvm::fit_svd"));
    }
    let mut lvm = Lvm::build(spec, dataset.k()?)?;
    // all-gas frames have no relative error and are left out
    let pick = |it: &mut dyn Iterator<Item = &GridFrame<S>>| -> Vec<GridFrame<S>> {
        it.filter(|f| f.norm() > 0.0).cloned().collect()
    };
    let train = pick(&mut dataset.train().flat_map(|s| s.frames().iter()));
    let heldout = pick(&mut dataset.test().flat_map(|s| s.frames().iter()));
    let train: Vec<&GridFrame<S>> = train.iter().collect();
    let heldout: Vec<&GridFrame<S>> = heldout.iter().collect();
    let report = fit_lvm(&mut lvm, &train, &heldout, cfg)?;
    Ok((lvm, report))
}

/// Optimizes an existing neural LVM on `train`. With no held-out frames
/// the schedule follows the training loss.
pub fn fit_lvm<S: Scalar>(
    lvm: &mut Lvm<S>,
    train: &[&GridFrame<S>],
    heldout: &[&GridFrame<S>],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if lvm.store().is_none() {
        return Err(invalid("the svd family has no iterative training; use Lvm::fit_svd"));
    }
    if train.is_empty() {
        return Err(invalid("no training frames"));
    }
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(lvm.store().expect("neural LVM"), cfg.lr_initial);
    let mut sched = LrSchedule::new(cfg);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        let lr = sched.lr;
        adam.lr = lr;
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut seen = 0;
        for (bi, chunk) in order.chunks(cfg.batch).enumerate() {
            if cfg.max_batches > 0 && bi >= cfg.max_batches {
                break;
            }
            let frames: Vec<&GridFrame<S>> = chunk.iter().map(|&i| train[i]).collect();
            let mut g = Graph::new();
            let bl = lvm_batch_loss(&mut g, lvm, None, &frame_batch(&frames), cfg.loss)?;
            let loss = g.value(bl.loss).data()[0].as_f64();
            if !loss.is_finite() {
                return Err(LfsError::TrainingDiverged { epoch });
            }
            let grads = g.backward(bl.loss);
            drop(g);
            adam.step(lvm.store_mut().expect("neural LVM"), &grads);
            sum += loss * chunk.len() as f64;
            seen += chunk.len();
            report.steps += 1;
        }
        let train_loss = sum / seen as f64;
        let heldout_loss = if heldout.is_empty() {
            train_loss
        } else {
            lvm_eval(lvm, heldout, cfg)?
        };
        if !heldout_loss.is_finite() {
            return Err(LfsError::TrainingDiverged { epoch });
        }
        sched.step(heldout_loss);
        report.epochs.push(EpochRecord {
            epoch,
            train_loss,
            heldout_loss,
            lr,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    report.checksum = checksum_of(&[lvm.store().expect("neural LVM")]);
    Ok(report)
}

// ---------------------------------------------------------------- latents

/// Latents `l_1..l_T` of one series with config slots injected.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSeries<S> {
    pub series_id: usize,
    pub v: f64,
    pub latents: Vec<Vec<S>>,
}

impl<S: Scalar> LatentSeries<S> {
    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct LatentDataset<S> {
    /// Parallel to the source dataset's series.
    pub series: Vec<LatentSeries<S>>,
    pub train_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
    pub normalizer: ConfigNormalizer,
    pub c: usize,
}

impl<S: Scalar> LatentDataset<S> {
    pub fn train(&self) -> Vec<&LatentSeries<S>> {
        self.train_ids.iter().map(|&i| &self.series[i]).collect()
    }

    pub fn test(&self) -> Vec<&LatentSeries<S>> {
        self.test_ids.iter().map(|&i| &self.series[i]).collect()
    }
}

/// Encodes every frame of every series and injects `normalize_config(v, t)`.
pub fn encode_dataset<S: Scalar>(lvm: &Lvm<S>, dataset: &Dataset<S>) -> Result<LatentDataset<S>> {
    let k = dataset.k()?;
    if k != lvm.k() {
        return Err(LfsError::Shape(format!(
            "dataset k={k} but the LVM expects k={}",
            lvm.k()
        )));
    }
    let norm = dataset.normalizer()?;
    let series = dataset
        .series
        .iter()
        .map(|s| {
            let frames: Vec<&GridFrame<S>> = s.frames().iter().collect();
            let mut latents = Vec::with_capacity(frames.len());
            for chunk in frames.chunks(64) {
                latents.extend(lvm.encode_batch(chunk)?);
            }
            let vn = norm.v_norm(s.inlet_velocity);
            for (t, l) in latents.iter_mut().enumerate() {
                inject_config(l, vn, norm.t_norm(t + 1));
            }
            Ok(LatentSeries {
                series_id: s.series_id,
                v: s.inlet_velocity,
                latents,
            })
        })
        .collect::<Result<_>>()?;
    Ok(LatentDataset {
        series,
        train_ids: dataset.train_ids.clone(),
        test_ids: dataset.test_ids.clone(),
        normalizer: norm,
        c: lvm.c(),
    })
}

// ---------------------------------------------------------------- windows

/// A training window: series position and the 1-based last history step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub series: usize,
    pub t: usize,
}

/// Every start with `t + w ≤ T`, so windows never leave their series.
pub fn windows(lengths: &[usize], w: usize) -> Vec<Window> {
    lengths
        .iter()
        .enumerate()
        .flat_map(|(i, &len)| (1..=len.saturating_sub(w)).map(move |t| Window { series: i, t }))
        .collect()
}

/// Constant tensors for a batch of latent windows.
#[derive(Clone, Debug)]
pub struct LatentBatch<S> {
    /// `s` tensors `[b, c]`, oldest first, zero rows as padding.
    pub history: Vec<Tensor<S>>,
    /// `w` tensors `[b, c]` of ground-truth next latents.
    pub targets: Vec<Tensor<S>>,
}

impl<S: Scalar> LatentBatch<S> {
    pub fn gather(series: &[&LatentSeries<S>], wins: &[Window], s: usize, w: usize) -> Self {
        let c = series[0].latents[0].len();
        let b = wins.len();
        let row = |j: usize| -> Tensor<S> {
            let mut data = vec![S::zero(); b * c];
            for (n, win) in wins.iter().enumerate() {
                // step index of history row j
                if let Some(t) = (win.t + j + 1).checked_sub(s).filter(|&t| t >= 1) {
                    data[n * c..(n + 1) * c].copy_from_slice(&series[win.series].latents[t - 1]);
                }
            }
            Tensor::from_vec(&[b, c], data).unwrap()
        };
        let history = (0..s).map(row).collect();
        let targets = (1..=w)
            .map(|tau| {
                let data = wins
                    .iter()
                    .flat_map(|win| series[win.series].latents[win.t + tau - 1].iter().copied())
                    .collect();
                Tensor::from_vec(&[b, c], data).unwrap()
            })
            .collect();
        Self { history, targets }
    }
}

fn config_tail<S: Scalar>(full: &Tensor<S>) -> Tensor<S> {
    let c = full.last_dim();
    let b = full.len() / c;
    let data = full.data().chunks(c).flat_map(|r| r[c - 2..].iter().copied()).collect();
    Tensor::from_vec(&[b, 2], data).unwrap()
}

/// Rolls `lin` forward from `history` for `tails.len()` steps, overwriting
/// config slots from `tails`; returns the predicted latents.
fn roll<S: Scalar>(
    g: &mut Graph<S>,
    lin: &Lin<S>,
    store: &ParamStore<S>,
    mut rows: Vec<Var>,
    tails: &[Tensor<S>],
) -> Vec<Var> {
    let mut out = Vec::with_capacity(tails.len());
    for tail in tails {
        let x = g.stack(&rows);
        let delta = lin.delta_with(g, store, x);
        let newest = *rows.last().expect("history is never empty");
        let next = g.add(newest, delta);
        let next = g.overwrite_tail(next, tail);
        rows.remove(0);
        rows.push(next);
        out.push(next);
    }
    out
}

/// Mean loss over all `K·w` rolled-out latents of one batch.
pub fn lin_batch_loss<S: Scalar>(
    g: &mut Graph<S>,
    lin: &Lin<S>,
    store: &ParamStore<S>,
    batch: &LatentBatch<S>,
    kind: LossKind,
) -> Result<BatchLoss> {
    let rows: Vec<Var> = batch.history.iter().map(|h| g.input(h.clone())).collect();
    let tails: Vec<Tensor<S>> = batch.targets.iter().map(config_tail).collect();
    let preds = roll(g, lin, store, rows, &tails);
    let mut sum = LossSum::new();
    for (p, t) in preds.into_iter().zip(&batch.targets) {
        let items = item_losses(g, p, t, kind)?;
        sum.push(g, items);
    }
    Ok(sum.finish(g))
}

fn check_window(lengths: impl Iterator<Item = usize>, w: usize, s: usize) -> Result<()> {
    for len in lengths {
        if w + s > len {
            return Err(invalid(format!(
                "window w={w} plus sequence length s={s} exceeds T={len}"
            )));
        }
    }
    Ok(())
}

/// Shared epoch loop: `step` runs one batch (optionally applying gradients)
/// and returns its loss.
fn run_epochs(
    cfg: &TrainConfig,
    n_train: usize,
    n_heldout: usize,
    report: &mut TrainReport,
    mut step: impl FnMut(&[usize], bool, f64) -> Result<f64>,
) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sched = LrSchedule::new(cfg);
    let mut order: Vec<usize> = (0..n_train).collect();
    let heldout: Vec<usize> = (0..n_heldout).collect();
    for epoch in 1..=cfg.epochs {
        let t0 = Instant::now();
        let lr = sched.lr;
        order.shuffle(&mut rng);
        let (mut sum, mut seen) = (0.0, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch).enumerate() {
            if cfg.max_batches > 0 && bi >= cfg.max_batches {
                break;
            }
            let loss = step(chunk, true, lr)?;
            if !loss.is_finite() {
                return Err(LfsError::TrainingDiverged { epoch });
            }
            sum += loss * chunk.len() as f64;
            seen += chunk.len();
            report.steps += 1;
        }
        let train_loss = sum / seen.max(1) as f64;
        let heldout_loss = if heldout.is_empty() {
            train_loss
        } else {
            let mut h = 0.0;
            for chunk in heldout.chunks(cfg.batch) {
                h += step(chunk, false, lr)? * chunk.len() as f64;
            }
            h / heldout.len() as f64
        };
        if !heldout_loss.is_finite() {
            return Err(LfsError::TrainingDiverged { epoch });
        }
        sched.step(heldout_loss);
        report.epochs.push(EpochRecord {
            epoch,
            train_loss,
            heldout_loss,
            lr,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    Ok(())
}

/// Trains a fresh LIN on the train split of `latents`; the held-out loss
/// uses the test split with the same window.
pub fn train_lin<S: Scalar>(
    latents: &LatentDataset<S>,
    spec: &LinSpec,
    cfg: &TrainConfig,
) -> Result<(Lin<S>, TrainReport)> {
    if spec.c != latents.c {
        return Err(LfsError::Shape(format!(
            "LIN has c={} but latents have c={}",
            spec.c, latents.c
        )));
    }
    let mut lin = Lin::build(spec)?;
    let report = fit_lin(&mut lin, &latents.train(), &latents.test(), cfg)?;
    Ok((lin, report))
}

/// Optimizes an existing LIN on windows drawn from `train`.
pub fn fit_lin<S: Scalar>(
    lin: &mut Lin<S>,
    train: &[&LatentSeries<S>],
    heldout: &[&LatentSeries<S>],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    let (s, w) = (lin.spec.s, cfg.w);
    check_window(train.iter().chain(heldout).map(|l| l.len()), w, s)?;
    let train_w = windows(&train.iter().map(|l| l.len()).collect::<Vec<_>>(), w);
    let held_w = windows(&heldout.iter().map(|l| l.len()).collect::<Vec<_>>(), w);
    if train_w.is_empty() {
        return Err(invalid("no training windows"));
    }
    let start = Instant::now();
    let mut adam = Adam::new(&lin.store, cfg.lr_initial);
    let mut report = TrainReport::default();
    run_epochs(cfg, train_w.len(), held_w.len(), &mut report, |idx, learn, lr| {
        let (src, wins) = if learn { (train, &train_w) } else { (heldout, &held_w) };
        let picked: Vec<Window> = idx.iter().map(|&i| wins[i]).collect();
        let batch = LatentBatch::gather(src, &picked, s, w);
        let mut g = Graph::new();
        let bl = lin_batch_loss(&mut g, lin, &lin.store, &batch, cfg.loss)?;
        let loss = g.value(bl.loss).data()[0].as_f64();
        if learn && loss.is_finite() {
            let grads = g.backward(bl.loss);
            drop(g);
            adam.lr = lr;
            adam.step(&mut lin.store, &grads);
        }
        Ok(loss)
    })?;
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    report.checksum = checksum_of(&[&lin.store]);
    Ok(report)
}

// ---------------------------------------------------------------- end to end

/// Constant tensors for a batch of frame windows.
#[derive(Clone, Debug)]
pub struct FrameBatch<S> {
    /// `s` tensors `[b, k²]` of history frames (zero where padded).
    pub history: Vec<Tensor<S>>,
    /// `s` tensors `[b, c]`: 1 on real history rows, 0 on padding.
    pub masks: Vec<Tensor<S>>,
    /// `s` tensors `[b, 2]` of config values for the history rows.
    pub history_tails: Vec<Tensor<S>>,
    /// `w` tensors `[b, 2]` of config values for the predicted steps.
    pub tails: Vec<Tensor<S>>,
    /// `[b·w, k²]` ground-truth frames, item-major.
    pub targets: Tensor<S>,
}

impl<S: Scalar> FrameBatch<S> {
    pub fn gather(
        dataset: &Dataset<S>,
        positions: &[usize],
        wins: &[Window],
        norm: &ConfigNormalizer,
        c: usize,
        s: usize,
        w: usize,
    ) -> Self {
        let b = wins.len();
        let series = |win: &Window| &dataset.series[positions[win.series]];
        let kk = series(&wins[0]).k().pow(2);
        let mut history = Vec::with_capacity(s);
        let mut masks = Vec::with_capacity(s);
        let mut history_tails = Vec::with_capacity(s);
        for j in 0..s {
            let mut frames = vec![S::zero(); b * kk];
            let mut mask = vec![S::zero(); b * c];
            let mut tail = vec![S::zero(); b * 2];
            for (n, win) in wins.iter().enumerate() {
                if let Some(t) = (win.t + j + 1).checked_sub(s).filter(|&t| t >= 1) {
                    let sr = series(win);
                    frames[n * kk..(n + 1) * kk].copy_from_slice(sr.frame(t).values());
                    mask[n * c..(n + 1) * c].fill(S::one());
                    tail[2 * n] = S::lit(norm.v_norm(sr.inlet_velocity));
                    tail[2 * n + 1] = S::lit(norm.t_norm(t));
                }
            }
            history.push(Tensor::from_vec(&[b, kk], frames).unwrap());
            masks.push(Tensor::from_vec(&[b, c], mask).unwrap());
            history_tails.push(Tensor::from_vec(&[b, 2], tail).unwrap());
        }
        let tails = (1..=w)
            .map(|tau| {
                let data = wins
                    .iter()
                    .flat_map(|win| {
                        let sr = series(win);
                        [S::lit(norm.v_norm(sr.inlet_velocity)), S::lit(norm.t_norm(win.t + tau))]
                    })
                    .collect();
                Tensor::from_vec(&[b, 2], data).unwrap()
            })
            .collect();
        let targets = wins
            .iter()
            .flat_map(|win| (1..=w).flat_map(move |tau| series(win).frame(win.t + tau).values().iter().copied()))
            .collect();
        Self {
            history,
            masks,
            history_tails,
            tails,
            targets: Tensor::from_vec(&[b * w, kk], targets).unwrap(),
        }
    }
}

/// `D ∘ rollout ∘ E` loss over all `K·w` decoded frames of one batch.
pub fn e2e_batch_loss<S: Scalar>(
    g: &mut Graph<S>,
    lvm: &Lvm<S>,
    lvm_store: Option<&ParamStore<S>>,
    lin: &Lin<S>,
    lin_store: &ParamStore<S>,
    batch: &FrameBatch<S>,
    kind: LossKind,
) -> Result<BatchLoss> {
    let c = lvm.c();
    if lin.spec.c != c {
        return Err(LfsError::Shape(format!(
            "LVM has c={c} but the LIN has c={}",
            lin.spec.c
        )));
    }
    let mut rows = Vec::with_capacity(batch.history.len());
    for ((frames, mask), tail) in batch.history.iter().zip(&batch.masks).zip(&batch.history_tails) {
        let x = g.input(frames.clone());
        let l = lvm.encode_with(g, lvm_store, x);
        let m = g.input(mask.clone());
        let l = g.mul(l, m);
        rows.push(g.overwrite_tail(l, tail));
    }
    let preds = roll(g, lin, lin_store, rows, &batch.tails);
    let b = g.shape(preds[0])[0];
    let w = preds.len();
    let stacked = g.stack(&preds);
    let flat = g.reshape(stacked, &[b * w, c]);
    let y = lvm.decode_with(g, lvm_store, flat);
    let items = item_losses(g, y, &batch.targets, kind)?;
    let mut sum = LossSum::new();
    sum.push(g, items);
    Ok(sum.finish(g))
}

/// Fine-tunes (or trains from scratch) encoder, LIN and decoder jointly on
/// decoded-frame losses. SVD models stay fixed; only the LIN then learns.
pub fn train_e2e<S: Scalar>(
    lvm: &mut Lvm<S>,
    lin: &mut Lin<S>,
    dataset: &Dataset<S>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    let c = lvm.c();
    if lin.spec.c != c {
        return Err(LfsError::Shape(format!(
            "LVM has c={c} but the LIN has c={}",
            lin.spec.c
        )));
    }
    if dataset.k()? != lvm.k() {
        return Err(LfsError::Shape("dataset and LVM grid sizes differ".into()));
    }
    let (s, w) = (lin.spec.s, cfg.w);
    check_window(dataset.series.iter().map(|sr| sr.len()), w, s)?;
    let norm = dataset.normalizer()?;
    let lens = |ids: &[usize]| ids.iter().map(|&i| dataset.series[i].len()).collect::<Vec<_>>();
    let train_w = windows(&lens(&dataset.train_ids), w);
    let held_w = windows(&lens(&dataset.test_ids), w);
    let start = Instant::now();
    let mut lvm_adam = lvm.store().map(|st| Adam::new(st, cfg.lr_initial));
    let mut lin_adam = Adam::new(&lin.store, cfg.lr_initial);
    let mut report = TrainReport::default();
    run_epochs(cfg, train_w.len(), held_w.len(), &mut report, |idx, learn, lr| {
        let (ids, wins) = if learn {
            (&dataset.train_ids, &train_w)
        } else {
            (&dataset.test_ids, &held_w)
        };
        let picked: Vec<Window> = idx.iter().map(|&i| wins[i]).collect();
        let batch = FrameBatch::gather(dataset, ids, &picked, &norm, c, s, w);
        let mut g = Graph::new();
        let bl = e2e_batch_loss(&mut g, lvm, None, lin, &lin.store, &batch, cfg.loss)?;
        let loss = g.value(bl.loss).data()[0].as_f64();
        if learn && loss.is_finite() {
            let grads = g.backward(bl.loss);
            drop(g);
            lin_adam.lr = lr;
            lin_adam.step(&mut lin.store, &grads);
            if let (Some(adam), Some(store)) = (lvm_adam.as_mut(), lvm.store_mut()) {
                adam.lr = lr;
                adam.step(store, &grads);
            }
        }
        Ok(loss)
    })?;
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    let mut stores = vec![&lin.store];
    if let Some(st) = lvm.store() {
        stores.insert(0, st);
    }
    report.checksum = checksum_of(&stores);
    Ok(report)
}
