//! Data generation, the three training stages and evaluation, all reading
//! and writing a run directory.
//!
//! Run directory layout:
//!
//! ```text
//! data/manifest.csv, data/series_NNN.lfs1, data/dataset.hash
//! lvm.ckpt  lvm_train.csv
//! lin.ckpt  lin_train.csv
//! e2e_lvm.ckpt  e2e_lin.ckpt  e2e_train.csv
//! metrics.csv  timing.csv  (metrics_e2e.csv, timing_e2e.csv)
//! provenance.csv  config.toml
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use lfs_core::archive::{read_archive, write_archive};
use lfs_core::checkpoint::{
    checkpoint_hash, decode_lin_checkpoint, decode_lvm_checkpoint, encode_lin_checkpoint, encode_lvm_checkpoint,
    CheckpointHeader,
};
use lfs_core::datagen::{generate_dataset, time_generation};
use lfs_core::lin::Lin;
use lfs_core::lvm::{Lvm, LvmFamily};
use lfs_core::metrics::MetricsReport;
use lfs_core::rollout::{evaluate_test_split, SurrogatePair};
use lfs_core::training::{encode_dataset, loss_re, train_e2e, train_lin, train_lvm, TrainReport};
use lfs_core::{Dataset, Scalar, SimulationSeries};
use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, SplitKind};

pub const MANIFEST: &str = "manifest.csv";
pub const DATASET_HASH: &str = "dataset.hash";
pub const LVM_CKPT: &str = "lvm.ckpt";
pub const LIN_CKPT: &str = "lin.ckpt";
pub const E2E_LVM_CKPT: &str = "e2e_lvm.ckpt";
pub const E2E_LIN_CKPT: &str = "e2e_lin.ckpt";
pub const PROVENANCE: &str = "provenance.csv";

#[derive(Clone, Copy, Debug)]
pub struct Options {
    pub workers: usize,
    /// Keep wall-clock values out of every table except `timing*.csv`, so
    /// reruns are byte-identical.
    pub deterministic: bool,
    pub f64: bool,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            workers: 1,
            deterministic: false,
            f64: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Paths {
    pub data: PathBuf,
    pub run: PathBuf,
}

impl Paths {
    /// `run` with its own `data/` subdirectory.
    pub fn in_run(run: impl Into<PathBuf>) -> Self {
        let run = run.into();
        Self {
            data: run.join("data"),
            run,
        }
    }

    /// Standard layout under a data root: datasets keyed by their config
    /// hash, runs under the configured output name.
    pub fn for_config(root: &Path, cfg: &ExperimentConfig) -> Self {
        Self {
            data: root.join("datasets").join(&cfg.dataset_hash()[..16]),
            run: cfg.run_dir(root),
        }
    }

    pub fn run_file(&self, name: &str) -> PathBuf {
        self.run.join(name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Lvm,
    Lin,
    E2e,
}

impl std::str::FromStr for Stage {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lvm" => Ok(Self::Lvm),
            "lin" => Ok(Self::Lin),
            "e2e" => Ok(Self::E2e),
            _ => bail!("unknown stage {s:?} (expected lvm, lin or e2e)"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairKind {
    Classic,
    E2e,
}

impl PairKind {
    fn files(self) -> (&'static str, &'static str, &'static str) {
        match self {
            Self::Classic => (LVM_CKPT, LIN_CKPT, ""),
            Self::E2e => (E2E_LVM_CKPT, E2E_LIN_CKPT, "_e2e"),
        }
    }
}

impl std::str::FromStr for PairKind {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classic" => Ok(Self::Classic),
            "e2e" => Ok(Self::E2e),
            _ => bail!("unknown pair {s:?} (expected classic or e2e)"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub series_id: usize,
    pub v: f64,
    pub path: String,
    pub split: String,
    pub quasi_steady: u8,
    pub extrapolated: u8,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(
        &fs::read(path).with_context(|| format!("reading {}", path.display()))?,
    ))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<String> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(sha256_hex(bytes))
}

/// Test positions for an interior split: evenly spaced through the
/// velocity-sorted series, never the first or last.
pub fn interior_test_positions(n: usize, n_test: usize) -> Vec<usize> {
    (1..=n_test).map(|j| j * n / (n_test + 1)).collect()
}

fn split_ids(velocities: &[f64], cfg: &ExperimentConfig, random: &Dataset<f32>) -> (Vec<usize>, Vec<usize>) {
    match cfg.dataset.split {
        SplitKind::Random => (random.train_ids.clone(), random.test_ids.clone()),
        SplitKind::Interior => {
            let mut order: Vec<usize> = (0..velocities.len()).collect();
            order.sort_by(|&a, &b| velocities[a].total_cmp(&velocities[b]));
            let n_test = velocities.len() - cfg.dataset.n_train;
            let test: Vec<usize> = interior_test_positions(order.len(), n_test)
                .into_iter()
                .map(|p| order[p])
                .collect();
            let train = (0..velocities.len()).filter(|i| !test.contains(i)).collect();
            (train, test)
        }
    }
}

/// Generates the dataset into `data_dir` and returns the manifest hash.
/// An existing dataset from the same configuration is reused; a different
/// one is never overwritten.
pub fn gen_data(cfg: &ExperimentConfig, data_dir: &Path, workers: usize) -> Result<String> {
    let wanted = cfg.dataset_hash();
    let marker = data_dir.join(DATASET_HASH);
    let manifest = data_dir.join(MANIFEST);
    if manifest.exists() {
        let have = fs::read_to_string(&marker).unwrap_or_default();
        if have.trim() == wanted {
            info!("reusing dataset in {}", data_dir.display());
            return file_hash(&manifest);
        }
        bail!(
            "{} already holds a dataset from a different configuration; choose another output directory",
            data_dir.display()
        );
    }
    fs::create_dir_all(data_dir).with_context(|| format!("creating {}", data_dir.display()))?;
    let velocities = cfg.dataset.velocities();
    info!(
        "generating {} series at k={} T={}",
        velocities.len(),
        cfg.dataset.k,
        cfg.dataset.steps
    );
    let generated: Dataset<f32> = generate_dataset(
        &velocities,
        &cfg.dataset.gen_config(),
        cfg.dataset.n_train,
        cfg.dataset.seed,
        workers,
    )?;
    let (train, test) = split_ids(&velocities, cfg, &generated);
    let ds = Dataset::from_split(generated.series, train, test)?;
    let extrapolated = ds.extrapolated_test_ids();
    let mut rows = Vec::new();
    for s in &ds.series {
        let name = format!("series_{:03}.lfs1", s.series_id);
        let path = data_dir.join(&name);
        write_archive(s, &path)?;
        rows.push(ManifestRow {
            series_id: s.series_id,
            v: s.inlet_velocity,
            path: name,
            split: if ds.test_ids.contains(&s.series_id) {
                "test"
            } else {
                "train"
            }
            .into(),
            quasi_steady: u8::from(s.quasi_steady.unwrap_or(false)),
            extrapolated: u8::from(extrapolated.contains(&s.series_id)),
            sha256: file_hash(&path)?,
        });
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    let hash = write_file(&manifest, &w.into_inner()?)?;
    write_file(&marker, wanted.as_bytes())?;
    Ok(hash)
}

pub fn read_manifest(data_dir: &Path) -> Result<Vec<ManifestRow>> {
    let path = data_dir.join(MANIFEST);
    let mut r = csv::Reader::from_path(&path)
        .with_context(|| format!("no dataset manifest at {}; run gen-data first", path.display()))?;
    r.deserialize().map(|row| row.map_err(Into::into)).collect()
}

/// Reads the dataset described by the manifest, checking every archive
/// against its recorded hash. Returns the dataset and the manifest hash.
pub fn load_dataset<S: Scalar>(data_dir: &Path) -> Result<(Dataset<S>, String)> {
    let rows = read_manifest(data_dir)?;
    let mut series = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        if r.series_id != i {
            bail!("manifest rows must list series 0..N in order");
        }
        let path = data_dir.join(&r.path);
        if file_hash(&path)? != r.sha256 {
            bail!("{} does not match its manifest hash", path.display());
        }
        let mut s: SimulationSeries<S> = read_archive(&path)?;
        s.series_id = r.series_id;
        s.quasi_steady = Some(r.quasi_steady == 1);
        series.push(s);
    }
    let pick = |split: &str| rows.iter().filter(|r| r.split == split).map(|r| r.series_id).collect();
    let ds = Dataset::from_split(series, pick("train"), pick("test"))?;
    Ok((ds, file_hash(&data_dir.join(MANIFEST))?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRow {
    pub artifact: String,
    pub sha256: String,
    pub config_hash: String,
    /// Space-separated upstream hashes.
    pub upstream: String,
}

fn record(run: &Path, artifact: &str, sha: &str, config_hash: &str, upstream: &[&str]) -> Result<()> {
    let path = run.join(PROVENANCE);
    let mut rows: BTreeMap<String, ProvenanceRow> = BTreeMap::new();
    if path.exists() {
        for r in csv::Reader::from_path(&path)?.deserialize() {
            let r: ProvenanceRow = r?;
            rows.insert(r.artifact.clone(), r);
        }
    }
    rows.insert(
        artifact.to_string(),
        ProvenanceRow {
            artifact: artifact.to_string(),
            sha256: sha.to_string(),
            config_hash: config_hash.to_string(),
            upstream: upstream.join(" "),
        },
    );
    let mut w = csv::Writer::from_path(&path)?;
    for r in rows.values() {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_artifact(run: &Path, name: &str, bytes: &[u8], config_hash: &str, upstream: &[&str]) -> Result<String> {
    let sha = write_file(&run.join(name), bytes)?;
    record(run, name, &sha, config_hash, upstream)?;
    Ok(sha)
}

fn read_bytes(path: &Path, hint: &str) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("missing {}; {hint}", path.display()))
}

/// Result of a training stage.
#[derive(Clone, Debug)]
pub struct StageOutcome {
    /// Checkpoint name to hash.
    pub checkpoints: Vec<(String, String)>,
    pub report: Option<TrainReport>,
}

impl StageOutcome {
    pub fn hash(&self, name: &str) -> Option<&str> {
        self.checkpoints
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, h)| h.as_str())
    }
}

pub fn train(cfg: &ExperimentConfig, paths: &Paths, opts: &Options, stage: Stage) -> Result<StageOutcome> {
    fs::create_dir_all(&paths.run).with_context(|| format!("creating {}", paths.run.display()))?;
    write_file(&paths.run_file("config.toml"), cfg.to_toml()?.as_bytes())?;
    if opts.f64 {
        train_in::<f64>(cfg, paths, opts, stage)
    } else {
        train_in::<f32>(cfg, paths, opts, stage)
    }
}

fn train_in<S: Scalar>(cfg: &ExperimentConfig, paths: &Paths, opts: &Options, stage: Stage) -> Result<StageOutcome> {
    match stage {
        Stage::Lvm => lvm_stage::<S>(cfg, paths, opts),
        Stage::Lin => lin_stage::<S>(cfg, paths, opts),
        Stage::E2e => e2e_stage::<S>(cfg, paths, opts),
    }
}

fn report_csv(
    run: &Path,
    name: &str,
    report: &TrainReport,
    opts: &Options,
    config_hash: &str,
    up: &[&str],
) -> Result<()> {
    write_artifact(
        run,
        name,
        report.to_csv(!opts.deterministic).as_bytes(),
        config_hash,
        up,
    )?;
    Ok(())
}

fn lvm_stage<S: Scalar>(cfg: &ExperimentConfig, paths: &Paths, opts: &Options) -> Result<StageOutcome> {
    let (ds, manifest) = load_dataset::<S>(&paths.data)?;
    let norm = ds.normalizer()?;
    let spec = &cfg.lvm.spec;
    let cfg_hash = cfg.lvm_hash();
    info!("training {} LVM (c={})", spec.family.name(), spec.c);
    let (lvm, report) = if cfg.needs_svd_fit() {
        (Lvm::fit_svd(&ds, spec)?, None)
    } else {
        let (lvm, r) = train_lvm(&ds, spec, &cfg.lvm.train)?;
        (lvm, Some(r))
    };
    let bytes = encode_lvm_checkpoint(&lvm, spec, &norm, Some(&manifest), Some(&cfg_hash));
    let sha = write_artifact(&paths.run, LVM_CKPT, &bytes, &cfg_hash, &[&manifest])?;
    if let Some(r) = &report {
        report_csv(&paths.run, "lvm_train.csv", r, opts, &cfg_hash, &[&manifest])?;
    }
    Ok(StageOutcome {
        checkpoints: vec![(LVM_CKPT.into(), sha)],
        report,
    })
}

fn load_lvm<S: Scalar>(path: &Path) -> Result<(Lvm<S>, CheckpointHeader, String)> {
    let bytes = read_bytes(path, "train the LVM stage first")?;
    let (lvm, header) = decode_lvm_checkpoint::<S>(&bytes)?;
    Ok((lvm, header, checkpoint_hash(&bytes)))
}

fn load_lin<S: Scalar>(path: &Path) -> Result<(Lin<S>, CheckpointHeader, String)> {
    let bytes = read_bytes(path, "train the LIN stage first")?;
    let (lin, header) = decode_lin_checkpoint::<S>(&bytes)?;
    Ok((lin, header, checkpoint_hash(&bytes)))
}

fn check_pairing(lin_header: &CheckpointHeader, lvm_hash: &str, what: &str) -> Result<()> {
    match lin_header.upstream.as_deref() {
        Some(up) if up == lvm_hash => Ok(()),
        up => bail!(
            "{what}: the LIN was trained against LVM {}, but the LVM checkpoint hashes to {lvm_hash}",
            up.unwrap_or("(unknown)")
        ),
    }
}

fn lin_stage<S: Scalar>(cfg: &ExperimentConfig, paths: &Paths, opts: &Options) -> Result<StageOutcome> {
    let (ds, _) = load_dataset::<S>(&paths.data)?;
    let (lvm, header, lvm_hash) = load_lvm::<S>(&paths.run_file(LVM_CKPT))?;
    let spec = cfg.lin_spec();
    let cfg_hash = cfg.lin_hash();
    info!(
        "training {} LIN (c={}, s={}, w={})",
        spec.family, spec.c, spec.s, cfg.lin.train.w
    );
    let latents = encode_dataset(&lvm, &ds)?;
    let (lin, report) = train_lin(&latents, &spec, &cfg.lin.train)?;
    let bytes = encode_lin_checkpoint(&lin, &header.normalization, &lvm_hash, Some(&cfg_hash));
    let sha = write_artifact(&paths.run, LIN_CKPT, &bytes, &cfg_hash, &[&lvm_hash])?;
    report_csv(&paths.run, "lin_train.csv", &report, opts, &cfg_hash, &[&lvm_hash])?;
    Ok(StageOutcome {
        checkpoints: vec![(LIN_CKPT.into(), sha)],
        report: Some(report),
    })
}

fn e2e_stage<S: Scalar>(cfg: &ExperimentConfig, paths: &Paths, opts: &Options) -> Result<StageOutcome> {
    let (ds, manifest) = load_dataset::<S>(&paths.data)?;
    let norm = ds.normalizer()?;
    let cfg_hash = cfg.e2e_hash();
    let (mut lvm, mut lin, upstream) = if cfg.e2e.from_scratch {
        let lvm = Lvm::build(&cfg.lvm.spec, ds.k()?)?;
        (lvm, Lin::build(&cfg.lin_spec())?, manifest.clone())
    } else {
        let (lvm, _, lvm_hash) = load_lvm::<S>(&paths.run_file(LVM_CKPT))?;
        let (lin, lin_header, _) = load_lin::<S>(&paths.run_file(LIN_CKPT))?;
        check_pairing(&lin_header, &lvm_hash, "e2e stage")?;
        (lvm, lin, lvm_hash)
    };
    if lvm.family() == LvmFamily::Svd {
        bail!("end-to-end training needs a neural LVM");
    }
    info!(
        "end-to-end training (w={}, lr={})",
        cfg.e2e.train.w, cfg.e2e.train.lr_initial
    );
    let report = train_e2e(&mut lvm, &mut lin, &ds, &cfg.e2e.train)?;
    let lvm_bytes = encode_lvm_checkpoint(&lvm, &cfg.lvm.spec, &norm, Some(&upstream), Some(&cfg_hash));
    let lvm_sha = write_artifact(&paths.run, E2E_LVM_CKPT, &lvm_bytes, &cfg_hash, &[&upstream])?;
    let lin_bytes = encode_lin_checkpoint(&lin, &norm, &lvm_sha, Some(&cfg_hash));
    let lin_sha = write_artifact(&paths.run, E2E_LIN_CKPT, &lin_bytes, &cfg_hash, &[&lvm_sha])?;
    report_csv(&paths.run, "e2e_train.csv", &report, opts, &cfg_hash, &[&upstream])?;
    Ok(StageOutcome {
        checkpoints: vec![(E2E_LVM_CKPT.into(), lvm_sha), (E2E_LIN_CKPT.into(), lin_sha)],
        report: Some(report),
    })
}

/// Metrics of one evaluated pair plus the timing measurements.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub rollout_seconds: Vec<f64>,
    pub reference_seconds: f64,
    pub speedup: f64,
    /// Mean relative reconstruction error of the LVM on the test frames.
    pub lvm_error: f64,
}

pub fn evaluate(cfg: &ExperimentConfig, paths: &Paths, opts: &Options, pair: PairKind) -> Result<Evaluation> {
    if opts.f64 {
        evaluate_in::<f64>(cfg, paths, opts, pair)
    } else {
        evaluate_in::<f32>(cfg, paths, opts, pair)
    }
}

/// Mean `L_RE(D(E(g)), g)` over nonzero frames of the test split.
pub fn lvm_test_error<S: Scalar>(lvm: &Lvm<S>, ds: &Dataset<S>) -> Result<f64> {
    let frames: Vec<_> = ds.test().flat_map(|s| s.frames()).filter(|f| f.norm() > 0.0).collect();
    if frames.is_empty() {
        bail!("the test split has no nonzero frames");
    }
    let mut total = 0.0;
    for chunk in frames.chunks(256) {
        let rec = lvm.decode_batch(&lvm.encode_batch(chunk)?)?;
        for (r, f) in rec.iter().zip(chunk) {
            total += loss_re(r.values(), f.values())?;
        }
    }
    Ok(total / frames.len() as f64)
}

fn evaluate_in<S: Scalar>(cfg: &ExperimentConfig, paths: &Paths, opts: &Options, pair: PairKind) -> Result<Evaluation> {
    let (ds, manifest) = load_dataset::<S>(&paths.data)?;
    if ds.test_ids.is_empty() {
        bail!("the test split is empty");
    }
    let (lvm_file, lin_file, suffix) = pair.files();
    let (lvm, _, lvm_hash) = load_lvm::<S>(&paths.run_file(lvm_file))?;
    let (lin, lin_header, lin_hash) = load_lin::<S>(&paths.run_file(lin_file))?;
    check_pairing(&lin_header, &lvm_hash, "evaluate")?;
    let lvm_error = lvm_test_error(&lvm, &ds)?;
    let surrogate = SurrogatePair::new(lvm, lin, ds.normalizer()?)?;
    let (rows, times) = evaluate_test_split(&surrogate, &ds, cfg.eval.iso)?;
    let w_ai = times.iter().sum::<f64>() / times.len() as f64;
    let w_ref = if cfg.eval.w_cfd > 0.0 {
        cfg.eval.w_cfd
    } else {
        let mean_v = ds.test().map(|s| s.inlet_velocity).sum::<f64>() / ds.test_ids.len() as f64;
        time_generation(&lfs_core::datagen::GenConfig {
            v: mean_v,
            ..cfg.dataset.gen_config()
        })?
    };
    let speedup = lfs_core::metrics::measure_speedup(w_ref, w_ai)?;
    let config_hash = match pair {
        PairKind::Classic => cfg.lin_hash(),
        PairKind::E2e => cfg.e2e_hash(),
    };
    let provenance = vec![
        ("config".to_string(), config_hash.clone()),
        ("dataset_manifest".to_string(), manifest.clone()),
        ("lvm_checkpoint".to_string(), lvm_hash.clone()),
        ("lin_checkpoint".to_string(), lin_hash.clone()),
    ];
    let timing = (!opts.deterministic).then_some((w_ai, w_ref));
    let report = MetricsReport::new(rows, timing, provenance)?;
    let up = [manifest.as_str(), lvm_hash.as_str(), lin_hash.as_str()];
    write_artifact(
        &paths.run,
        &format!("metrics{suffix}.csv"),
        report.to_csv().as_bytes(),
        &config_hash,
        &up,
    )?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["series_id", "w_ai_seconds", "w_ref_seconds", "s_w"])?;
    for (r, t) in report.rows.iter().zip(&times) {
        w.write_record([
            r.series_id.to_string(),
            format!("{t:.6e}"),
            format!("{w_ref:.6e}"),
            format!("{:.6e}", w_ref / t),
        ])?;
    }
    w.write_record([
        "mean".to_string(),
        format!("{w_ai:.6e}"),
        format!("{w_ref:.6e}"),
        format!("{speedup:.6e}"),
    ])?;
    write_artifact(
        &paths.run,
        &format!("timing{suffix}.csv"),
        &w.into_inner()?,
        &config_hash,
        &up,
    )?;
    info!(
        "Error_IA {:.4}  Error_VF {:.4}  W_AI {:.4}s  S_W {:.1}",
        report.error_ia, report.error_vf, w_ai, speedup
    );
    Ok(Evaluation {
        report,
        rollout_seconds: times,
        reference_seconds: w_ref,
        speedup,
        lvm_error,
    })
}

/// Data generation plus every stage the config asks for, then evaluation
/// of the classic pair (and the end-to-end pair when enabled).
pub fn run_all(cfg: &ExperimentConfig, paths: &Paths, opts: &Options) -> Result<(Evaluation, Option<Evaluation>)> {
    gen_data(cfg, &paths.data, opts.workers)?;
    train(cfg, paths, opts, Stage::Lvm)?;
    train(cfg, paths, opts, Stage::Lin)?;
    let classic = evaluate(cfg, paths, opts, PairKind::Classic)?;
    let e2e = if cfg.e2e.enabled {
        train(cfg, paths, opts, Stage::E2e)?;
        Some(evaluate(cfg, paths, opts, PairKind::E2e)?)
    } else {
        None
    };
    Ok((classic, e2e))
}

/// Copies the LVM checkpoint of `from` into `to`, so LIN variants can share
/// one trained autoencoder.
pub fn share_lvm(from: &Paths, to: &Paths) -> Result<()> {
    fs::create_dir_all(&to.run)?;
    let src = from.run_file(LVM_CKPT);
    let bytes = fs::read(&src).with_context(|| format!("reading {}", src.display()))?;
    let sha = write_file(&to.run_file(LVM_CKPT), &bytes)?;
    let header = decode_lvm_checkpoint::<f32>(&bytes)?.1;
    let up = header.upstream.unwrap_or_default();
    record(
        &to.run,
        LVM_CKPT,
        &sha,
        header.config_hash.as_deref().unwrap_or(""),
        &[&up],
    )
    .map_err(|e| anyhow!("recording shared LVM: {e}"))
}
