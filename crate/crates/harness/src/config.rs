//! Experiment configuration: one TOML file with `dataset`, `lvm`, `lin`,
//! `e2e`, `eval` and `sweep` sections, plus `--set path=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use lfs_core::datagen::{even_velocities, GenConfig};
use lfs_core::lin::LinSpec;
use lfs_core::lvm::{LvmFamily, LvmSpec};
use lfs_core::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

/// Environment variable naming the default data root.
pub const DATA_ROOT_ENV: &str = "LFS_DATA_ROOT";
pub const DEFAULT_DATA_ROOT: &str = "lfs-data";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    /// Test series evenly spaced through the velocity-sorted list, so test
    /// velocities lie inside the training range.
    Interior,
    /// Seeded random split.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSection {
    /// Explicit inlet velocities; when empty, `count` evenly spaced values
    /// over `[v_min, v_max]`.
    pub velocities: Vec<f64>,
    pub count: usize,
    pub v_min: f64,
    pub v_max: f64,
    pub k: usize,
    pub steps: usize,
    pub substeps: usize,
    pub n_train: usize,
    pub split: SplitKind,
    pub seed: u64,
    pub inlet_width: f64,
    pub inlet_start: f64,
    pub refine: usize,
    pub gain: f64,
    pub recirculation: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let g = GenConfig::default();
        Self {
            velocities: Vec::new(),
            count: 12,
            v_min: 0.005,
            v_max: 0.015,
            k: g.k,
            steps: g.steps,
            substeps: g.substeps,
            n_train: 9,
            split: SplitKind::Interior,
            seed: 0,
            inlet_width: g.inlet_width,
            inlet_start: g.inlet_start,
            refine: g.refine,
            gain: g.gain,
            recirculation: g.recirculation,
        }
    }
}

impl DatasetSection {
    pub fn velocities(&self) -> Vec<f64> {
        if self.velocities.is_empty() {
            even_velocities(self.count, self.v_min, self.v_max)
        } else {
            self.velocities.clone()
        }
    }

    /// Generator settings; `v` is filled in per series.
    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            k: self.k,
            steps: self.steps,
            substeps: self.substeps,
            v: self.v_min,
            inlet_width: self.inlet_width,
            inlet_start: self.inlet_start,
            refine: self.refine,
            gain: self.gain,
            recirculation: self.recirculation,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LvmSection {
    #[serde(flatten)]
    pub spec: LvmSpec,
    pub train: TrainConfig,
}

impl Default for LvmSection {
    fn default() -> Self {
        Self {
            spec: LvmSpec::conv(64, 16),
            train: TrainConfig {
                epochs: 30,
                ..TrainConfig::lvm()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinSection {
    /// `c` is taken from the LVM section.
    #[serde(flatten)]
    pub spec: LinSpec,
    pub train: TrainConfig,
}

impl Default for LinSection {
    fn default() -> Self {
        Self {
            spec: LinSpec::default(),
            train: TrainConfig {
                epochs: 30,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct E2eSection {
    /// Run the end-to-end stage in sweeps.
    pub enabled: bool,
    /// Train both networks end to end from fresh weights instead of
    /// fine-tuning the classic pair.
    pub from_scratch: bool,
    pub train: TrainConfig,
}

impl Default for E2eSection {
    fn default() -> Self {
        Self {
            enabled: false,
            from_scratch: false,
            train: TrainConfig {
                epochs: 3,
                ..TrainConfig::fine_tune()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Reference simulation wall clock in seconds. Zero means: time the
    /// generator at the dataset's `(k, T, substeps)`.
    pub w_cfd: f64,
    pub iso: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            w_cfd: 0.0,
            iso: lfs_core::metrics::DEFAULT_ISO,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    /// Dotted config path, e.g. `lin.train.w`.
    pub path: String,
    pub values: Vec<Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSection {
    pub axes: Vec<Axis>,
    pub replicates: usize,
    /// Largest allowed number of cells times replicates.
    pub cap: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            axes: Vec::new(),
            replicates: 2,
            cap: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Run directory, relative to the data root unless absolute.
    pub output: String,
    pub dataset: DatasetSection,
    pub lvm: LvmSection,
    pub lin: LinSection,
    pub e2e: E2eSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output: "desk".into(),
            dataset: DatasetSection::default(),
            lvm: LvmSection::default(),
            lin: LinSection::default(),
            e2e: E2eSection::default(),
            eval: EvalSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Loads `path` (or the defaults) and applies `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<Table>()
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Table::new(),
        };
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| anyhow!("override {o:?} is not of the form path=value"))?;
            set_path(&mut table, key.trim(), parse_value(value.trim()))?;
        }
        Self::from_table(table)
    }

    /// Keys missing from `table` keep the values of [`Self::default`],
    /// including the per-section training presets.
    pub fn from_table(table: Table) -> Result<Self> {
        let mut base = Self::default();
        if get_path(&table, "lvm.family").and_then(Value::as_str) == Some("patch_transformer") {
            base.lvm.train = TrainConfig {
                epochs: base.lvm.train.epochs,
                ..TrainConfig::patch_lvm()
            };
        }
        let mut merged = base.to_table()?;
        merge(&mut merged, &table);
        let cfg: Self = Value::Table(merged).try_into().context("invalid configuration")?;
        // flattened sections cannot reject unknown keys themselves
        let resolved = cfg.to_table()?;
        let mut unknown = Vec::new();
        unknown_keys(&table, &resolved, "", &mut unknown);
        if !unknown.is_empty() {
            bail!("unknown configuration keys: {}", unknown.join(", "));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_table(&self) -> Result<Table> {
        Ok(Table::try_from(self)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// A copy with `path` set to `value`.
    pub fn with(&self, path: &str, value: Value) -> Result<Self> {
        let mut t = self.to_table()?;
        set_path(&mut t, path, value)?;
        Self::from_table(t)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dataset;
        let n = d.velocities().len();
        if n < 2 {
            bail!("the dataset needs at least two velocities");
        }
        if d.n_train == 0 || d.n_train >= n {
            bail!("n_train={} must lie in [1, {}]", d.n_train, n - 1);
        }
        d.gen_config().validate()?;
        self.lvm.spec.validate(d.k)?;
        self.lin_spec().validate()?;
        for t in [&self.lvm.train, &self.lin.train, &self.e2e.train] {
            t.validate()?;
        }
        if self.sweep.replicates == 0 {
            bail!("sweep replicates must be at least 1");
        }
        Ok(())
    }

    /// The LIN spec with `c` taken from the LVM.
    pub fn lin_spec(&self) -> LinSpec {
        LinSpec {
            c: self.lvm.spec.c,
            ..self.lin.spec.clone()
        }
    }

    /// Seeds of every stochastic stage shifted by `replicate`.
    pub fn replicate(&self, replicate: usize) -> Self {
        let r = replicate as u64;
        let mut c = self.clone();
        c.lvm.spec.seed += r;
        c.lvm.train.seed += r;
        c.lin.spec.seed += r;
        c.lin.train.seed += r;
        c.e2e.train.seed += r;
        c
    }

    /// Hash of everything that determines the generated data.
    pub fn dataset_hash(&self) -> String {
        hash_json(&[json(&self.dataset)])
    }

    /// Hash of everything that determines the LVM checkpoint.
    pub fn lvm_hash(&self) -> String {
        hash_json(&[json(&self.dataset), json(&self.lvm)])
    }

    pub fn lin_hash(&self) -> String {
        hash_json(&[
            json(&self.dataset),
            json(&self.lvm),
            json(&self.lin_spec()),
            json(&self.lin.train),
        ])
    }

    pub fn e2e_hash(&self) -> String {
        hash_json(&[
            json(&self.dataset),
            json(&self.lvm),
            json(&self.lin_spec()),
            json(&self.lin.train),
            json(&self.e2e),
        ])
    }

    pub fn run_dir(&self, root: &Path) -> PathBuf {
        root.join(&self.output)
    }

    pub fn needs_svd_fit(&self) -> bool {
        self.lvm.spec.family == LvmFamily::Svd
    }
}

/// Overlays `over` onto `base`; tables merge key by key, everything else
/// (arrays included) is replaced.
fn merge(base: &mut Table, over: &Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

/// Data root from the environment, or the default.
pub fn data_root() -> PathBuf {
    std::env::var_os(DATA_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_ROOT))
}

fn json<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

fn hash_json(parts: &[serde_json::Value]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(serde_json::to_vec(p).expect("json"));
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

/// Parses an override value as a TOML literal, falling back to a bare
/// string (`family=mlp`).
pub fn parse_value(text: &str) -> Value {
    format!("v = {text}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(text.to_string()))
}

pub fn set_path(table: &mut Table, path: &str, value: Value) -> Result<()> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts
        .pop()
        .filter(|p| !p.is_empty())
        .ok_or_else(|| anyhow!("empty config path"))?;
    let mut t = table;
    for p in parts {
        let next = t.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        t = next
            .as_table_mut()
            .ok_or_else(|| anyhow!("{path}: {p} is not a section"))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

pub fn get_path<'a>(table: &'a Table, path: &str) -> Option<&'a Value> {
    let mut parts = path.split('.');
    let mut v = table.get(parts.next()?)?;
    for p in parts {
        v = v.as_table()?.get(p)?;
    }
    Some(v)
}

fn unknown_keys(given: &Table, resolved: &Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in given {
        let path = format!("{prefix}{k}");
        match (v, resolved.get(k)) {
            (_, None) => out.push(path),
            (Value::Table(g), Some(Value::Table(r))) => unknown_keys(g, r, &format!("{path}."), out),
            _ => {}
        }
    }
}

/// Renders a config value for table cells (`[128, 128]` becomes `128;128`).
pub fn value_label(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(a) => a.iter().map(value_label).collect::<Vec<_>>().join(";"),
        other => other.to_string(),
    }
}
