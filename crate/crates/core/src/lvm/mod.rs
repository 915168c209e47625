//! Latent vector models: an encoder `E: frame → R^c` and decoder
//! `D: R^c → frame`, in three families.

mod conv;
mod patch;
mod svd;

use lfs_nn::{Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LfsError, Result};
use crate::field::{Dataset, GridFrame};
use crate::Scalar;

pub use conv::{ConvLvm, STRIDED_LAYERS};
pub use patch::PatchLvm;
pub use svd::{left_svd, LeftSvd, SvdLvm};

/// Parameter-store group of LVM weights inside a shared graph.
pub const LVM_GROUP: u32 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LvmFamily {
    Svd,
    Conv,
    PatchTransformer,
}

impl LvmFamily {
    pub fn name(self) -> &'static str {
        match self {
            Self::Svd => "svd",
            Self::Conv => "conv",
            Self::PatchTransformer => "patch_transformer",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LvmSpec {
    pub family: LvmFamily,
    pub c: usize,
    pub encoder_channels: Vec<usize>,
    /// The final entry is the output channel count and is never divided.
    pub decoder_channels: Vec<usize>,
    pub channel_divisor: usize,
    pub leaky_slope: f64,
    pub patch_size: usize,
    pub transformer_layers: usize,
    pub heads: usize,
    /// Feed-forward width as a multiple of `c`.
    pub ff_mult: usize,
    /// Subtract the training mean before the SVD.
    pub svd_center: bool,
    pub seed: u64,
}

impl Default for LvmSpec {
    fn default() -> Self {
        Self {
            family: LvmFamily::Conv,
            c: 64,
            encoder_channels: vec![128, 256, 512, 1024],
            decoder_channels: vec![512, 256, 128, 1],
            channel_divisor: 1,
            leaky_slope: 0.2,
            patch_size: 16,
            transformer_layers: 3,
            heads: 8,
            ff_mult: 2,
            svd_center: false,
            seed: 0,
        }
    }
}

impl LvmSpec {
    pub fn conv(c: usize, divisor: usize) -> Self {
        Self {
            c,
            channel_divisor: divisor,
            ..Self::default()
        }
    }

    pub fn svd(c: usize) -> Self {
        Self {
            family: LvmFamily::Svd,
            c,
            ..Self::default()
        }
    }

    pub fn patch(c: usize) -> Self {
        Self {
            family: LvmFamily::PatchTransformer,
            c,
            ..Self::default()
        }
    }

    fn scaled(&self, ch: usize) -> usize {
        (ch / self.channel_divisor.max(1)).max(1)
    }

    pub fn scaled_encoder_channels(&self) -> Vec<usize> {
        self.encoder_channels.iter().map(|&c| self.scaled(c)).collect()
    }

    pub fn scaled_decoder_channels(&self) -> Vec<usize> {
        let n = self.decoder_channels.len();
        self.decoder_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| if i + 1 == n { c } else { self.scaled(c) })
            .collect()
    }

    pub fn validate(&self, k: usize) -> Result<()> {
        if self.c < 3 {
            return Err(invalid(format!("latent dimension c={} must be at least 3", self.c)));
        }
        if self.channel_divisor == 0 {
            return Err(invalid("channel divisor must be positive"));
        }
        match self.family {
            LvmFamily::Svd => {}
            LvmFamily::Conv => {
                let div = 1 << STRIDED_LAYERS;
                if !k.is_multiple_of(div) || k == 0 {
                    return Err(invalid(format!("conv LVM needs k divisible by {div}, got {k}")));
                }
                if self.encoder_channels.len() != STRIDED_LAYERS || self.decoder_channels.len() != STRIDED_LAYERS {
                    return Err(invalid(format!(
                        "conv LVM needs {STRIDED_LAYERS} encoder and decoder channel counts"
                    )));
                }
                if self.decoder_channels.last() != Some(&1) {
                    return Err(invalid("conv LVM decoder must end in one channel"));
                }
            }
            LvmFamily::PatchTransformer => {
                if self.patch_size == 0 || !k.is_multiple_of(self.patch_size) {
                    return Err(invalid(format!(
                        "patch LVM needs k divisible by the patch size {}, got {k}",
                        self.patch_size
                    )));
                }
                if self.heads == 0 || !self.c.is_multiple_of(self.heads) {
                    return Err(invalid(format!(
                        "c={} is not divisible by {} heads",
                        self.c, self.heads
                    )));
                }
                if self.transformer_layers == 0 {
                    return Err(invalid("patch LVM needs at least one transformer layer"));
                }
            }
        }
        Ok(())
    }
}

/// Length-`c` latent vector; the last two slots carry normalized `(v, t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState<S> {
    pub values: Vec<S>,
}

impl<S: Scalar> LatentState<S> {
    pub fn new(values: Vec<S>) -> Result<Self> {
        if values.len() < 3 {
            return Err(invalid(format!("latent length {} is below 3", values.len())));
        }
        Ok(Self { values })
    }

    pub fn c(&self) -> usize {
        self.values.len()
    }

    /// Overwrites only the two config slots.
    pub fn inject_config(&mut self, v_norm: f64, t_norm: f64) {
        inject_config(&mut self.values, v_norm, t_norm);
    }

    pub fn with_config(mut self, v_norm: f64, t_norm: f64) -> Self {
        self.inject_config(v_norm, t_norm);
        self
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
    }
}

/// Sets `latent[c-2] = v_norm`, `latent[c-1] = t_norm`.
pub fn inject_config<S: Scalar>(latent: &mut [S], v_norm: f64, t_norm: f64) {
    let c = latent.len();
    assert!(c >= 3, "latent too short for config slots");
    latent[c - 2] = S::lit(v_norm);
    latent[c - 1] = S::lit(t_norm);
}

/// A trained or untrained latent vector model.
#[derive(Clone, Debug)]
pub enum Lvm<S: Scalar> {
    Svd(SvdLvm<S>),
    Conv(ConvLvm<S>),
    Patch(PatchLvm<S>),
}

impl<S: Scalar> Lvm<S> {
    /// Untrained neural LVM with seeded fan-in initialization.
    pub fn build(spec: &LvmSpec, k: usize) -> Result<Self> {
        spec.validate(k)?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        match spec.family {
            LvmFamily::Svd => Err(invalid("SVD models are fitted with Lvm::fit_svd, not built")),
            LvmFamily::Conv => Ok(Self::Conv(ConvLvm::new(
                k,
                spec.c,
                &spec.scaled_encoder_channels(),
                &spec.scaled_decoder_channels(),
                spec.leaky_slope,
                &mut rng,
            ))),
            LvmFamily::PatchTransformer => Ok(Self::Patch(PatchLvm::new(
                k,
                spec.c,
                spec.patch_size,
                spec.transformer_layers,
                spec.heads,
                spec.ff_mult * spec.c,
                &mut rng,
            ))),
        }
    }

    /// Closed-form SVD model on every frame of the training split.
    pub fn fit_svd(dataset: &Dataset<S>, spec: &LvmSpec) -> Result<Self> {
        if spec.family != LvmFamily::Svd {
            return Err(invalid("fit_svd needs an svd spec"));
        }
        let k = dataset.k()?;
        spec.validate(k)?;
        let frames: Vec<Vec<f64>> = dataset
            .train()
            .flat_map(|s| s.frames().iter())
            .map(|f| f.values().iter().map(|v| v.as_f64()).collect())
            .collect();
        Ok(Self::Svd(SvdLvm::fit(&frames, k, spec.c, spec.svd_center)?))
    }

    pub fn family(&self) -> LvmFamily {
        match self {
            Self::Svd(_) => LvmFamily::Svd,
            Self::Conv(_) => LvmFamily::Conv,
            Self::Patch(_) => LvmFamily::PatchTransformer,
        }
    }

    pub fn c(&self) -> usize {
        match self {
            Self::Svd(m) => m.c,
            Self::Conv(m) => m.c,
            Self::Patch(m) => m.c,
        }
    }

    pub fn k(&self) -> usize {
        match self {
            Self::Svd(m) => m.k,
            Self::Conv(m) => m.k,
            Self::Patch(m) => m.k,
        }
    }

    pub fn store(&self) -> Option<&ParamStore<S>> {
        match self {
            Self::Svd(_) => None,
            Self::Conv(m) => Some(&m.store),
            Self::Patch(m) => Some(&m.store),
        }
    }

    pub fn store_mut(&mut self) -> Option<&mut ParamStore<S>> {
        match self {
            Self::Svd(_) => None,
            Self::Conv(m) => Some(&mut m.store),
            Self::Patch(m) => Some(&mut m.store),
        }
    }

    pub fn num_params(&self) -> usize {
        self.store().map_or(0, ParamStore::num_scalars)
    }

    /// Graph encoder `[b, k²] → [b, c]` using the weights in `store` (which
    /// must be this model's store or a perturbed copy of it).
    pub fn encode_with(&self, g: &mut Graph<S>, store: Option<&ParamStore<S>>, x: Var) -> Var {
        match self {
            Self::Svd(m) => {
                let x = match &m.mean {
                    Some(mu) => {
                        let neg = g.input(Tensor::from_vec(&[mu.len()], mu.iter().map(|&v| -v).collect()).unwrap());
                        g.add_trailing(x, neg)
                    }
                    None => x,
                };
                let w = g.input(Tensor::from_vec(&[m.c, m.k * m.k], m.basis_t.clone()).unwrap());
                g.linear(x, w, None)
            }
            Self::Conv(m) => m.encode_var(g, store.unwrap_or(&m.store), x),
            Self::Patch(m) => m.encode_var(g, store.unwrap_or(&m.store), x),
        }
    }

    /// Graph decoder `[b, c] → [b, k²]`.
    pub fn decode_with(&self, g: &mut Graph<S>, store: Option<&ParamStore<S>>, l: Var) -> Var {
        match self {
            Self::Svd(m) => {
                let kk = m.k * m.k;
                // basis rows are Uᵀ; the decoder weight [k², c] is U
                let mut u = vec![S::zero(); kk * m.c];
                for j in 0..m.c {
                    for i in 0..kk {
                        u[i * m.c + j] = m.basis_t[j * kk + i];
                    }
                }
                let w = g.input(Tensor::from_vec(&[kk, m.c], u).unwrap());
                let y = g.linear(l, w, None);
                match &m.mean {
                    Some(mu) => {
                        let mu = g.input(Tensor::from_vec(&[kk], mu.clone()).unwrap());
                        g.add_trailing(y, mu)
                    }
                    None => y,
                }
            }
            Self::Conv(m) => m.decode_var(g, store.unwrap_or(&m.store), l),
            Self::Patch(m) => m.decode_var(g, store.unwrap_or(&m.store), l),
        }
    }

    pub fn encode_var(&self, g: &mut Graph<S>, x: Var) -> Var {
        self.encode_with(g, None, x)
    }

    pub fn decode_var(&self, g: &mut Graph<S>, l: Var) -> Var {
        self.decode_with(g, None, l)
    }

    fn check_frame(&self, f: &GridFrame<S>) -> Result<()> {
        if f.k() != self.k() {
            return Err(LfsError::Shape(format!(
                "frame k={} but the LVM expects k={}",
                f.k(),
                self.k()
            )));
        }
        Ok(())
    }

    /// Latents of `frames`, row-major `[n, c]`.
    pub fn encode_batch(&self, frames: &[&GridFrame<S>]) -> Result<Vec<Vec<S>>> {
        for f in frames {
            self.check_frame(f)?;
        }
        if frames.is_empty() {
            return Ok(Vec::new());
        }
        if let Self::Svd(m) = self {
            return Ok(frames.iter().map(|f| m.encode_flat(f.values())).collect());
        }
        let kk = self.k() * self.k();
        let data: Vec<S> = frames.iter().flat_map(|f| f.values().iter().copied()).collect();
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[frames.len(), kk], data).expect("batch shape"));
        let l = self.encode_var(&mut g, x);
        Ok(g.value(l).data().chunks(self.c()).map(<[S]>::to_vec).collect())
    }

    /// Frames decoded from latents (each of length `c`).
    pub fn decode_batch(&self, latents: &[Vec<S>]) -> Result<Vec<GridFrame<S>>> {
        let c = self.c();
        if let Some(bad) = latents.iter().find(|l| l.len() != c) {
            return Err(LfsError::Shape(format!(
                "latent length {} but the LVM has c={c}",
                bad.len()
            )));
        }
        if latents.is_empty() {
            return Ok(Vec::new());
        }
        let k = self.k();
        if let Self::Svd(m) = self {
            return latents.iter().map(|l| GridFrame::new(k, m.decode_flat(l))).collect();
        }
        let data: Vec<S> = latents.iter().flatten().copied().collect();
        let mut g = Graph::new();
        let l = g.input(Tensor::from_vec(&[latents.len(), c], data).expect("batch shape"));
        let y = self.decode_var(&mut g, l);
        g.value(y)
            .data()
            .chunks(k * k)
            .map(|chunk| GridFrame::new(k, chunk.to_vec()))
            .collect()
    }

    pub fn encode(&self, frame: &GridFrame<S>) -> Result<LatentState<S>> {
        let mut v = self.encode_batch(&[frame])?;
        LatentState::new(v.pop().expect("one latent"))
    }

    pub fn decode(&self, latent: &LatentState<S>) -> Result<GridFrame<S>> {
        let mut f = self.decode_batch(std::slice::from_ref(&latent.values))?;
        Ok(f.pop().expect("one frame"))
    }
}
