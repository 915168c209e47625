//! Latent integration networks: `I: R^(s×c) → R^c`, predicting the latent
//! change `Δl` from a zero-padded history of the last `s` latents.

use std::fmt;
use std::str::FromStr;

use lfs_nn::layers::{sinusoidal_positions, Conv1d, EncoderLayer, Linear, LstmLayer};
use lfs_nn::{fan_in_uniform, Graph, ParamId, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LfsError, Result};
use crate::lvm::{inject_config, LatentState};
use crate::Scalar;

/// Parameter-store group of LIN weights inside a shared graph.
pub const LIN_GROUP: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinFamily {
    Linear,
    Mlp,
    Arc,
    Recurrent,
    Transformer,
}

impl LinFamily {
    pub const ALL: [LinFamily; 5] = [Self::Linear, Self::Mlp, Self::Arc, Self::Recurrent, Self::Transformer];

    pub fn name(self) -> &'static str {
        match self {
            Self::Linear => "linear",
            Self::Mlp => "mlp",
            Self::Arc => "arc",
            Self::Recurrent => "recurrent",
            Self::Transformer => "transformer",
        }
    }
}

impl fmt::Display for LinFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LinFamily {
    type Err = LfsError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| invalid(format!("unknown LIN family {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinSpec {
    pub family: LinFamily,
    pub c: usize,
    /// Input sequence length.
    pub s: usize,
    /// Hidden sizes: dense widths (MLP), LSTM widths (recurrent) or
    /// convolution channels before the final `c` (ARC).
    pub hidden: Vec<usize>,
    pub transformer_layers: usize,
    pub heads: usize,
    /// Transformer feed-forward width as a multiple of `c`.
    pub ff_mult: usize,
    pub leaky_slope: f64,
    pub seed: u64,
}

impl Default for LinSpec {
    fn default() -> Self {
        Self {
            family: LinFamily::Mlp,
            c: 64,
            s: 1,
            hidden: vec![128, 128, 128],
            transformer_layers: 6,
            heads: 8,
            ff_mult: 2,
            leaky_slope: 0.2,
            seed: 0,
        }
    }
}

impl LinSpec {
    pub fn new(family: LinFamily, c: usize, s: usize) -> Self {
        Self {
            family,
            c,
            s,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.c < 3 {
            return Err(invalid(format!("latent dimension c={} must be at least 3", self.c)));
        }
        if self.s == 0 {
            return Err(invalid("sequence length s must be at least 1"));
        }
        if self.hidden.contains(&0) {
            return Err(invalid("hidden sizes must be positive"));
        }
        match self.family {
            LinFamily::Mlp | LinFamily::Arc | LinFamily::Recurrent if self.hidden.is_empty() => {
                Err(invalid(format!("{} LIN needs at least one hidden size", self.family)))
            }
            LinFamily::Transformer if self.heads == 0 || !self.c.is_multiple_of(self.heads) => Err(invalid(format!(
                "c={} is not divisible by {} heads",
                self.c, self.heads
            ))),
            LinFamily::Transformer if self.transformer_layers == 0 => {
                Err(invalid("transformer LIN needs at least one layer"))
            }
            _ => Ok(()),
        }
    }
}

/// The last `s` latents, oldest first. Missing history is zero rows at the
/// front.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryBuffer<S> {
    s: usize,
    c: usize,
    rows: Vec<S>,
    filled: usize,
}

impl<S: Scalar> HistoryBuffer<S> {
    pub fn new(s: usize, c: usize) -> Self {
        assert!(s >= 1 && c >= 1, "history buffer needs s, c >= 1");
        Self {
            s,
            c,
            rows: vec![S::zero(); s * c],
            filled: 0,
        }
    }

    /// Buffer holding only `first` as its newest row.
    pub fn starting_at(s: usize, first: &[S]) -> Self {
        let mut b = Self::new(s, first.len());
        b.push(first);
        b
    }

    pub fn s(&self) -> usize {
        self.s
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn filled_count(&self) -> usize {
        self.filled
    }

    /// Row-major `s×c`.
    pub fn rows(&self) -> &[S] {
        &self.rows
    }

    pub fn row(&self, j: usize) -> &[S] {
        &self.rows[j * self.c..(j + 1) * self.c]
    }

    pub fn newest(&self) -> &[S] {
        self.row(self.s - 1)
    }

    /// Shifts every row up by one and appends `latent` as the newest row.
    pub fn push(&mut self, latent: &[S]) {
        assert_eq!(latent.len(), self.c, "latent length does not match the buffer");
        self.rows.copy_within(self.c.., 0);
        let start = (self.s - 1) * self.c;
        self.rows[start..].copy_from_slice(latent);
        self.filled = (self.filled + 1).min(self.s);
    }
}

/// Anything that maps a history buffer to a latent delta.
pub trait LatentIntegrator<S: Scalar> {
    fn c(&self) -> usize;
    fn s(&self) -> usize;
    fn predict_delta(&self, buffer: &HistoryBuffer<S>) -> Result<Vec<S>>;
}

#[derive(Clone, Debug)]
enum Net {
    Linear(Linear),
    Mlp(Vec<Linear>),
    Arc { convs: Vec<Conv1d>, mix: ParamId },
    Recurrent { cells: Vec<LstmLayer>, out: Linear },
    Transformer { layers: Vec<EncoderLayer>, out: Linear },
}

/// A latent integration network with its own parameter store.
#[derive(Clone, Debug)]
pub struct Lin<S> {
    pub spec: LinSpec,
    pub store: ParamStore<S>,
    net: Net,
}

impl<S: Scalar> Lin<S> {
    /// Untrained network with seeded fan-in initialization.
    pub fn build(spec: &LinSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let rng = &mut rng;
        let mut store = ParamStore::new(LIN_GROUP);
        let st = &mut store;
        let (c, s) = (spec.c, spec.s);
        let net = match spec.family {
            LinFamily::Linear => Net::Linear(Linear::new(st, "dense", s * c, c, true, rng)),
            LinFamily::Mlp => {
                let mut dims = vec![s * c];
                dims.extend(&spec.hidden);
                dims.push(c);
                Net::Mlp(
                    dims.windows(2)
                        .enumerate()
                        .map(|(i, d)| Linear::new(st, &format!("dense{i}"), d[0], d[1], true, rng))
                        .collect(),
                )
            }
            LinFamily::Arc => {
                let mut chans = vec![c];
                chans.extend(&spec.hidden);
                chans.push(c);
                let convs = chans
                    .windows(2)
                    .enumerate()
                    .map(|(i, d)| Conv1d::new(st, &format!("conv{i}"), d[0], d[1], 3, 1, rng))
                    .collect();
                let mix = st.add("mix", fan_in_uniform(rng, &[1, s], s));
                Net::Arc { convs, mix }
            }
            LinFamily::Recurrent => {
                let mut cells = Vec::new();
                let mut input = c;
                for (i, &h) in spec.hidden.iter().enumerate() {
                    cells.push(LstmLayer::new(st, &format!("lstm{i}"), input, h, rng));
                    input = h;
                }
                let out = Linear::new(st, "dense", input, c, true, rng);
                Net::Recurrent { cells, out }
            }
            LinFamily::Transformer => {
                let layers = (0..spec.transformer_layers)
                    .map(|i| EncoderLayer::new(st, &format!("enc{i}"), c, spec.heads, spec.ff_mult * c, rng))
                    .collect();
                let out = Linear::new(st, "dense", c, c, true, rng);
                Net::Transformer { layers, out }
            }
        };
        Ok(Self {
            spec: spec.clone(),
            store,
            net,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Graph form: `[b, s, c] → [b, c]`, using weights from `store`.
    pub fn delta_with(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Var {
        let (c, s) = (self.spec.c, self.spec.s);
        let b = g.shape(x)[0];
        let slope = S::lit(self.spec.leaky_slope);
        match &self.net {
            Net::Linear(dense) => {
                let flat = g.reshape(x, &[b, s * c]);
                dense.forward(g, store, flat)
            }
            Net::Mlp(layers) => {
                let mut h = g.reshape(x, &[b, s * c]);
                let last = layers.len() - 1;
                for (i, layer) in layers.iter().enumerate() {
                    h = layer.forward(g, store, h);
                    if i < last {
                        h = g.leaky_relu(h, slope);
                    }
                }
                h
            }
            Net::Arc { convs, mix } => {
                // channels = latent components, length = time
                let mut h = g.permute(x, &[0, 2, 1]);
                let last = convs.len() - 1;
                for (i, conv) in convs.iter().enumerate() {
                    h = conv.forward(g, store, h);
                    if i < last {
                        h = g.leaky_relu(h, slope);
                    }
                }
                let w = g.param(store, *mix);
                let y = g.linear(h, w, None);
                g.reshape(y, &[b, c])
            }
            Net::Recurrent { cells, out } => {
                let mut seq: Vec<Var> = (0..s).map(|j| g.select(x, j)).collect();
                for cell in cells {
                    seq = cell.forward(g, store, &seq);
                }
                out.forward(g, store, seq[s - 1])
            }
            Net::Transformer { layers, out } => {
                let pos = g.input(sinusoidal_positions(s, c));
                let mut h = g.add_trailing(x, pos);
                for layer in layers {
                    h = layer.forward(g, store, h);
                }
                // newest timestep token
                let newest = g.select(h, s - 1);
                out.forward(g, store, newest)
            }
        }
    }

    pub fn delta_var(&self, g: &mut Graph<S>, x: Var) -> Var {
        self.delta_with(g, &self.store, x)
    }

    /// Deltas for a batch of buffers.
    pub fn predict_batch(&self, buffers: &[&HistoryBuffer<S>]) -> Result<Vec<Vec<S>>> {
        let (c, s) = (self.spec.c, self.spec.s);
        for buf in buffers {
            if buf.c() != c || buf.s() != s {
                return Err(LfsError::Shape(format!(
                    "buffer is {}×{} but the LIN expects {s}×{c}",
                    buf.s(),
                    buf.c()
                )));
            }
        }
        if buffers.is_empty() {
            return Ok(Vec::new());
        }
        let data: Vec<S> = buffers.iter().flat_map(|b| b.rows().iter().copied()).collect();
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[buffers.len(), s, c], data).expect("buffer shape"));
        let y = self.delta_var(&mut g, x);
        Ok(g.value(y).data().chunks(c).map(<[S]>::to_vec).collect())
    }

    pub fn cast<T: Scalar>(&self) -> Lin<T> {
        Lin {
            spec: self.spec.clone(),
            store: self.store.cast(),
            net: self.net.clone(),
        }
    }
}

impl<S: Scalar> LatentIntegrator<S> for Lin<S> {
    fn c(&self) -> usize {
        self.spec.c
    }

    fn s(&self) -> usize {
        self.spec.s
    }

    fn predict_delta(&self, buffer: &HistoryBuffer<S>) -> Result<Vec<S>> {
        Ok(self.predict_batch(&[buffer])?.pop().expect("one delta"))
    }
}

/// One rollout step: `next = newest + Δ`, config slots overwritten with
/// `(v_norm, t_norm_next)`, then appended to `buffer`.
pub fn advance<S: Scalar, I: LatentIntegrator<S> + ?Sized>(
    lin: &I,
    buffer: &mut HistoryBuffer<S>,
    v_norm: f64,
    t_norm_next: f64,
) -> Result<LatentState<S>> {
    if buffer.c() != lin.c() || buffer.s() != lin.s() {
        return Err(LfsError::Shape(format!(
            "buffer is {}×{} but the LIN expects {}×{}",
            buffer.s(),
            buffer.c(),
            lin.s(),
            lin.c()
        )));
    }
    let delta = lin.predict_delta(buffer)?;
    let mut next: Vec<S> = buffer.newest().iter().zip(&delta).map(|(&l, &d)| l + d).collect();
    inject_config(&mut next, v_norm, t_norm_next);
    buffer.push(&next);
    LatentState::new(next)
}
