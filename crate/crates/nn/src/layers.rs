//! Parameterized building blocks. Each layer only holds [`ParamId`]s; the
//! weights live in the owning model's [`ParamStore`].

use rand::Rng;

use crate::params::fan_in_uniform;
use crate::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            fan_in_uniform(rng, &[out_dim, in_dim], in_dim),
        );
        let b = bias.then(|| store.add(format!("{name}.bias"), fan_in_uniform(rng, &[out_dim], in_dim)));
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

/// Square-kernel 2-D convolution.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        let w = store.add(
            format!("{name}.weight"),
            fan_in_uniform(rng, &[cout, cin, kernel, kernel], fan_in),
        );
        let b = store.add(format!("{name}.bias"), fan_in_uniform(rng, &[cout], fan_in));
        Self { w, b, stride, pad }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Square-kernel transposed 2-D convolution.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = cout * kernel * kernel;
        let w = store.add(
            format!("{name}.weight"),
            fan_in_uniform(rng, &[cin, cout, kernel, kernel], fan_in),
        );
        let b = store.add(format!("{name}.bias"), fan_in_uniform(rng, &[cout], fan_in));
        Self {
            w,
            b,
            stride,
            pad,
            out_pad,
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv_transpose2d(x, w, Some(b), self.stride, self.pad, self.out_pad)
    }
}

/// 1-D convolution over the last axis of `[n, c, len]`, kernel `k`,
/// stride 1, symmetric padding.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub pad: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * kernel;
        let w = store.add(
            format!("{name}.weight"),
            fan_in_uniform(rng, &[cout, cin, 1, kernel], fan_in),
        );
        let b = store.add(format!("{name}.bias"), fan_in_uniform(rng, &[cout], fan_in));
        Self { w, b, pad }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        assert_eq!(s.len(), 3, "conv1d expects [n, c, len]");
        let x4 = g.reshape(x, &[s[0], s[1], 1, s[2]]);
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.conv2d_general(x4, w, Some(b), (1, 1), (0, self.pad));
        let ys = g.shape(y).to_vec();
        g.reshape(y, &[ys[0], ys[1], ys[3]])
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.weight"), Tensor::full(&[dim], S::one()));
        let beta = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]));
        Self { gamma, beta }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, S::lit(1e-5))
    }
}

/// Multi-head scaled dot-product attention over `[batch, len, dim]` inputs.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(
            heads > 0 && dim.is_multiple_of(heads),
            "dim {dim} not divisible by {heads} heads"
        );
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, true, rng),
            heads,
            dim,
        }
    }

    fn split_heads<S: Scalar>(&self, g: &mut Graph<S>, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let (b, len) = (s[0], s[1]);
        let dh = self.dim / self.heads;
        let x = g.reshape(x, &[b, len, self.heads, dh]);
        let x = g.permute(x, &[0, 2, 1, 3]);
        g.reshape(x, &[b * self.heads, len, dh])
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, query: Var, memory: Var) -> Var {
        let qs = g.shape(query).to_vec();
        let (b, lq) = (qs[0], qs[1]);
        let dh = self.dim / self.heads;
        let q = self.q.forward(g, store, query);
        let k = self.k.forward(g, store, memory);
        let v = self.v.forward(g, store, memory);
        let q = self.split_heads(g, q);
        let k = self.split_heads(g, k);
        let v = self.split_heads(g, v);
        let scores = g.bmm(q, k, false, true);
        let scores = g.scale(scores, S::lit(1.0 / (dh as f64).sqrt()));
        let att = g.softmax(scores);
        let ctx = g.bmm(att, v, false, false);
        let ctx = g.reshape(ctx, &[b, self.heads, lq, dh]);
        let ctx = g.permute(ctx, &[0, 2, 1, 3]);
        let ctx = g.reshape(ctx, &[b, lq, self.dim]);
        self.out.forward(g, store, ctx)
    }
}

#[derive(Clone, Debug)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

impl FeedForward {
    fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, true, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, true, rng),
        }
    }

    fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Var {
        let h = self.up.forward(g, store, x);
        let h = g.gelu(h);
        self.down.forward(g, store, h)
    }
}

/// Post-norm transformer encoder layer (self-attention + feed-forward).
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ff: FeedForward,
    norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        ff_hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, ff_hidden, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Var {
        let a = self.attn.forward(g, store, x, x);
        let x = g.add(x, a);
        let x = self.norm1.forward(g, store, x);
        let f = self.ff.forward(g, store, x);
        let x = g.add(x, f);
        self.norm2.forward(g, store, x)
    }
}

/// Post-norm transformer decoder layer (self-attention, cross-attention to
/// an encoder memory, feed-forward).
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    self_attn: MultiHeadAttention,
    norm1: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm2: LayerNorm,
    ff: FeedForward,
    norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        ff_hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), dim, heads, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), dim, heads, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            ff: FeedForward::new(store, &format!("{name}.ff"), dim, ff_hidden, rng),
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), dim),
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var, memory: Var) -> Var {
        let a = self.self_attn.forward(g, store, x, x);
        let x = g.add(x, a);
        let x = self.norm1.forward(g, store, x);
        let c = self.cross_attn.forward(g, store, x, memory);
        let x = g.add(x, c);
        let x = self.norm2.forward(g, store, x);
        let f = self.ff.forward(g, store, x);
        let x = g.add(x, f);
        self.norm3.forward(g, store, x)
    }
}

/// Single LSTM layer (gate order i, f, g, o).
#[derive(Clone, Debug)]
pub struct LstmLayer {
    input: Linear,
    recurrent: Linear,
    pub hidden: usize,
}

impl LstmLayer {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            input: Linear::new(store, &format!("{name}.ih"), in_dim, 4 * hidden, true, rng),
            recurrent: Linear::new(store, &format!("{name}.hh"), hidden, 4 * hidden, false, rng),
            hidden,
        }
    }

    /// Runs the sequence from zero state; returns the hidden state per step.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, xs: &[Var]) -> Vec<Var> {
        let h_dim = self.hidden;
        let mut state: Option<(Var, Var)> = None;
        let mut outs = Vec::with_capacity(xs.len());
        for &x in xs {
            let mut gates = self.input.forward(g, store, x);
            if let Some((h, _)) = state {
                let r = self.recurrent.forward(g, store, h);
                gates = g.add(gates, r);
            }
            let i = g.slice_last(gates, 0, h_dim);
            let i = g.sigmoid(i);
            let f = g.slice_last(gates, h_dim, h_dim);
            let f = g.sigmoid(f);
            let cand = g.slice_last(gates, 2 * h_dim, h_dim);
            let cand = g.tanh(cand);
            let o = g.slice_last(gates, 3 * h_dim, h_dim);
            let o = g.sigmoid(o);
            let ic = g.mul(i, cand);
            let c = match state {
                Some((_, c_prev)) => {
                    let fc = g.mul(f, c_prev);
                    g.add(fc, ic)
                }
                None => ic,
            };
            let tc = g.tanh(c);
            let h = g.mul(o, tc);
            state = Some((h, c));
            outs.push(h);
        }
        outs
    }
}

/// Fixed sinusoidal positional encoding table `[len, dim]`.
pub fn sinusoidal_positions<S: Scalar>(len: usize, dim: usize) -> Tensor<S> {
    Tensor::from_fn(&[len, dim], |idx| {
        let (pos, i) = (idx / dim, idx % dim);
        let freq = (10000f64).powf(-((i / 2 * 2) as f64) / dim as f64);
        let angle = pos as f64 * freq;
        S::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}
