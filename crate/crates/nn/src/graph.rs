//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation eagerly: each call computes its
//! output immediately and appends a node. [`Graph::backward`] then walks the
//! tape in reverse and returns gradients for every parameter leaf.
//!
//! Shape errors inside the graph are programming errors and panic; model
//! entry points validate user input before building a graph.

use std::collections::BTreeMap;

use crate::conv::{col2im, im2col, ConvGeom};
use crate::params::{ParamId, ParamKey, ParamStore};
use crate::tensor::permute_data;
use crate::{Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    Param(ParamKey),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddTrailing(Var, Var),
    Scale(Var, S),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    LeakyRelu(Var, S),
    Tanh(Var),
    Sigmoid(Var),
    Gelu(Var),
    Sqrt(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: S,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    SliceLast {
        x: Var,
        start: usize,
    },
    Stack(Vec<Var>),
    Select {
        x: Var,
        index: usize,
    },
    BroadcastBatch(Var),
    OverwriteTail {
        x: Var,
        width: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    SumSquaresRows(Var),
    Mean(Var),
}

#[derive(Clone, Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to parameter leaves.
#[derive(Clone, Debug, Default)]
pub struct Gradients<S> {
    by_key: BTreeMap<ParamKey, Tensor<S>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, key: ParamKey) -> Option<&Tensor<S>> {
        self.by_key.get(&key)
    }

    pub fn for_param(&self, store: &ParamStore<S>, id: ParamId) -> Option<&Tensor<S>> {
        self.get(store.key(id))
    }

    pub fn len(&self) -> usize {
        self.by_key.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_key.is_empty()
    }

    /// Global L2 norm over every gradient entry.
    pub fn norm(&self) -> f64 {
        self.by_key
            .values()
            .map(|t| {
                let n = t.norm();
                n * n
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Operation tape.
#[derive(Debug, Default)]
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    params: BTreeMap<ParamKey, Var>,
}

fn leading(shape: &[usize]) -> usize {
    shape[..shape.len() - 1].iter().product()
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn val(&self, v: Var) -> &[S] {
        self.nodes[v.0].value.data()
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf. Repeated calls for the same parameter return the same
    /// node, so gradients from every use accumulate.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        let key = store.key(id);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(key), true);
        self.params.insert(key, v);
        v
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "{name}: shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.shape(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, "add", |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, "sub", |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, "mul", |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let t = self.binary(a, b, "div", |x, y| x / y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Div(a, b), ng)
    }

    /// `x + y` where `y`'s shape equals the trailing axes of `x`.
    pub fn add_trailing(&mut self, x: Var, y: Var) -> Var {
        let (tx, ty) = (self.value(x), self.value(y));
        let xs = tx.shape();
        let ys = ty.shape();
        assert!(
            ys.len() <= xs.len() && xs[xs.len() - ys.len()..] == *ys,
            "add_trailing: {ys:?} is not a suffix of {xs:?}"
        );
        let block = ty.len();
        let mut data = tx.data().to_vec();
        for chunk in data.chunks_mut(block) {
            for (a, &b) in chunk.iter_mut().zip(ty.data()) {
                *a += b;
            }
        }
        let t = Tensor::from_vec(xs, data).expect("shape preserved");
        let ng = self.ng(x) || self.ng(y);
        self.push(t, Op::AddTrailing(x, y), ng)
    }

    pub fn scale(&mut self, x: Var, s: S) -> Var {
        let t = self.value(x).map(|v| v * s);
        let ng = self.ng(x);
        self.push(t, Op::Scale(x, s), ng)
    }

    /// `y = x·wᵀ + b` over the last axis; `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let tx = self.value(x);
        let tw = self.value(w);
        assert_eq!(tw.shape().len(), 2, "linear: weight must be 2-D");
        let (out, inp) = (tw.shape()[0], tw.shape()[1]);
        assert_eq!(tx.last_dim(), inp, "linear: input width mismatch");
        let rows = leading(tx.shape());
        let mut data = vec![S::zero(); rows * out];
        S::gemm(rows, inp, out, tx.data(), false, tw.data(), true, &mut data, false);
        if let Some(b) = b {
            let tb = self.value(b);
            assert_eq!(tb.len(), out, "linear: bias width mismatch");
            for row in data.chunks_mut(out) {
                for (a, &bb) in row.iter_mut().zip(tb.data()) {
                    *a += bb;
                }
            }
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = out;
        let t = Tensor::from_vec(&shape, data).expect("linear shape");
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(t, Op::Linear { x, w, b }, ng)
    }

    /// Batched matrix product over 3-D tensors `[batch, ·, ·]`.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 3 && sb.len() == 3, "bmm: operands must be 3-D");
        assert_eq!(sa[0], sb[0], "bmm: batch mismatch");
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        assert_eq!(k, k2, "bmm: inner dimension mismatch");
        let batch = sa[0];
        let mut data = vec![S::zero(); batch * m * n];
        let (da, db) = (self.val(a), self.val(b));
        for i in 0..batch {
            S::gemm(
                m,
                k,
                n,
                &da[i * m * k..(i + 1) * m * k],
                ta,
                &db[i * k * n..(i + 1) * k * n],
                tb,
                &mut data[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let t = Tensor::from_vec(&[batch, m, n], data).unwrap();
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::BatchMatMul { a, b, ta, tb }, ng)
    }

    fn unary(&mut self, x: Var, f: impl Fn(S) -> S, op: Op<S>) -> Var {
        let t = self.value(x).map(f);
        let ng = self.ng(x);
        self.push(t, op, ng)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: S) -> Var {
        self.unary(
            x,
            |v| if v > S::zero() { v } else { v * slope },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, |v| gelu_parts(v).0, Op::Gelu(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.sqrt(), Op::Sqrt(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let d = tx.last_dim();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(d) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut sum = S::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let t = Tensor::from_vec(tx.shape(), data).unwrap();
        let ng = self.ng(x);
        self.push(t, Op::Softmax(x), ng)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Var {
        let tx = self.value(x);
        let d = tx.last_dim();
        let (g, b) = (self.val(gamma), self.val(beta));
        assert!(g.len() == d && b.len() == d, "layer_norm: affine width mismatch");
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(d) {
            let (mean, inv) = moments(row, eps);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * g[j] + b[j];
            }
        }
        let t = Tensor::from_vec(tx.shape(), data).unwrap();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(t, Op::LayerNorm { x, gamma, beta, eps }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self
            .value(x)
            .clone()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("reshape: {e}"));
        let ng = self.ng(x);
        self.push(t, Op::Reshape(x), ng)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let tx = self.value(x);
        let (data, shape) = permute_data(tx.data(), tx.shape(), perm);
        let t = Tensor::from_vec(&shape, data).unwrap();
        let ng = self.ng(x);
        self.push(t, Op::Permute(x, perm.to_vec()), ng)
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Var {
        let tx = self.value(x);
        let d = tx.last_dim();
        assert!(start + len <= d, "slice_last: out of range");
        let mut data = Vec::with_capacity(tx.len() / d * len);
        for row in tx.data().chunks(d) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let t = Tensor::from_vec(&shape, data).unwrap();
        let ng = self.ng(x);
        self.push(t, Op::SliceLast { x, start }, ng)
    }

    /// Stacks `n` tensors of shape `[b, rest..]` into `[b, n, rest..]`.
    pub fn stack(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "stack: empty input");
        let first = self.shape(xs[0]).to_vec();
        for &v in xs {
            assert_eq!(self.shape(v), &first[..], "stack: shape mismatch");
        }
        let b = first[0];
        let block: usize = first[1..].iter().product();
        let n = xs.len();
        let mut data = vec![S::zero(); b * n * block];
        for (j, &v) in xs.iter().enumerate() {
            let src = self.val(v);
            for i in 0..b {
                data[(i * n + j) * block..][..block].copy_from_slice(&src[i * block..][..block]);
            }
        }
        let mut shape = vec![b, n];
        shape.extend_from_slice(&first[1..]);
        let t = Tensor::from_vec(&shape, data).unwrap();
        let ng = xs.iter().any(|&v| self.ng(v));
        self.push(t, Op::Stack(xs.to_vec()), ng)
    }

    /// Index `index` of axis 1: `[b, n, rest..]` → `[b, rest..]`.
    pub fn select(&mut self, x: Var, index: usize) -> Var {
        let tx = self.value(x);
        let s = tx.shape();
        assert!(s.len() >= 2 && index < s[1], "select: out of range");
        let (b, n) = (s[0], s[1]);
        let block: usize = s[2..].iter().product();
        let mut data = Vec::with_capacity(b * block);
        for i in 0..b {
            data.extend_from_slice(&tx.data()[(i * n + index) * block..][..block]);
        }
        let mut shape = vec![b];
        shape.extend_from_slice(&s[2..]);
        let t = Tensor::from_vec(&shape, data).unwrap();
        let ng = self.ng(x);
        self.push(t, Op::Select { x, index }, ng)
    }

    /// Repeats `x` along a new leading axis of size `batch`.
    pub fn broadcast_batch(&mut self, x: Var, batch: usize) -> Var {
        let tx = self.value(x);
        let mut data = Vec::with_capacity(batch * tx.len());
        for _ in 0..batch {
            data.extend_from_slice(tx.data());
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(tx.shape());
        let t = Tensor::from_vec(&shape, data).unwrap();
        let ng = self.ng(x);
        self.push(t, Op::BroadcastBatch(x), ng)
    }

    /// Replaces the last `tail.last_dim()` columns of every row of `x` with
    /// the matching row of the constant `tail`. No gradient flows into the
    /// overwritten columns.
    pub fn overwrite_tail(&mut self, x: Var, tail: &Tensor<S>) -> Var {
        let tx = self.value(x);
        let d = tx.last_dim();
        let width = tail.last_dim();
        assert!(width <= d, "overwrite_tail: tail wider than row");
        assert_eq!(
            leading(tx.shape()),
            leading(tail.shape()),
            "overwrite_tail: row count mismatch"
        );
        let mut data = tx.data().to_vec();
        for (row, trow) in data.chunks_mut(d).zip(tail.data().chunks(width)) {
            row[d - width..].copy_from_slice(trow);
        }
        let t = Tensor::from_vec(tx.shape(), data).unwrap();
        let ng = self.ng(x);
        self.push(t, Op::OverwriteTail { x, width }, ng)
    }

    /// 2-D convolution; `x: [n, c, h, w]`, `w: [o, c, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        self.conv2d_general(x, w, b, (stride, stride), (pad, pad))
    }

    pub fn conv2d_general(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert!(xs.len() == 4 && ws.len() == 4, "conv2d: expected 4-D input and weight");
        assert_eq!(xs[1], ws[1], "conv2d: channel mismatch");
        let n = xs[0];
        let o = ws[0];
        let geom = ConvGeom::new(xs[1], (xs[2], xs[3]), (ws[2], ws[3]), stride, pad);
        let cols = im2col(self.val(x), n, &geom);
        let np = n * geom.out_pixels();
        let mut y = vec![S::zero(); o * np];
        S::gemm(o, geom.patch_len(), np, self.val(w), false, &cols, false, &mut y, false);
        let p = geom.out_pixels();
        let mut data = vec![S::zero(); n * o * p];
        for oc in 0..o {
            let bias = b.map_or(S::zero(), |b| self.val(b)[oc]);
            for bi in 0..n {
                let src = &y[oc * np + bi * p..][..p];
                let dst = &mut data[(bi * o + oc) * p..][..p];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bias;
                }
            }
        }
        let t = Tensor::from_vec(&[n, o, geom.oh, geom.ow], data).unwrap();
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(t, Op::Conv2d { x, w, b, geom }, ng)
    }

    /// Transposed 2-D convolution; `x: [n, cin, h, w]`, `w: [cin, cout, kh, kw]`.
    /// Output side is `(h-1)·stride - 2·pad + kh + out_pad`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert!(
            xs.len() == 4 && ws.len() == 4,
            "conv_transpose2d: expected 4-D input and weight"
        );
        assert_eq!(xs[1], ws[0], "conv_transpose2d: channel mismatch");
        assert!(out_pad < stride, "conv_transpose2d: out_pad must be below stride");
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[1], ws[2], ws[3]);
        let oh = (h - 1) * stride + kh + out_pad - 2 * pad;
        let ow = (wd - 1) * stride + kw + out_pad - 2 * pad;
        // The geometry of the forward convolution this operator is the adjoint of.
        let geom = ConvGeom::new(cout, (oh, ow), (kh, kw), (stride, stride), (pad, pad));
        assert_eq!((geom.oh, geom.ow), (h, wd), "conv_transpose2d: inconsistent geometry");
        let hw = h * wd;
        let xm = channel_major(self.val(x), n, cin, hw);
        let mut cols = vec![S::zero(); geom.patch_len() * n * hw];
        S::gemm(
            geom.patch_len(),
            cin,
            n * hw,
            self.val(w),
            true,
            &xm,
            false,
            &mut cols,
            false,
        );
        let mut data = col2im(&cols, n, &geom);
        if let Some(b) = b {
            let bv = self.val(b);
            let p = oh * ow;
            for bi in 0..n {
                for oc in 0..cout {
                    for v in &mut data[(bi * cout + oc) * p..][..p] {
                        *v += bv[oc];
                    }
                }
            }
        }
        let t = Tensor::from_vec(&[n, cout, oh, ow], data).unwrap();
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(t, Op::ConvTranspose2d { x, w, b, geom }, ng)
    }

    /// Per-item sum of squares: `[b, rest..]` → `[b]`.
    pub fn sum_squares_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let b = tx.shape()[0];
        let block = tx.len() / b.max(1);
        let data = tx
            .data()
            .chunks(block.max(1))
            .map(|r| r.iter().map(|&v| v * v).sum())
            .collect();
        let t = Tensor::from_vec(&[b], data).unwrap();
        let ng = self.ng(x);
        self.push(t, Op::SumSquaresRows(x), ng)
    }

    /// Mean of all entries, as a one-element tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let m = tx.sum() / S::from_usize(tx.len()).unwrap();
        let ng = self.ng(x);
        self.push(Tensor::scalar(m), Op::Mean(x), ng)
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<S> {
        assert_eq!(self.value(loss).len(), 1, "backward: loss must be a single value");
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), S::one()));
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, gy, &mut grads, &mut out);
        }
        out
    }

    fn acc(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
        if !self.ng(v) {
            return;
        }
        debug_assert_eq!(g.shape(), self.shape(v), "gradient shape mismatch");
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn acc_data(&self, grads: &mut [Option<Tensor<S>>], v: Var, data: Vec<S>) {
        if !self.ng(v) {
            return;
        }
        let t = Tensor::from_vec(self.shape(v), data).unwrap();
        self.acc(grads, v, t);
    }

    fn backprop_node(&self, node: &Node<S>, gy: Tensor<S>, grads: &mut [Option<Tensor<S>>], out: &mut Gradients<S>) {
        let y = node.value.data();
        let g = gy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(key) => {
                out.by_key.insert(*key, gy);
            }
            Op::Add(a, b) => {
                if self.ng(*b) {
                    self.acc(grads, *b, gy.clone());
                }
                self.acc(grads, *a, gy);
            }
            Op::Sub(a, b) => {
                if self.ng(*b) {
                    self.acc(grads, *b, gy.map(|v| -v));
                }
                self.acc(grads, *a, gy);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                if self.ng(*a) {
                    self.acc_data(grads, *a, g.iter().zip(bv).map(|(&g, &b)| g * b).collect());
                }
                if self.ng(*b) {
                    self.acc_data(grads, *b, g.iter().zip(av).map(|(&g, &a)| g * a).collect());
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                if self.ng(*a) {
                    self.acc_data(grads, *a, g.iter().zip(bv).map(|(&g, &b)| g / b).collect());
                }
                if self.ng(*b) {
                    let d = g
                        .iter()
                        .zip(av)
                        .zip(bv)
                        .map(|((&g, &a), &b)| -g * a / (b * b))
                        .collect();
                    self.acc_data(grads, *b, d);
                }
            }
            Op::AddTrailing(x, yv) => {
                if self.ng(*yv) {
                    let block = self.value(*yv).len();
                    let mut d = vec![S::zero(); block];
                    for chunk in g.chunks(block) {
                        for (a, &b) in d.iter_mut().zip(chunk) {
                            *a += b;
                        }
                    }
                    self.acc_data(grads, *yv, d);
                }
                self.acc(grads, *x, gy);
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.acc(grads, *x, gy.map(|v| v * s));
            }
            Op::Linear { x, w, b } => {
                let tw = self.value(*w);
                let (outd, ind) = (tw.shape()[0], tw.shape()[1]);
                let rows = g.len() / outd;
                if self.ng(*x) {
                    let mut d = vec![S::zero(); rows * ind];
                    S::gemm(rows, outd, ind, g, false, tw.data(), false, &mut d, false);
                    self.acc_data(grads, *x, d);
                }
                if self.ng(*w) {
                    let mut d = vec![S::zero(); outd * ind];
                    S::gemm(outd, rows, ind, g, true, self.val(*x), false, &mut d, false);
                    self.acc_data(grads, *w, d);
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let mut d = vec![S::zero(); outd];
                        for row in g.chunks(outd) {
                            for (a, &v) in d.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                        self.acc_data(grads, *b, d);
                    }
                }
            }
            Op::BatchMatMul { a, b, ta, tb } => {
                let (ta, tb) = (*ta, *tb);
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
                let n = if tb { sb[1] } else { sb[2] };
                let batch = sa[0];
                let (av, bv) = (self.val(*a), self.val(*b));
                if self.ng(*a) {
                    let mut d = vec![S::zero(); batch * m * k];
                    for i in 0..batch {
                        let gi = &g[i * m * n..][..m * n];
                        let bi = &bv[i * k * n..][..k * n];
                        let di = &mut d[i * m * k..][..m * k];
                        if ta {
                            S::gemm(k, n, m, bi, tb, gi, true, di, false);
                        } else {
                            S::gemm(m, n, k, gi, false, bi, !tb, di, false);
                        }
                    }
                    self.acc_data(grads, *a, d);
                }
                if self.ng(*b) {
                    let mut d = vec![S::zero(); batch * k * n];
                    for i in 0..batch {
                        let gi = &g[i * m * n..][..m * n];
                        let ai = &av[i * m * k..][..m * k];
                        let di = &mut d[i * k * n..][..k * n];
                        if tb {
                            S::gemm(n, m, k, gi, true, ai, ta, di, false);
                        } else {
                            S::gemm(k, m, n, ai, !ta, gi, false, di, false);
                        }
                    }
                    self.acc_data(grads, *b, d);
                }
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.val(*x);
                let d = g
                    .iter()
                    .zip(xv)
                    .map(|(&g, &x)| if x > S::zero() { g } else { g * *slope })
                    .collect();
                self.acc_data(grads, *x, d);
            }
            Op::Tanh(x) => {
                let d = g.iter().zip(y).map(|(&g, &y)| g * (S::one() - y * y)).collect();
                self.acc_data(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = g.iter().zip(y).map(|(&g, &y)| g * y * (S::one() - y)).collect();
                self.acc_data(grads, *x, d);
            }
            Op::Gelu(x) => {
                let xv = self.val(*x);
                let d = g.iter().zip(xv).map(|(&g, &x)| g * gelu_parts(x).1).collect();
                self.acc_data(grads, *x, d);
            }
            Op::Sqrt(x) => {
                let half = S::lit(0.5);
                let d = g
                    .iter()
                    .zip(y)
                    .map(|(&g, &y)| if y > S::zero() { g * half / y } else { S::zero() })
                    .collect();
                self.acc_data(grads, *x, d);
            }
            Op::Softmax(x) => {
                let dlast = node.value.last_dim();
                let mut d = vec![S::zero(); y.len()];
                for ((drow, yrow), grow) in d.chunks_mut(dlast).zip(y.chunks(dlast)).zip(g.chunks(dlast)) {
                    let dot: S = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                    for ((dv, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *dv = yv * (gv - dot);
                    }
                }
                self.acc_data(grads, *x, d);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = self.val(*x);
                let gv = self.val(*gamma);
                let dlast = node.value.last_dim();
                let dn = S::from_usize(dlast).unwrap();
                let mut dx = vec![S::zero(); xv.len()];
                let mut dg = vec![S::zero(); dlast];
                let mut db = vec![S::zero(); dlast];
                for ((xrow, grow), dxrow) in xv.chunks(dlast).zip(g.chunks(dlast)).zip(dx.chunks_mut(dlast)) {
                    let (mean, inv) = moments(xrow, *eps);
                    let mut sum_gh = S::zero();
                    let mut sum_ghx = S::zero();
                    for j in 0..dlast {
                        let xhat = (xrow[j] - mean) * inv;
                        dg[j] += grow[j] * xhat;
                        db[j] += grow[j];
                        let gh = grow[j] * gv[j];
                        sum_gh += gh;
                        sum_ghx += gh * xhat;
                    }
                    for j in 0..dlast {
                        let xhat = (xrow[j] - mean) * inv;
                        let gh = grow[j] * gv[j];
                        dxrow[j] = inv * (gh - sum_gh / dn - xhat * sum_ghx / dn);
                    }
                }
                self.acc_data(grads, *x, dx);
                self.acc_data(grads, *gamma, dg);
                self.acc_data(grads, *beta, db);
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.acc(grads, *x, gy.reshape(&shape).unwrap());
            }
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (d, _) = permute_data(g, gy.shape(), &inv);
                self.acc_data(grads, *x, d);
            }
            Op::SliceLast { x, start } => {
                let dfull = self.value(*x).last_dim();
                let len = gy.last_dim();
                let mut d = vec![S::zero(); self.value(*x).len()];
                for (drow, grow) in d.chunks_mut(dfull).zip(g.chunks(len)) {
                    drow[*start..start + len].copy_from_slice(grow);
                }
                self.acc_data(grads, *x, d);
            }
            Op::Stack(xs) => {
                let s = gy.shape();
                let (b, n) = (s[0], s[1]);
                let block: usize = s[2..].iter().product();
                for (j, &v) in xs.iter().enumerate() {
                    if !self.ng(v) {
                        continue;
                    }
                    let mut d = Vec::with_capacity(b * block);
                    for i in 0..b {
                        d.extend_from_slice(&g[(i * n + j) * block..][..block]);
                    }
                    self.acc_data(grads, v, d);
                }
            }
            Op::Select { x, index } => {
                let s = self.shape(*x);
                let (b, n) = (s[0], s[1]);
                let block: usize = s[2..].iter().product();
                let mut d = vec![S::zero(); b * n * block];
                for i in 0..b {
                    d[(i * n + index) * block..][..block].copy_from_slice(&g[i * block..][..block]);
                }
                self.acc_data(grads, *x, d);
            }
            Op::BroadcastBatch(x) => {
                let block = self.value(*x).len();
                let mut d = vec![S::zero(); block];
                for chunk in g.chunks(block) {
                    for (a, &v) in d.iter_mut().zip(chunk) {
                        *a += v;
                    }
                }
                self.acc_data(grads, *x, d);
            }
            Op::OverwriteTail { x, width } => {
                let dlast = gy.last_dim();
                let mut d = g.to_vec();
                for row in d.chunks_mut(dlast) {
                    for v in &mut row[dlast - width..] {
                        *v = S::zero();
                    }
                }
                self.acc_data(grads, *x, d);
            }
            Op::Conv2d { x, w, b, geom } => {
                let n = self.shape(*x)[0];
                let o = self.shape(*w)[0];
                let p = geom.out_pixels();
                let np = n * p;
                // [n, o, p] -> [o, n·p]
                let mut dy = vec![S::zero(); o * np];
                for bi in 0..n {
                    for oc in 0..o {
                        dy[oc * np + bi * p..][..p].copy_from_slice(&g[(bi * o + oc) * p..][..p]);
                    }
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let d = dy.chunks(np).map(|r| r.iter().copied().sum()).collect();
                        self.acc_data(grads, *b, d);
                    }
                }
                let kk = geom.patch_len();
                if self.ng(*w) {
                    let cols = im2col(self.val(*x), n, geom);
                    let mut d = vec![S::zero(); o * kk];
                    S::gemm(o, np, kk, &dy, false, &cols, true, &mut d, false);
                    self.acc_data(grads, *w, d);
                }
                if self.ng(*x) {
                    let mut dcols = vec![S::zero(); kk * np];
                    S::gemm(kk, o, np, self.val(*w), true, &dy, false, &mut dcols, false);
                    self.acc_data(grads, *x, col2im(&dcols, n, geom));
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let xs = self.shape(*x);
                let (n, cin) = (xs[0], xs[1]);
                let hw = xs[2] * xs[3];
                let cout = geom.c;
                let kk = geom.patch_len();
                if let Some(b) = b {
                    if self.ng(*b) {
                        let p = geom.in_pixels();
                        let mut d = vec![S::zero(); cout];
                        for bi in 0..n {
                            for (oc, dv) in d.iter_mut().enumerate() {
                                *dv += g[(bi * cout + oc) * p..][..p].iter().copied().sum();
                            }
                        }
                        self.acc_data(grads, *b, d);
                    }
                }
                let dcols = im2col(g, n, geom);
                if self.ng(*w) {
                    let xm = channel_major(self.val(*x), n, cin, hw);
                    let mut d = vec![S::zero(); cin * kk];
                    S::gemm(cin, n * hw, kk, &xm, false, &dcols, true, &mut d, false);
                    self.acc_data(grads, *w, d);
                }
                if self.ng(*x) {
                    let mut dxm = vec![S::zero(); cin * n * hw];
                    S::gemm(cin, kk, n * hw, self.val(*w), false, &dcols, false, &mut dxm, false);
                    self.acc_data(grads, *x, batch_major(&dxm, n, cin, hw));
                }
            }
            Op::SumSquaresRows(x) => {
                let xv = self.val(*x);
                let block = xv.len() / g.len().max(1);
                let two = S::lit(2.0);
                let d = xv
                    .chunks(block.max(1))
                    .zip(g)
                    .flat_map(|(row, &gv)| row.iter().map(move |&v| two * v * gv))
                    .collect();
                self.acc_data(grads, *x, d);
            }
            Op::Mean(x) => {
                let len = self.value(*x).len();
                let v = g[0] / S::from_usize(len).unwrap();
                self.acc_data(grads, *x, vec![v; len]);
            }
        }
    }
}

#[inline]
fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

/// GELU value and derivative (tanh approximation).
#[inline]
fn gelu_parts<S: Scalar>(x: S) -> (S, S) {
    let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = S::lit(0.044715);
    let half = S::lit(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (S::one() + S::lit(3.0) * a * x * x);
    let val = half * x * (S::one() + t);
    let der = half * (S::one() + t) + half * x * (S::one() - t * t) * du;
    (val, der)
}

fn moments<S: Scalar>(row: &[S], eps: S) -> (S, S) {
    let n = S::from_usize(row.len()).unwrap();
    let mean = row.iter().copied().sum::<S>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
    (mean, S::one() / (var + eps).sqrt())
}

/// `[n, c, p]` → `[c, n·p]`.
fn channel_major<S: Scalar>(x: &[S], n: usize, c: usize, p: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[ch * n * p + b * p..][..p].copy_from_slice(&x[(b * c + ch) * p..][..p]);
        }
    }
    out
}

/// `[c, n·p]` → `[n, c, p]`.
fn batch_major<S: Scalar>(x: &[S], n: usize, c: usize, p: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[(b * c + ch) * p..][..p].copy_from_slice(&x[ch * n * p + b * p..][..p]);
        }
    }
    out
}
