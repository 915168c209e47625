//! Adaptive-moment (Adam) optimizer.

use crate::{Gradients, ParamStore, Scalar, Tensor};

#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(store: &ParamStore<S>, lr: f64) -> Self {
        let zeros = || store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter of `store` that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &Gradients<S>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (S::lit(self.beta1), S::lit(self.beta2));
        let step_size = S::lit(self.lr / bc1);
        let inv_bc2 = S::lit(1.0 / bc2);
        let eps = S::lit(self.eps);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.for_param(store, id) else { continue };
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (S::one() - b1) * gi;
                v[i] = b2 * v[i] + (S::one() - b2) * gi * gi;
                let vhat = v[i] * inv_bc2;
                p[i] -= step_size * m[i] / (vhat.sqrt() + eps);
            }
        }
    }
}
