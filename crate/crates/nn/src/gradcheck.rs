//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass, so it is
//! independent of the backward formulas it checks.

use rand::Rng;

use crate::{Graph, ParamId, ParamStore, Scalar, Var};

#[derive(Clone, Debug)]
pub struct GradSample {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub samples: Vec<GradSample>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.samples.iter().map(|s| s.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradSample> {
        self.samples.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// Relative discrepancy `|a - n| / max(|a|, |n|, floor)`; `floor` keeps
/// structurally-zero gradients (e.g. attention key biases) comparable.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Denominator floor used by [`check_gradients`].
pub const GRAD_FLOOR: f64 = 1e-6;

fn eval<S: Scalar>(
    stores: &[&mut ParamStore<S>],
    loss: &mut impl FnMut(&mut Graph<S>, &[&ParamStore<S>]) -> Var,
) -> (Graph<S>, Var) {
    let view: Vec<&ParamStore<S>> = stores.iter().map(|s| &**s).collect();
    let mut g = Graph::new();
    let l = loss(&mut g, &view);
    (g, l)
}

/// Compares analytic gradients with central differences on `samples`
/// randomly chosen entries (tensor uniformly, then entry uniformly).
pub fn check_gradients<S: Scalar, R: Rng + ?Sized>(
    stores: &mut [&mut ParamStore<S>],
    mut loss: impl FnMut(&mut Graph<S>, &[&ParamStore<S>]) -> Var,
    samples: usize,
    step: f64,
    rng: &mut R,
) -> GradCheckReport {
    let (g, l) = eval(stores, &mut loss);
    let grads = g.backward(l);
    drop(g);

    let tensors: Vec<(usize, ParamId)> = stores
        .iter()
        .enumerate()
        .flat_map(|(si, s)| s.ids().map(move |id| (si, id)))
        .collect();
    assert!(!tensors.is_empty(), "no parameters to check");

    let mut report = GradCheckReport::default();
    for _ in 0..samples {
        let (si, id) = tensors[rng.gen_range(0..tensors.len())];
        let len = stores[si].get(id).len();
        let index = rng.gen_range(0..len);
        let analytic = grads
            .for_param(stores[si], id)
            .map_or(0.0, |t| t.data()[index].as_f64());
        let orig = stores[si].get(id).data()[index];

        stores[si].get_mut(id).data_mut()[index] = orig + S::lit(step);
        let plus = {
            let (g, l) = eval(stores, &mut loss);
            g.value(l).data()[0].as_f64()
        };
        stores[si].get_mut(id).data_mut()[index] = orig - S::lit(step);
        let minus = {
            let (g, l) = eval(stores, &mut loss);
            g.value(l).data()[0].as_f64()
        };
        stores[si].get_mut(id).data_mut()[index] = orig;

        let numeric = (plus - minus) / (2.0 * step);
        report.samples.push(GradSample {
            param: stores[si].name(id).to_string(),
            index,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric, GRAD_FLOOR),
        });
    }
    report
}
