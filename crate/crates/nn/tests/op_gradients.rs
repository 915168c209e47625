//! Every differentiable op checked against central finite differences in f64.

use lfs_nn::gradcheck::check_gradients;
use lfs_nn::layers::{Conv1d, Conv2d, ConvTranspose2d, DecoderLayer, EncoderLayer, Linear, LstmLayer};
use lfs_nn::{fan_in_uniform, Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_input(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    fan_in_uniform(r, shape, 1)
}

/// Reduces any tensor to a scalar with a fixed random projection, so every
/// output element contributes a distinct weight.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let shape = g.shape(y).to_vec();
    let mut r = rng(seed);
    let w = g.input(rand_input(&mut r, &shape));
    let p = g.mul(y, w);
    let n = shape.iter().product::<usize>();
    let p = g.reshape(p, &[1, n]);
    let p = g.scale(p, 3.0);
    let ss = g.sum_squares_rows(p);
    g.mean(ss)
}

fn assert_ok(name: &str, report: lfs_nn::gradcheck::GradCheckReport) {
    let worst = report.worst().unwrap();
    assert!(report.max_rel_err() < TOL, "{name}: worst {worst:?}");
}

#[test]
fn elementwise_and_reductions() {
    let mut r = rng(1);
    let mut s = ParamStore::<f64>::new(0);
    let a = s.add("a", rand_input(&mut r, &[3, 4]));
    let b = s.add("b", Tensor::from_fn(&[3, 4], |i| 1.5 + 0.1 * i as f64));
    let rep = check_gradients(
        &mut [&mut s],
        |g, st| {
            let a = g.param(st[0], a);
            let b = g.param(st[0], b);
            let x = g.mul(a, b);
            let y = g.div(x, b);
            let y = g.sub(y, a);
            let z = g.add(x, y);
            let t = g.tanh(z);
            let sg = g.sigmoid(a);
            let ge = g.gelu(b);
            let lr = g.leaky_relu(a, 0.2);
            let q = g.div(ge, b);
            let sq = g.sqrt(q);
            let u = g.add(t, sg);
            let u = g.add(u, sq);
            let u = g.add(u, lr);
            let sm = g.softmax(u);
            project(g, sm, 9)
        },
        60,
        STEP,
        &mut r,
    );
    assert_ok("elementwise", rep);
}

#[test]
fn shape_ops() {
    let mut r = rng(2);
    let mut s = ParamStore::<f64>::new(0);
    let a = s.add("a", rand_input(&mut r, &[2, 3, 4]));
    let v = s.add("v", rand_input(&mut r, &[3, 4]));
    let rep = check_gradients(
        &mut [&mut s],
        |g, st| {
            let a = g.param(st[0], a);
            let v = g.param(st[0], v);
            let x = g.add_trailing(a, v);
            let p = g.permute(x, &[2, 0, 1]);
            let p = g.reshape(p, &[4, 6]);
            let sl = g.slice_last(p, 1, 3);
            let sel = g.select(x, 2);
            let vb = g.broadcast_batch(v, 2);
            let st2 = g.stack(&[sel, sel]);
            let tail = Tensor::from_vec(&[2, 2, 1], vec![0.5, 0.25, -1.0, 2.0]).unwrap();
            let ow = g.overwrite_tail(st2, &tail);
            let l1 = project(g, sl, 1);
            let l2 = project(g, ow, 2);
            let l3 = project(g, vb, 3);
            let l = g.add(l1, l2);
            g.add(l, l3)
        },
        60,
        STEP,
        &mut r,
    );
    assert_ok("shape ops", rep);
}

#[test]
fn linear_bmm_layernorm() {
    let mut r = rng(3);
    let mut s = ParamStore::<f64>::new(0);
    let lin = Linear::new(&mut s, "lin", 5, 4, true, &mut r);
    let x = s.add("x", rand_input(&mut r, &[2, 3, 5]));
    let m = s.add("m", rand_input(&mut r, &[2, 4, 3]));
    let ln = lfs_nn::layers::LayerNorm::new(&mut s, "ln", 4);
    // perturb the affine params away from 1/0
    for v in s.get_mut(ln.gamma).data_mut() {
        *v = 0.7;
    }
    let rep = check_gradients(
        &mut [&mut s],
        |g, st| {
            let x = g.param(st[0], x);
            let y = lin.forward(g, st[0], x); // [2,3,4]
            let m = g.param(st[0], m); // [2,4,3]
            let p = g.bmm(y, m, false, false); // [2,3,3]
            let q = g.bmm(m, y, true, true); // [2,3,3]
            let r2 = g.bmm(p, q, true, false);
            let r3 = g.bmm(y, y, false, true);
            let n = ln.forward(g, st[0], y);
            let l1 = project(g, r2, 4);
            let l2 = project(g, n, 5);
            let l3 = project(g, r3, 6);
            let l = g.add(l1, l2);
            g.add(l, l3)
        },
        80,
        STEP,
        &mut r,
    );
    assert_ok("linear/bmm/layernorm", rep);
}

#[test]
fn convolutions() {
    let mut r = rng(4);
    let mut s = ParamStore::<f64>::new(0);
    let c1 = Conv2d::new(&mut s, "c1", 2, 3, 3, 2, 1, &mut r);
    let t1 = ConvTranspose2d::new(&mut s, "t1", 3, 2, 3, 2, 1, 1, &mut r);
    let c3 = Conv1d::new(&mut s, "c3", 2, 3, 3, 1, &mut r);
    let x = s.add("x", rand_input(&mut r, &[2, 2, 6, 6]));
    let x1 = s.add("x1", rand_input(&mut r, &[2, 2, 5]));
    let rep = check_gradients(
        &mut [&mut s],
        |g, st| {
            let x = g.param(st[0], x);
            let h = c1.forward(g, st[0], x);
            assert_eq!(g.shape(h), &[2, 3, 3, 3]);
            let y = t1.forward(g, st[0], h);
            assert_eq!(g.shape(y), &[2, 2, 6, 6]);
            let x1 = g.param(st[0], x1);
            let z = c3.forward(g, st[0], x1);
            assert_eq!(g.shape(z), &[2, 3, 5]);
            let l1 = project(g, y, 7);
            let l2 = project(g, z, 8);
            g.add(l1, l2)
        },
        100,
        STEP,
        &mut r,
    );
    assert_ok("convolutions", rep);
}

#[test]
fn transformer_and_lstm_layers() {
    let mut r = rng(5);
    let mut s = ParamStore::<f64>::new(0);
    let enc = EncoderLayer::new(&mut s, "enc", 8, 2, 12, &mut r);
    let dec = DecoderLayer::new(&mut s, "dec", 8, 2, 12, &mut r);
    let lstm = LstmLayer::new(&mut s, "lstm", 8, 5, &mut r);
    let x = s.add("x", rand_input(&mut r, &[2, 3, 8]));
    let q = s.add("q", rand_input(&mut r, &[1, 8]));
    let rep = check_gradients(
        &mut [&mut s],
        |g, st| {
            let x = g.param(st[0], x);
            let mem = enc.forward(g, st[0], x);
            let q = g.param(st[0], q);
            let q = g.broadcast_batch(q, 2);
            let d = dec.forward(g, st[0], q, mem);
            let steps: Vec<Var> = (0..3).map(|i| g.select(mem, i)).collect();
            let hs = lstm.forward(g, st[0], &steps);
            let l1 = project(g, d, 10);
            let l2 = project(g, hs[2], 11);
            g.add(l1, l2)
        },
        150,
        STEP,
        &mut r,
    );
    assert_ok("transformer/lstm", rep);
}

#[test]
fn repeated_param_use_accumulates() {
    let mut s = ParamStore::<f64>::new(0);
    let a = s.add("a", Tensor::from_vec(&[1, 1], vec![3.0]).unwrap());
    let mut g = Graph::new();
    let x = g.param(&s, a);
    let y = g.param(&s, a);
    assert_eq!(x, y);
    let z = g.mul(x, y); // a²
    let z = g.add(z, x); // a² + a
    let l = g.mean(z);
    let grads = g.backward(l);
    assert_eq!(grads.for_param(&s, a).unwrap().data(), &[7.0]);
}
