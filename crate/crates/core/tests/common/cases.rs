//! Randomized gradient-check case generators, one per differentiable op.
//!
//! Loss is always `sum(output (.) weights)` with a fixed random weighting so
//! every output element contributes. Kinked ops (relu, maxpool) draw inputs
//! that keep every element safely away from the kink at the probe step.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use vsdl_core::{Activation, Graph, LstmCellParams, LstmGates, Scalar, Tensor, Var};

use super::{rand_tensor, Case};

fn weighted_sum<S: Scalar>(g: &mut Graph<S>, out: Var, weights: &Tensor<S>) -> Var {
    let w = g.leaf(weights.clone(), false);
    let prod = g.mul(out, w).expect("weighting");
    g.sum(prod)
}

fn out_weights<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<S> {
    rand_tensor(rng, shape, -0.6, 0.6)
}

pub fn add<S: Scalar>(rng: &mut ChaCha8Rng) -> Case<S> {
    let n = rng.random_range(1..=12);
    let leaves = vec![
        rand_tensor(rng, &[n], -1.0, 1.0),
        rand_tensor(rng, &[n], -1.0, 1.0),
    ];
    let w = out_weights(rng, &[n]);
    Case {
        name: format!("add[{n}]"),
        leaves,
        build: Box::new(move |g, v| {
            let s = g.add(v[0], v[1]).unwrap();
            weighted_sum(g, s, &w)
        }),
    }
}

pub fn mul<S: Scalar>(rng: &mut ChaCha8Rng) -> Case<S> {
    let n = rng.random_range(1..=12);
    let leaves = vec![
        rand_tensor(rng, &[n], -1.0, 1.0),
        rand_tensor(rng, &[n], -1.0, 1.0),
    ];
    let w = out_weights(rng, &[n]);
    Case {
        name: format!("mul[{n}]"),
        leaves,
        build: Box::new(move |g, v| {
            let s = g.mul(v[0], v[1]).unwrap();
            weighted_sum(g, s, &w)
        }),
    }
}

pub fn sum_reshape<S: Scalar>(rng: &mut ChaCha8Rng) -> Case<S> {
    let a = rng.random_range(1..=4);
    let b = rng.random_range(1..=4);
    let leaves = vec![rand_tensor(rng, &[a, b], -1.0, 1.0)];
    Case {
        name: format!("sum∘reshape[{a}x{b}]"),
        leaves,
        build: Box::new(move |g, v| {
            let r = g.reshape(v[0], &[a * b]).unwrap();
            g.sum(r)
        }),
    }
}

pub fn dense<S: Scalar>(rng: &mut ChaCha8Rng) -> Case<S> {
    let m = rng.random_range(1..=6);
    let n = rng.random_range(1..=6);
    let leaves = vec![
        rand_tensor(rng, &[n], -1.0, 1.0),
        rand_tensor(rng, &[m, n], -1.0, 1.0),
        rand_tensor(rng, &[m], -1.0, 1.0),
    ];
    let w = out_weights(rng, &[m]);
    Case {
        name: format!("dense[{m}x{n}]"),
        leaves,
        build: Box::new(move |g, v| {
            let y = g.dense(v[0], v[1], v[2]).unwrap();
            weighted_sum(g, y, &w)
        }),
    }
}

pub fn activation<S: Scalar>(rng: &mut ChaCha8Rng, kind: Activation) -> Case<S> {
    let n = rng.random_range(1..=12);
    let input = match kind {
        // Keep relu inputs away from the kink at the probe step.
        Activation::Relu => Tensor::from_fn(&[n], |_| {
            let sign = if rng.random_range(0.0..1.0) < 0.5 { -1.0 } else { 1.0 };
            S::lit(sign * rng.random_range(0.05..1.0))
        }),
        _ => rand_tensor(rng, &[n], -2.0, 2.0),
    };
    let w = out_weights(rng, &[n]);
    Case {
        name: format!("{kind:?}[{n}]"),
        leaves: vec![input],
        build: Box::new(move |g, v| {
            let y = g.activation(v[0], kind);
            weighted_sum(g, y, &w)
        }),
    }
}

pub fn conv2d<S: Scalar>(rng: &mut ChaCha8Rng) -> Case<S> {
    let c_in = rng.random_range(1..=3);
    let c_out = rng.random_range(1..=3);
    let k = rng.random_range(1..=3);
    let stride = rng.random_range(1..=2);
    let padding = rng.random_range(0..=1);
    // Choose the output extent first so the input extent is always integral.
    let oh = rng.random_range(1..=3);
    let ow = rng.random_range(1..=3);
    let padded_h = (oh - 1) * stride + k;
    let padded_w = (ow - 1) * stride + k;
    if padded_h <= 2 * padding || padded_w <= 2 * padding {
        return conv2d(rng);
    }
    let h = padded_h - 2 * padding;
    let w = padded_w - 2 * padding;
    let leaves = vec![
        rand_tensor(rng, &[c_in, h, w], -1.0, 1.0),
        rand_tensor(rng, &[c_out, c_in, k, k], -1.0, 1.0),
        rand_tensor(rng, &[c_out], -0.5, 0.5),
    ];
    let wt = out_weights(rng, &[c_out, oh, ow]);
    Case {
        name: format!("conv2d[{c_in}x{h}x{w} k{k} s{stride} p{padding}]"),
        leaves,
        build: Box::new(move |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], stride, padding).unwrap();
            weighted_sum(g, y, &wt)
        }),
    }
}

pub fn conv3d<S: Scalar>(rng: &mut ChaCha8Rng) -> Case<S> {
    let c_in = rng.random_range(1..=2);
    let c_out = rng.random_range(1..=2);
    let k = rng.random_range(1..=2);
    let stride = rng.random_range(1..=2);
    let padding = rng.random_range(0..=1);
    let od = rng.random_range(1..=2);
    let oh = rng.random_range(1..=2);
    let ow = rng.random_range(1..=3);
    let d = (od - 1) * stride + k;
    let h = (oh - 1) * stride + k;
    let w = (ow - 1) * stride + k;
    if d <= 2 * padding || h <= 2 * padding || w <= 2 * padding {
        return conv3d(rng);
    }
    let (d, h, w) = (d - 2 * padding, h - 2 * padding, w - 2 * padding);
    if d + 2 * padding < k || h + 2 * padding < k || w + 2 * padding < k {
        return conv3d(rng);
    }
    let leaves = vec![
        rand_tensor(rng, &[c_in, d, h, w], -1.0, 1.0),
        rand_tensor(rng, &[c_out, c_in, k, k, k], -1.0, 1.0),
        rand_tensor(rng, &[c_out], -0.5, 0.5),
    ];
    let wt = out_weights(rng, &[c_out, od, oh, ow]);
    Case {
        name: format!("conv3d[{c_in}x{d}x{h}x{w} k{k} s{stride} p{padding}]"),
        leaves,
        build: Box::new(move |g, v| {
            let y = g.conv3d(v[0], v[1], v[2], stride, padding).unwrap();
            weighted_sum(g, y, &wt)
        }),
    }
}

pub fn maxpool2d<S: Scalar>(rng: &mut ChaCha8Rng) -> Case<S> {
    let c = rng.random_range(1..=2);
    let h = rng.random_range(2..=5);
    let w = rng.random_range(2..=5);
    let window = rng.random_range(1..=2.min(h).min(w));
    let stride = rng.random_range(1..=2);
    // Distinct, well-separated values so the argmax cannot flip under the
    // finite-difference probe.
    let n = c * h * w;
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let values: Vec<f64> = order
        .iter()
        .map(|&r| r as f64 * 0.05 + rng.random_range(0.0..0.01))
        .collect();
    let mut idx = 0;
    let input = Tensor::from_fn(&[c, h, w], |_| {
        let v = S::lit(values[idx]);
        idx += 1;
        v
    });
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let wt = out_weights(rng, &[c, oh, ow]);
    Case {
        name: format!("maxpool2d[{c}x{h}x{w} w{window} s{stride}]"),
        leaves: vec![input],
        build: Box::new(move |g, v| {
            let y = g.maxpool2d(v[0], window, stride).unwrap();
            weighted_sum(g, y, &wt)
        }),
    }
}

fn lstm_leaf_shapes(input_dim: usize, hidden: usize) -> Vec<Vec<usize>> {
    let mut shapes = Vec::new();
    for _ in 0..4 {
        shapes.push(vec![hidden, input_dim]);
        shapes.push(vec![hidden, hidden]);
        shapes.push(vec![hidden]);
    }
    shapes
}

fn bind_lstm_params(vars: &[Var]) -> LstmCellParams {
    let gate = |i: usize| LstmGates {
        w: vars[3 * i],
        u: vars[3 * i + 1],
        b: vars[3 * i + 2],
    };
    LstmCellParams {
        input: gate(0),
        forget: gate(1),
        cell: gate(2),
        output: gate(3),
    }
}

pub fn lstm_cell<S: Scalar>(rng: &mut ChaCha8Rng) -> Case<S> {
    let input_dim = rng.random_range(1..=3);
    let hidden = rng.random_range(1..=3);
    let mut leaves = vec![
        rand_tensor(rng, &[input_dim], -1.0, 1.0), // x
        rand_tensor(rng, &[hidden], -1.0, 1.0),    // h_prev
        rand_tensor(rng, &[hidden], -1.0, 1.0),    // c_prev
    ];
    for shape in lstm_leaf_shapes(input_dim, hidden) {
        leaves.push(rand_tensor(rng, &shape, -0.8, 0.8));
    }
    let wh = out_weights(rng, &[hidden]);
    let wc = out_weights(rng, &[hidden]);
    Case {
        name: format!("lstm_cell[i{input_dim} h{hidden}]"),
        leaves,
        build: Box::new(move |g, v| {
            let params = bind_lstm_params(&v[3..]);
            let (h, c) = g.lstm_cell(v[0], v[1], v[2], &params).unwrap();
            let sh = weighted_sum(g, h, &wh);
            let sc = weighted_sum(g, c, &wc);
            g.add(sh, sc).unwrap()
        }),
    }
}

pub fn multilayer_lstm<S: Scalar>(rng: &mut ChaCha8Rng) -> Case<S> {
    let input_dim = rng.random_range(1..=2);
    let hidden = rng.random_range(1..=2);
    let layers = rng.random_range(1..=2);
    let steps = rng.random_range(1..=3);
    let mut leaves = Vec::new();
    for _ in 0..steps {
        leaves.push(rand_tensor(rng, &[input_dim], -1.0, 1.0));
    }
    for layer in 0..layers {
        let dim = if layer == 0 { input_dim } else { hidden };
        for shape in lstm_leaf_shapes(dim, hidden) {
            leaves.push(rand_tensor(rng, &shape, -0.8, 0.8));
        }
    }
    let wh = out_weights(rng, &[hidden]);
    Case {
        name: format!("multilayer_lstm[i{input_dim} h{hidden} l{layers} t{steps}]"),
        leaves,
        build: Box::new(move |g, v| {
            let seq = &v[..steps];
            let mut params = Vec::new();
            for layer in 0..layers {
                params.push(bind_lstm_params(&v[steps + 12 * layer..steps + 12 * (layer + 1)]));
            }
            let out = g.multilayer_lstm(seq, &params).unwrap();
            weighted_sum(g, out, &wh)
        }),
    }
}

pub fn bce<S: Scalar>(rng: &mut ChaCha8Rng) -> Case<S> {
    let p = rng.random_range(0.1..0.9);
    let label = if rng.random_range(0.0..1.0) < 0.5 { 0.0 } else { 1.0 };
    let leaves = vec![Tensor::new(vec![1], vec![S::lit(p)]).unwrap()];
    Case {
        name: format!("bce[p={p:.3} y={label}]"),
        leaves,
        build: Box::new(move |g, v| g.bce_loss(v[0], S::lit(label)).unwrap()),
    }
}

/// Run the whole per-op randomized suite at the given probe step and
/// tolerance; `trials` random shapes per op.
pub fn run_suite<S: Scalar>(rng: &mut ChaCha8Rng, trials: usize, h: f64, tol: f64) {
    for _ in 0..trials {
        add::<S>(rng).run(h, tol);
        mul::<S>(rng).run(h, tol);
        sum_reshape::<S>(rng).run(h, tol);
        dense::<S>(rng).run(h, tol);
        activation::<S>(rng, Activation::Relu).run(h, tol);
        activation::<S>(rng, Activation::Sigmoid).run(h, tol);
        activation::<S>(rng, Activation::Tanh).run(h, tol);
        conv2d::<S>(rng).run(h, tol);
        conv3d::<S>(rng).run(h, tol);
        maxpool2d::<S>(rng).run(h, tol);
        lstm_cell::<S>(rng).run(h, tol);
        multilayer_lstm::<S>(rng).run(h, tol);
        bce::<S>(rng).run(h, tol);
    }
}
