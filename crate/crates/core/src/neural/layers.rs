//! Transformer building blocks shared by every component, in two forms: a
//! taped version for training and a cached single-step version for decoding.

use rand::Rng;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use super::tensor::{gelu, softmax_in_place, Tensor};

const LN_EPS: f64 = 1e-5;
pub(crate) const MASKED: f64 = -1e30;

/// Registers one pre-norm self-attention block under `prefix`.
pub(crate) fn init_block(store: &mut ParamStore, prefix: &str, d: usize, ffn: usize, rng: &mut impl Rng) {
    let a = (1.0 / d as f64).sqrt();
    store.insert_const(&format!("{prefix}.ln1.g"), 1, d, 1.0);
    store.insert_const(&format!("{prefix}.ln1.b"), 1, d, 0.0);
    for w in ["wq", "wk", "wv", "wo"] {
        store.insert_random(&format!("{prefix}.{w}"), d, d, a, rng);
    }
    store.insert_const(&format!("{prefix}.bo"), 1, d, 0.0);
    store.insert_const(&format!("{prefix}.ln2.g"), 1, d, 1.0);
    store.insert_const(&format!("{prefix}.ln2.b"), 1, d, 0.0);
    store.insert_random(&format!("{prefix}.w1"), d, ffn, a, rng);
    store.insert_const(&format!("{prefix}.b1"), 1, ffn, 0.0);
    store.insert_random(&format!("{prefix}.w2"), ffn, d, (1.0 / ffn as f64).sqrt(), rng);
    store.insert_const(&format!("{prefix}.b2"), 1, d, 0.0);
}

pub(crate) fn init_norm(store: &mut ParamStore, prefix: &str, d: usize) {
    store.insert_const(&format!("{prefix}.g"), 1, d, 1.0);
    store.insert_const(&format!("{prefix}.b"), 1, d, 0.0);
}

pub(crate) fn norm(g: &mut Graph, x: Var, prefix: &str) -> Var {
    let gain = g.param(&format!("{prefix}.g"));
    let bias = g.param(&format!("{prefix}.b"));
    let n = g.layer_norm(x, LN_EPS);
    let n = g.mul_row(n, gain);
    g.add_row(n, bias)
}

/// `x + Attn(LN(x))`, then `x + FFN(LN(x))`. `causal` masks future positions.
pub(crate) fn block(g: &mut Graph, x: Var, prefix: &str, heads: usize, causal: bool) -> Var {
    let (n, d) = g.value(x).shape();
    let dh = d / heads;
    let h = norm(g, x, &format!("{prefix}.ln1"));
    let wq = g.param(&format!("{prefix}.wq"));
    let wk = g.param(&format!("{prefix}.wk"));
    let wv = g.param(&format!("{prefix}.wv"));
    let q = g.matmul(h, wq);
    let k = g.matmul(h, wk);
    let v = g.matmul(h, wv);
    let mask = causal.then(|| {
        let mut m = Tensor::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                m.set(i, j, MASKED);
            }
        }
        g.constant(m)
    });
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for hd in 0..heads {
        let qh = g.slice_cols(q, hd * dh, dh);
        let kh = g.slice_cols(k, hd * dh, dh);
        let vh = g.slice_cols(v, hd * dh, dh);
        let s = g.matmul_t(qh, kh);
        let mut s = g.scale(s, scale);
        if let Some(m) = mask {
            s = g.add(s, m);
        }
        let a = g.softmax_rows(s);
        outs.push(g.matmul(a, vh));
    }
    let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
    let wo = g.param(&format!("{prefix}.wo"));
    let bo = g.param(&format!("{prefix}.bo"));
    let o = g.matmul(cat, wo);
    let o = g.add_row(o, bo);
    let x = g.add(x, o);

    let h = norm(g, x, &format!("{prefix}.ln2"));
    let w1 = g.param(&format!("{prefix}.w1"));
    let b1 = g.param(&format!("{prefix}.b1"));
    let w2 = g.param(&format!("{prefix}.w2"));
    let b2 = g.param(&format!("{prefix}.b2"));
    let f = g.matmul(h, w1);
    let f = g.add_row(f, b1);
    let f = g.gelu(f);
    let f = g.matmul(f, w2);
    let f = g.add_row(f, b2);
    g.add(x, f)
}

fn norm_row(store: &ParamStore, x: &[f64], prefix: &str) -> Vec<f64> {
    let gain = store.get(&format!("{prefix}.g"));
    let bias = store.get(&format!("{prefix}.b"));
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let is = 1.0 / (var + LN_EPS).sqrt();
    x.iter().zip(&gain.data).zip(&bias.data).map(|((v, g), b)| (v - mean) * is * g + b).collect()
}

pub(crate) fn norm_infer(store: &ParamStore, x: &[f64], prefix: &str) -> Vec<f64> {
    norm_row(store, x, prefix)
}

fn row_matmul(x: &[f64], w: &Tensor) -> Vec<f64> {
    Tensor::from_vec(1, x.len(), x.to_vec()).matmul(w).data
}

fn add_into(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

/// Keys and values of every position seen so far, for one causal block.
#[derive(Clone, Debug, Default)]
pub(crate) struct BlockCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

/// One new position through a causal block, appending to its cache.
pub(crate) fn block_step(store: &ParamStore, x: &[f64], prefix: &str, heads: usize, cache: &mut BlockCache) -> Vec<f64> {
    let d = x.len();
    let dh = d / heads;
    let h = norm_row(store, x, &format!("{prefix}.ln1"));
    let q = row_matmul(&h, store.get(&format!("{prefix}.wq")));
    cache.keys.push(row_matmul(&h, store.get(&format!("{prefix}.wk"))));
    cache.values.push(row_matmul(&h, store.get(&format!("{prefix}.wv"))));
    let scale = 1.0 / (dh as f64).sqrt();
    let mut cat = vec![0.0; d];
    for hd in 0..heads {
        let cols = hd * dh..(hd + 1) * dh;
        let mut scores: Vec<f64> = cache.keys.iter().map(|k| super::tensor::dot(&q[cols.clone()], &k[cols.clone()]) * scale).collect();
        softmax_in_place(&mut scores);
        for (a, v) in scores.iter().zip(&cache.values) {
            if *a == 0.0 {
                continue;
            }
            for (o, vv) in cat[cols.clone()].iter_mut().zip(&v[cols.clone()]) {
                *o += a * vv;
            }
        }
    }
    let mut o = row_matmul(&cat, store.get(&format!("{prefix}.wo")));
    add_into(&mut o, &store.get(&format!("{prefix}.bo")).data);
    let mut x = x.to_vec();
    add_into(&mut x, &o);

    let h = norm_row(store, &x, &format!("{prefix}.ln2"));
    let mut f = row_matmul(&h, store.get(&format!("{prefix}.w1")));
    add_into(&mut f, &store.get(&format!("{prefix}.b1")).data);
    let f: Vec<f64> = f.into_iter().map(gelu).collect();
    let mut f = row_matmul(&f, store.get(&format!("{prefix}.w2")));
    add_into(&mut f, &store.get(&format!("{prefix}.b2")).data);
    add_into(&mut x, &f);
    x
}
