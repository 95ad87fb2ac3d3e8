//! A small reverse-mode autodiff tape over [`Tensor`] values.
//!
//! A `Graph` is built fresh for every forward pass. Parameters enter as
//! leaves keyed by name; after [`Graph::backward`] their gradients can be
//! collected with [`Graph::param_grads`].

use std::collections::HashMap;

use super::params::ParamStore;
use super::tensor::{gelu, gelu_grad, sigmoid, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    LogSigmoid(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Gather { table: Var, ids: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    MeanRows(Var),
    BroadcastRows(Var),
    PickSum { x: Var, cells: Vec<(usize, usize)> },
    WeightedSum { x: Var, weights: Tensor },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Which parameters receive gradients.
#[derive(Clone, Debug, Default)]
pub enum Trainable {
    #[default]
    All,
    /// Only parameters whose name starts with one of these prefixes.
    Prefixes(Vec<String>),
}

impl Trainable {
    pub fn prefixes<I, S>(prefixes: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Trainable::Prefixes(prefixes.into_iter().map(Into::into).collect())
    }

    pub fn admits(&self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::Prefixes(ps) => ps.iter().any(|p| name.starts_with(p.as_str())),
        }
    }
}

pub struct Graph<'p> {
    nodes: Vec<Node>,
    store: &'p ParamStore,
    trainable: Trainable,
    params: HashMap<String, Var>,
    grads: Vec<Option<Tensor>>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self::with_trainable(store, Trainable::All)
    }

    pub fn with_trainable(store: &'p ParamStore, trainable: Trainable) -> Self {
        Self { nodes: Vec::new(), store, trainable, params: HashMap::new(), grads: Vec::new() }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf for a named parameter; repeated calls return the same leaf.
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let value = self.store.get(name).clone();
        let rg = self.trainable.admits(name);
        let v = self.push(value, Op::Leaf, rg);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    /// `a + 1·b` where `b` is a single row broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(bv.rows, 1, "add_row expects a row vector");
        assert_eq!(av.cols, bv.cols, "add_row width mismatch");
        let mut value = av.clone();
        for r in 0..value.rows {
            for (x, y) in value.row_mut(r).iter_mut().zip(&bv.data) {
                *x += y;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::AddRow(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let value = Tensor::from_vec(av.rows, av.cols, data);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn mul_row(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(bv.rows, 1, "mul_row expects a row vector");
        assert_eq!(av.cols, bv.cols, "mul_row width mismatch");
        let mut value = av.clone();
        for r in 0..value.rows {
            for (x, y) in value.row_mut(r).iter_mut().zip(&bv.data) {
                *x *= y;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MulRow(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    /// `ln σ(a)`, evaluated without forming σ.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x >= 0.0 { -(-x).exp().ln_1p() } else { x - x.exp().ln_1p() });
        let rg = self.rg(a);
        self.push(value, Op::LogSigmoid(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows {
            super::tensor::softmax_in_place(value.row_mut(r));
        }
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows {
            let ls = super::tensor::log_softmax(value.row(r));
            value.row_mut(r).copy_from_slice(&ls);
        }
        let rg = self.rg(a);
        self.push(value, Op::LogSoftmaxRows(a), rg)
    }

    /// Row-wise normalisation to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows);
        let n = x.cols as f64;
        for r in 0..x.rows {
            let row = value.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(a);
        self.push(value, Op::LayerNorm { x: a, inv_std }, rg)
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut value = Tensor::zeros(ids.len(), t.cols);
        for (r, &id) in ids.iter().enumerate() {
            value.row_mut(r).copy_from_slice(t.row(id));
        }
        let rg = self.rg(table);
        self.push(value, Op::Gather { table, ids: ids.to_vec() }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut value = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                value.row_mut(r)[offset..offset + pv.cols].copy_from_slice(pv.row(r));
            }
            offset += pv.cols;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.rows, "slice_rows out of range");
        let value = Tensor::from_vec(len, x.cols, x.data[start * x.cols..(start + len) * x.cols].to_vec());
        let rg = self.rg(a);
        self.push(value, Op::SliceRows { x: a, start }, rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols, "slice_cols out of range");
        let mut value = Tensor::zeros(x.rows, len);
        for r in 0..x.rows {
            value.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
        }
        let rg = self.rg(a);
        self.push(value, Op::SliceCols { x: a, start }, rg)
    }

    /// Column-wise mean, giving a `1 × cols` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = Tensor::zeros(1, x.cols);
        for r in 0..x.rows {
            for (o, v) in value.data.iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        let n = x.rows as f64;
        value.scale_assign(1.0 / n);
        let rg = self.rg(a);
        self.push(value, Op::MeanRows(a), rg)
    }

    /// Repeat a single row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.rows, 1, "broadcast_rows expects a row vector");
        let mut data = Vec::with_capacity(n * x.cols);
        for _ in 0..n {
            data.extend_from_slice(&x.data);
        }
        let value = Tensor::from_vec(n, x.cols, data);
        let rg = self.rg(a);
        self.push(value, Op::BroadcastRows(a), rg)
    }

    /// Sum of the selected `(row, col)` entries, as a `1 × 1` scalar.
    pub fn pick_sum(&mut self, a: Var, cells: &[(usize, usize)]) -> Var {
        let x = self.value(a);
        let s = cells.iter().map(|&(r, c)| x.get(r, c)).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::PickSum { x: a, cells: cells.to_vec() }, rg)
    }

    /// `Σ weights ⊙ a` with constant weights.
    pub fn weighted_sum(&mut self, a: Var, weights: Tensor) -> Var {
        let x = self.value(a);
        assert_eq!(x.shape(), weights.shape(), "weighted_sum shape mismatch");
        let s = super::tensor::dot(&x.data, &weights.data);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::WeightedSum { x: a, weights }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Sum of several scalars.
    pub fn add_all(&mut self, parts: &[Var]) -> Var {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p);
        }
        acc
    }

    /// Back-propagates from a `1 × 1` root. Gradients accumulate across calls
    /// so several losses over one graph can be combined.
    pub fn backward(&mut self, root: Var) {
        self.backward_scaled(root, 1.0);
    }

    pub fn backward_scaled(&mut self, root: Var, seed: f64) {
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(seed));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        if self.grads.len() < n {
            self.grads.resize_with(n, || None);
        }
        for (i, g) in grads.into_iter().enumerate() {
            if let (Op::Leaf, Some(g)) = (&self.nodes[i].op, g) {
                match &mut self.grads[i] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
        }
    }

    /// Gradients of every trainable parameter touched by this graph.
    pub fn param_grads(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .params
            .iter()
            .filter(|(_, v)| self.nodes[v.0].requires_grad)
            .map(|(name, v)| {
                let g = self.grads.get(v.0).and_then(|g| g.clone());
                let g = g.unwrap_or_else(|| {
                    let val = &self.nodes[v.0].value;
                    Tensor::zeros(val.rows, val.cols)
                });
                (name.clone(), g)
            })
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.matmul_t(self.value(*b)));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, self.value(*a).t_matmul(g));
                }
            }
            Op::MatMulT(a, b) => {
                // out = a bᵀ: da = g b, db = gᵀ a
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.matmul(self.value(*b)));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.t_matmul(self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    let mut gb = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (o, v) in gb.data.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = g.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::from_vec(g.rows, g.cols, d));
                }
                if self.rg(*b) {
                    let d = g.data.iter().zip(&av.data).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::from_vec(g.rows, g.cols, d));
                }
            }
            Op::MulRow(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let mut ga = g.clone();
                    for r in 0..ga.rows {
                        for (x, y) in ga.row_mut(r).iter_mut().zip(&bv.data) {
                            *x *= y;
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for ((o, gv), xv) in gb.data.iter_mut().zip(g.row(r)).zip(av.row(r)) {
                            *o += gv * xv;
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|x| x * s)),
            Op::Gelu(a) => {
                let x = self.value(*a);
                let d = g.data.iter().zip(&x.data).map(|(gv, xv)| gv * gelu_grad(*xv)).collect();
                self.accumulate(grads, *a, Tensor::from_vec(g.rows, g.cols, d));
            }
            Op::Tanh(a) => {
                let d = g.data.iter().zip(&out.data).map(|(gv, y)| gv * (1.0 - y * y)).collect();
                self.accumulate(grads, *a, Tensor::from_vec(g.rows, g.cols, d));
            }
            Op::Sigmoid(a) => {
                let d = g.data.iter().zip(&out.data).map(|(gv, y)| gv * y * (1.0 - y)).collect();
                self.accumulate(grads, *a, Tensor::from_vec(g.rows, g.cols, d));
            }
            Op::LogSigmoid(a) => {
                let x = self.value(*a);
                let d = g.data.iter().zip(&x.data).map(|(gv, xv)| gv * sigmoid(-xv)).collect();
                self.accumulate(grads, *a, Tensor::from_vec(g.rows, g.cols, d));
            }
            Op::SoftmaxRows(a) => {
                let mut ga = Tensor::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let s: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, yv), gv) in ga.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *o = yv * (gv - s);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let mut ga = Tensor::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let s: f64 = gr.iter().sum();
                    for ((o, yv), gv) in ga.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *o = gv - yv.exp() * s;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNorm { x, inv_std } => {
                let n = g.cols as f64;
                let mut gx = Tensor::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = gr.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((o, gv), yv) in gx.row_mut(r).iter_mut().zip(gr).zip(y) {
                        *o = inv_std[r] * (gv - mean_g - yv * mean_gy);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let mut gt = Tensor::zeros(t.rows, t.cols);
                for (r, &id) in ids.iter().enumerate() {
                    for (o, v) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *table, gt);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols;
                    if self.rg(p) {
                        let mut gp = Tensor::zeros(g.rows, w);
                        for r in 0..g.rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let h = self.value(p).rows;
                    if self.rg(p) {
                        let gp = Tensor::from_vec(h, g.cols, g.data[offset * g.cols..(offset + h) * g.cols].to_vec());
                        self.accumulate(grads, p, gp);
                    }
                    offset += h;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.rows, xv.cols);
                gx.data[start * xv.cols..(start + g.rows) * xv.cols].copy_from_slice(&g.data);
                self.accumulate(grads, *x, gx);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.rows, xv.cols);
                for r in 0..g.rows {
                    gx.row_mut(r)[*start..start + g.cols].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::MeanRows(a) => {
                let rows = self.value(*a).rows;
                let mut ga = Tensor::zeros(rows, g.cols);
                let s = 1.0 / rows as f64;
                for r in 0..rows {
                    for (o, v) in ga.row_mut(r).iter_mut().zip(&g.data) {
                        *o = v * s;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::BroadcastRows(a) => {
                let mut ga = Tensor::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (o, v) in ga.data.iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::PickSum { x, cells } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.rows, xv.cols);
                let s = g.item();
                for &(r, c) in cells {
                    gx.data[r * xv.cols + c] += s;
                }
                self.accumulate(grads, *x, gx);
            }
            Op::WeightedSum { x, weights } => {
                let s = g.item();
                self.accumulate(grads, *x, weights.map(|w| w * s));
            }
            Op::Sum(a) => {
                let xv = self.value(*a);
                let s = g.item();
                self.accumulate(grads, *a, Tensor::from_vec(xv.rows, xv.cols, vec![s; xv.len()]));
            }
        }
    }
}
