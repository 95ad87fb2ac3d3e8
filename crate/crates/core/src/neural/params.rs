//! Named parameter storage, gradient bundles and the Adam optimiser.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tensor::Tensor;

/// All trainable tensors, keyed by dotted name (`"prior.l0.wq"`).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    /// Uniform initialisation in `[-scale, scale]`.
    pub fn insert_random(&mut self, name: &str, rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) {
        let data = (0..rows * cols).map(|_| rng.gen_range(-scale..=scale)).collect();
        self.insert(name, Tensor::from_vec(rows, cols, data));
    }

    pub fn insert_const(&mut self, name: &str, rows: usize, cols: usize, value: f64) {
        self.insert(name, Tensor::from_vec(rows, cols, vec![value; rows * cols]));
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.tensors.get(name).unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.tensors.get_mut(name).unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// SHA-256 over the exact bit patterns of every parameter under `prefix`.
    pub fn checksum(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.tensors.iter().filter(|(n, _)| n.starts_with(prefix)) {
            h.update(name.as_bytes());
            for v in &t.data {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn shapes(&self) -> BTreeMap<String, (usize, usize)> {
        self.tensors.iter().map(|(n, t)| (n.clone(), t.shape())).collect()
    }
}

/// Gradients (or any per-parameter update) keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradBundle {
    pub grads: BTreeMap<String, Tensor>,
}

impl GradBundle {
    pub fn from_pairs(pairs: Vec<(String, Tensor)>) -> Self {
        let mut b = Self::default();
        for (n, g) in pairs {
            b.add(&n, &g);
        }
        b
    }

    pub fn add(&mut self, name: &str, g: &Tensor) {
        match self.grads.get_mut(name) {
            Some(acc) => acc.add_assign(g),
            None => {
                self.grads.insert(name.to_string(), g.clone());
            }
        }
    }

    pub fn add_scaled(&mut self, name: &str, g: &Tensor, s: f64) {
        let mut g = g.clone();
        g.scale_assign(s);
        self.add(name, &g);
    }

    pub fn merge(&mut self, other: &GradBundle) {
        for (n, g) in &other.grads {
            self.add(n, g);
        }
    }

    pub fn merge_scaled(&mut self, other: &GradBundle, s: f64) {
        for (n, g) in &other.grads {
            self.add_scaled(n, g, s);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.values_mut() {
            g.scale_assign(s);
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn norm(&self) -> f64 {
        self.grads.values().map(Tensor::sum_sq).sum::<f64>().sqrt()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(Tensor::is_finite)
    }

    /// Drops every entry whose name does not start with one of `prefixes`.
    pub fn retain_prefixes(&mut self, prefixes: &[&str]) {
        self.grads.retain(|n, _| prefixes.iter().any(|p| n.starts_with(p)));
    }

    /// Flattens entries in name order; handy for statistics in tests.
    pub fn flatten(&self) -> Vec<f64> {
        self.grads.values().flat_map(|t| t.data.iter().copied()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Total steps of the cosine schedule (decays to zero); `None` keeps `lr` fixed.
    pub cosine_total_steps: Option<usize>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(2.0), cosine_total_steps: None }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with optional global-norm clipping and cosine decay to 0.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    step: usize,
    moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        match self.config.cosine_total_steps {
            Some(total) if total > 0 => {
                let progress = (self.step as f64 / total as f64).min(1.0);
                0.5 * self.config.lr * (1.0 + (std::f64::consts::PI * progress).cos())
            }
            _ => self.config.lr,
        }
    }

    /// Gradient-descent step on `grads` (a loss gradient). Returns the pre-clip norm.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBundle) -> f64 {
        let norm = grads.norm();
        let clip = match self.config.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (name, g) in &grads.grads {
            let p = store.get_mut(name);
            let mo = self.moments.entry(name.clone()).or_insert_with(|| Moments { m: vec![0.0; p.len()], v: vec![0.0; p.len()] });
            for i in 0..p.len() {
                let gi = g.data[i] * clip;
                mo.m[i] = b1 * mo.m[i] + (1.0 - b1) * gi;
                mo.v[i] = b2 * mo.v[i] + (1.0 - b2) * gi * gi;
                let mhat = mo.m[i] / bc1;
                let vhat = mo.v[i] / bc2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + self.config.eps);
            }
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut store = ParamStore::default();
        store.insert("x", Tensor::row_vector(vec![3.0, -2.0]));
        let mut opt = Adam::new(AdamConfig { lr: 0.1, clip_norm: None, ..Default::default() });
        for _ in 0..500 {
            let x = store.get("x").clone();
            let g = GradBundle::from_pairs(vec![("x".into(), x.map(|v| 2.0 * v))]);
            opt.step(&mut store, &g);
        }
        assert!(store.get("x").data.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn cosine_schedule_reaches_zero() {
        let mut opt = Adam::new(AdamConfig { cosine_total_steps: Some(4), ..Default::default() });
        let mut store = ParamStore::default();
        store.insert("x", Tensor::scalar(1.0));
        let g = GradBundle::from_pairs(vec![("x".into(), Tensor::scalar(1.0))]);
        assert_eq!(opt.current_lr(), 1e-3);
        for _ in 0..4 {
            opt.step(&mut store, &g);
        }
        assert!(opt.current_lr().abs() < 1e-15);
    }

    #[test]
    fn checksum_tracks_prefix_only() {
        let mut store = ParamStore::default();
        store.insert("a.w", Tensor::scalar(1.0));
        store.insert("b.w", Tensor::scalar(2.0));
        let before = store.checksum("a.");
        store.get_mut("b.w").data[0] = 5.0;
        assert_eq!(before, store.checksum("a."));
        store.get_mut("a.w").data[0] = 1.0 + f64::EPSILON;
        assert_ne!(before, store.checksum("a."));
    }
}
