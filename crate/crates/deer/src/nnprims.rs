//! Dense-network building blocks with exact analytic gradients.
//!
//! All parameters live in a flat named [`ParamStore`]; layers are lightweight
//! descriptors that read and write the store by name. Gradients are produced
//! by hand-written reverse passes and checked against
//! [`finite_difference_gradient`] in tests. Everything is `f64` and fully
//! deterministic under fixed seeds.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DeerError, Result};

/// 64-bit FNV-1a over raw bytes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// One named parameter tensor with a freeze flag.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub frozen: bool,
}

impl Param {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Flat named parameter registry. Names are unique; iteration order is the
/// lexicographic name order, which keeps every downstream loop deterministic.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.params.insert(
            name.to_string(),
            Param {
                shape,
                data,
                frozen: false,
            },
        );
    }

    /// Initialize a parameter with uniform(-a, a), a = sqrt(6/(fan_in+fan_out)),
    /// from an RNG stream derived from the parameter name and the base seed.
    pub fn init_uniform(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        fan_in: usize,
        fan_out: usize,
        seed: u64,
    ) {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(name.as_bytes()));
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-a..a)).collect();
        self.insert(name, shape, data);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Param {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn data(&self, name: &str) -> &[f64] {
        &self.get(name).data
    }

    pub fn data_mut(&mut self, name: &str) -> &mut Vec<f64> {
        &mut self
            .params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .data
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .frozen = frozen;
    }

    /// Freeze every parameter whose name starts with `prefix`.
    pub fn freeze_prefix(&mut self, prefix: &str, frozen: bool) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.frozen = frozen;
            }
        }
    }

    pub fn freeze_all(&mut self) {
        for p in self.params.values_mut() {
            p.frozen = true;
        }
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.get(name).frozen
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn total_len(&self) -> usize {
        self.params.values().map(|p| p.len()).sum()
    }

    pub fn trainable_len(&self) -> usize {
        self.params
            .values()
            .filter(|p| !p.frozen)
            .map(|p| p.len())
            .sum()
    }

    pub fn frozen_len(&self) -> usize {
        self.params
            .values()
            .filter(|p| p.frozen)
            .map(|p| p.len())
            .sum()
    }
}

/// Accumulated gradients keyed by parameter name. Parameters absent from the
/// map received no gradient this step and must not be updated.
#[derive(Debug, Clone, Default)]
pub struct GradStore {
    grads: BTreeMap<String, Vec<f64>>,
}

impl GradStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entry(&mut self, name: &str, len: usize) -> &mut Vec<f64> {
        self.grads
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; len])
    }

    pub fn get(&self, name: &str) -> Option<&Vec<f64>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<f64>)> {
        self.grads.iter()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            for v in g.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Activation used by [`TwoLayerSpec`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: &[f64]) -> Vec<f64> {
        match self {
            Activation::Relu => z.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            Activation::Tanh => z.iter().map(|&v| v.tanh()).collect(),
        }
    }

    /// Derivative given both pre-activation `z` and activation output `a`.
    fn backward(self, z: &[f64], a: &[f64], da: &[f64]) -> Vec<f64> {
        match self {
            Activation::Relu => z
                .iter()
                .zip(da)
                .map(|(&z, &d)| if z > 0.0 { d } else { 0.0 })
                .collect(),
            Activation::Tanh => a.iter().zip(da).map(|(&a, &d)| d * (1.0 - a * a)).collect(),
        }
    }
}

/// Descriptor for a dense layer stored under `{name}.w` (out x in, row-major)
/// and `{name}.b` (out).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseSpec {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl DenseSpec {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Self {
            name: name.into(),
            in_dim,
            out_dim,
        }
    }

    fn w_name(&self) -> String {
        format!("{}.w", self.name)
    }

    fn b_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        store.init_uniform(
            &self.w_name(),
            vec![self.out_dim, self.in_dim],
            self.in_dim,
            self.out_dim,
            seed,
        );
        store.insert(&self.b_name(), vec![self.out_dim], vec![0.0; self.out_dim]);
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.in_dim {
            return Err(DeerError::Shape(format!(
                "{}: input len {} != in_dim {}",
                self.name,
                x.len(),
                self.in_dim
            )));
        }
        let w = store.data(&self.w_name());
        let b = store.data(&self.b_name());
        let mut y = b.to_vec();
        for o in 0..self.out_dim {
            let row = &w[o * self.in_dim..(o + 1) * self.in_dim];
            let mut acc = 0.0;
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            y[o] += acc;
        }
        Ok(y)
    }

    /// Reverse pass: accumulates dW and db into `grads`, returns dx.
    pub fn backward(
        &self,
        store: &ParamStore,
        x: &[f64],
        dy: &[f64],
        grads: &mut GradStore,
    ) -> Vec<f64> {
        let w = store.data(&self.w_name());
        {
            let dw = grads.entry(&self.w_name(), self.out_dim * self.in_dim);
            for o in 0..self.out_dim {
                let row = &mut dw[o * self.in_dim..(o + 1) * self.in_dim];
                let d = dy[o];
                for (gi, xi) in row.iter_mut().zip(x) {
                    *gi += d * xi;
                }
            }
        }
        {
            let db = grads.entry(&self.b_name(), self.out_dim);
            for (gi, di) in db.iter_mut().zip(dy) {
                *gi += di;
            }
        }
        let mut dx = vec![0.0; self.in_dim];
        for o in 0..self.out_dim {
            let row = &w[o * self.in_dim..(o + 1) * self.in_dim];
            let d = dy[o];
            for (xi, wi) in dx.iter_mut().zip(row) {
                *xi += d * wi;
            }
        }
        dx
    }
}

/// Two dense layers with an elementwise activation in between; the shape used
/// by every expert, the classification head, and the routing policy.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TwoLayerSpec {
    pub l1: DenseSpec,
    pub l2: DenseSpec,
    pub activation: Activation,
}

/// Cached intermediates of a two-layer forward pass.
#[derive(Debug, Clone)]
pub struct TwoLayerCache {
    pub x: Vec<f64>,
    pub z1: Vec<f64>,
    pub a1: Vec<f64>,
    pub y: Vec<f64>,
}

impl TwoLayerSpec {
    pub fn new(
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        activation: Activation,
    ) -> Self {
        Self {
            l1: DenseSpec::new(format!("{name}.l1"), in_dim, hidden),
            l2: DenseSpec::new(format!("{name}.l2"), hidden, out_dim),
            activation,
        }
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        self.l1.init(store, seed);
        self.l2.init(store, seed);
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(store, x)?.y)
    }

    pub fn forward_cached(&self, store: &ParamStore, x: &[f64]) -> Result<TwoLayerCache> {
        let z1 = self.l1.forward(store, x)?;
        let a1 = self.activation.apply(&z1);
        let y = self.l2.forward(store, &a1)?;
        Ok(TwoLayerCache {
            x: x.to_vec(),
            z1,
            a1,
            y,
        })
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &TwoLayerCache,
        dy: &[f64],
        grads: &mut GradStore,
    ) -> Vec<f64> {
        let da1 = self.l2.backward(store, &cache.a1, dy, grads);
        let dz1 = self.activation.backward(&cache.z1, &cache.a1, &da1);
        self.l1.backward(store, &cache.x, &dz1, grads)
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(DeerError::Shape("softmax of empty vector".into()));
    }
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// dL/dz given softmax output `p` and dL/dp.
pub fn softmax_backward(p: &[f64], dp: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    p.iter().zip(dp).map(|(&pi, &di)| pi * (di - dot)).collect()
}

/// -ln(probs[label]) with an epsilon floor inside the log.
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    if label >= probs.len() {
        return Err(DeerError::Data(format!(
            "label {label} out of range for {} classes",
            probs.len()
        )));
    }
    Ok(-(probs[label].max(1e-12)).ln())
}

/// Shannon entropy of a probability vector, in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

/// Argmax with ties broken toward the lower index.
pub fn argmax_tie_low(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// AdamW hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// Optimizer state: step count plus per-parameter first/second moments.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamWState {
    pub step: u64,
    pub hyper: AdamWConfig,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamWState {
    pub fn new(hyper: AdamWConfig) -> Self {
        Self {
            step: 0,
            hyper,
            moments: BTreeMap::new(),
        }
    }

    pub fn moments(&self, name: &str) -> Option<&(Vec<f64>, Vec<f64>)> {
        self.moments.get(name)
    }
}

/// One decoupled-weight-decay Adam step over the parameters named in `grads`.
/// Frozen parameters are skipped; parameters without a gradient entry are
/// left untouched (moments included).
pub fn adamw_step(store: &mut ParamStore, grads: &GradStore, state: &mut AdamWState) -> Result<()> {
    state.step += 1;
    let t = state.step;
    let h = state.hyper.clone();
    let bc1 = 1.0 - h.beta1.powi(t as i32);
    let bc2 = 1.0 - h.beta2.powi(t as i32);
    for (name, g) in grads.iter() {
        if !store.contains(name) {
            return Err(DeerError::Shape(format!("gradient for unknown param {name}")));
        }
        if store.is_frozen(name) {
            continue;
        }
        let p = store.data_mut(name);
        if p.len() != g.len() {
            return Err(DeerError::Shape(format!(
                "gradient len {} != param len {} for {name}",
                g.len(),
                p.len()
            )));
        }
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
        for i in 0..g.len() {
            m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
            v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= h.lr * (m_hat / (v_hat.sqrt() + h.eps) + h.weight_decay * p[i]);
        }
    }
    Ok(())
}

/// Central-difference gradient over every unfrozen parameter coordinate.
/// Test oracle for the analytic reverse passes.
pub fn finite_difference_gradient<F>(store: &ParamStore, loss_fn: F, eps: f64) -> Result<GradStore>
where
    F: Fn(&ParamStore) -> Result<f64>,
{
    let mut grads = GradStore::new();
    let names: Vec<String> = store
        .iter()
        .filter(|(_, p)| !p.frozen)
        .map(|(n, _)| n.clone())
        .collect();
    let mut probe = store.clone();
    for name in names {
        let len = store.get(&name).len();
        for i in 0..len {
            let orig = store.data(&name)[i];
            probe.data_mut(&name)[i] = orig + eps;
            let up = loss_fn(&probe)?;
            probe.data_mut(&name)[i] = orig - eps;
            let down = loss_fn(&probe)?;
            probe.data_mut(&name)[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(DeerError::Numeric(format!(
                    "non-finite loss while probing {name}[{i}]"
                )));
            }
            grads.entry(&name, len)[i] = (up - down) / (2.0 * eps);
        }
    }
    Ok(grads)
}

/// Max relative error between two gradient sets over shared names,
/// `|a-b| / max(1, |a|, |b|)` per coordinate.
pub fn max_rel_grad_err(a: &GradStore, b: &GradStore) -> f64 {
    let mut worst: f64 = 0.0;
    for (name, ga) in a.iter() {
        if let Some(gb) = b.get(name) {
            for (x, y) in ga.iter().zip(gb) {
                let denom = x.abs().max(y.abs()).max(1.0);
                worst = worst.max((x - y).abs() / denom);
            }
        }
    }
    worst
}
