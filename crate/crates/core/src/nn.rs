//! Named parameter store, tape binding, layer builders, and the Adam
//! optimizer.
//!
//! Every model in the pipeline keeps its weights in a [`ParamStore`] keyed by
//! dotted names ("text.block0.attn.wq"). Freeze policies, checkpoint
//! manifests, and byte-identity checks all operate on those names, so the
//! store is ordered (BTreeMap) to keep iteration deterministic.

use alloc::borrow::ToOwned;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::rng::Rng;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Ordered name → tensor map holding model state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        assert!(
            self.params.insert(name.to_owned(), t).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Absorb all entries of another store (names must not collide).
    pub fn absorb(&mut self, other: ParamStore) {
        for (name, t) in other.params {
            assert!(
                self.params.insert(name.clone(), t).is_none(),
                "duplicate parameter {name}"
            );
        }
    }

    /// Clone the subset of parameters whose names start with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }
}

/// A tape plus lazy bindings of store parameters as leaves.
pub struct Graph<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    bound: BTreeMap<String, Var>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph {
            tape: Tape::new(),
            store,
            bound: BTreeMap::new(),
        }
    }

    /// Bind a named parameter as a leaf (cached per graph).
    pub fn param(&mut self, name: &str) -> Var {
        if let Some(v) = self.bound.get(name) {
            return *v;
        }
        let v = self.tape.leaf(self.store.get(name).clone());
        self.bound.insert(name.to_owned(), v);
        v
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.tape.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Backward pass; returns gradients keyed by parameter name plus the raw
    /// per-var gradients (for inputs that are plain leaves).
    pub fn backward(&self, root: Var) -> (BTreeMap<String, Tensor>, Gradients) {
        let raw = self.tape.backward(root);
        let mut by_name = BTreeMap::new();
        for (name, var) in &self.bound {
            if let Some(g) = raw.get(*var) {
                by_name.insert(name.clone(), g.clone());
            }
        }
        (by_name, raw)
    }
}

// ── Initializers ─────────────────────────────────────────────────────

/// Linear layer params: weight [din, dout] (inputs row-major), bias [dout].
pub fn init_linear(store: &mut ParamStore, rng: &mut Rng, prefix: &str, din: usize, dout: usize) {
    let std_dev = libm::sqrt(2.0 / (din + dout) as f64);
    store.insert(&format!("{prefix}.w"), Tensor::randn(rng, std_dev, &[din, dout]));
    store.insert(&format!("{prefix}.b"), Tensor::zeros(&[dout]));
}

/// Conv layer params: weight [cout, cin, k, k], bias [cout].
pub fn init_conv(
    store: &mut ParamStore,
    rng: &mut Rng,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
) {
    let std_dev = libm::sqrt(2.0 / (cin * k * k) as f64);
    store.insert(
        &format!("{prefix}.w"),
        Tensor::randn(rng, std_dev, &[cout, cin, k, k]),
    );
    store.insert(&format!("{prefix}.b"), Tensor::zeros(&[cout]));
}

/// Affine norm params: gamma = 1, beta = 0.
pub fn init_norm(store: &mut ParamStore, prefix: &str, n: usize) {
    store.insert(&format!("{prefix}.gamma"), Tensor::filled(1.0, &[n]));
    store.insert(&format!("{prefix}.beta"), Tensor::zeros(&[n]));
}

// ── Layer forwards ───────────────────────────────────────────────────

/// x [m, din] -> [m, dout]
pub fn linear(g: &mut Graph<'_>, prefix: &str, x: Var) -> Var {
    let w = g.param(&format!("{prefix}.w"));
    let b = g.param(&format!("{prefix}.b"));
    let y = g.tape.matmul(x, w);
    g.tape.add_row(y, b)
}

/// x [cin, h, w] -> [cout, oh, ow]
pub fn conv(g: &mut Graph<'_>, prefix: &str, x: Var, stride: usize, pad: usize) -> Var {
    let w = g.param(&format!("{prefix}.w"));
    let b = g.param(&format!("{prefix}.b"));
    let y = g.tape.conv2d(x, w, stride, pad);
    g.tape.add_chan(y, b)
}

pub fn layer_norm(g: &mut Graph<'_>, prefix: &str, x: Var) -> Var {
    let gamma = g.param(&format!("{prefix}.gamma"));
    let beta = g.param(&format!("{prefix}.beta"));
    g.tape.layer_norm(x, gamma, beta)
}

pub fn group_norm(g: &mut Graph<'_>, prefix: &str, x: Var, groups: usize) -> Var {
    let gamma = g.param(&format!("{prefix}.gamma"));
    let beta = g.param(&format!("{prefix}.beta"));
    g.tape.group_norm(x, gamma, beta, groups)
}

/// Multi-head self-attention over a token matrix [s, d]. The optional
/// additive mask row [s] is broadcast over queries (pad masking).
pub fn self_attention(
    g: &mut Graph<'_>,
    prefix: &str,
    x: Var,
    heads: usize,
    mask: Option<&Tensor>,
) -> Var {
    let d = g.value(x).shape()[1];
    assert_eq!(d % heads, 0);
    let dh = d / heads;
    let scale = 1.0 / libm::sqrt(dh as f64);

    let q = linear(g, &format!("{prefix}.q"), x);
    let k = linear(g, &format!("{prefix}.k"), x);
    let v = linear(g, &format!("{prefix}.v"), x);

    let mask_leaf = mask.map(|m| g.leaf(m.clone()));
    let mut head_outputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.tape.slice_cols(q, h * dh, dh);
        let kh = g.tape.slice_cols(k, h * dh, dh);
        let vh = g.tape.slice_cols(v, h * dh, dh);
        let scores = g.tape.matmul_nt(qh, kh);
        let scores = g.tape.scale(scores, scale);
        let scores = match mask_leaf {
            Some(m) => g.tape.add_row(scores, m),
            None => scores,
        };
        let attn = g.tape.softmax_rows(scores);
        head_outputs.push(g.tape.matmul(attn, vh));
    }
    let merged = g.tape.concat_cols(&head_outputs);
    linear(g, &format!("{prefix}.o"), merged)
}

/// Single-head cross-attention of spatial features [c, h, w] over context
/// tokens [m, dctx]; returns the attended residual added to the input.
pub fn cross_attention(g: &mut Graph<'_>, prefix: &str, x: Var, ctx: Var, groups: usize) -> Var {
    let shape = g.value(x).shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let scale = 1.0 / libm::sqrt(c as f64);

    let normed = group_norm(g, &format!("{prefix}.norm"), x, groups);
    let flat = g.tape.reshape(normed, &[c, h * w]);
    let tokens = g.tape.transpose(flat); // [s, c]

    let q = linear(g, &format!("{prefix}.q"), tokens); // [s, c]
    let k = linear(g, &format!("{prefix}.k"), ctx); // [m, c]
    let v = linear(g, &format!("{prefix}.v"), ctx); // [m, c]

    let scores = g.tape.matmul_nt(q, k); // [s, m]
    let scores = g.tape.scale(scores, scale);
    let attn = g.tape.softmax_rows(scores);
    let ctx_mix = g.tape.matmul(attn, v); // [s, c]
    let out = linear(g, &format!("{prefix}.o"), ctx_mix);

    let back = g.tape.transpose(out); // [c, s]
    let spatial = g.tape.reshape(back, &[c, h, w]);
    g.tape.add(x, spatial)
}

pub fn init_self_attention(store: &mut ParamStore, rng: &mut Rng, prefix: &str, d: usize) {
    init_linear(store, rng, &format!("{prefix}.q"), d, d);
    init_linear(store, rng, &format!("{prefix}.k"), d, d);
    init_linear(store, rng, &format!("{prefix}.v"), d, d);
    init_linear(store, rng, &format!("{prefix}.o"), d, d);
}

pub fn init_cross_attention(
    store: &mut ParamStore,
    rng: &mut Rng,
    prefix: &str,
    c: usize,
    dctx: usize,
) {
    init_norm(store, &format!("{prefix}.norm"), c);
    init_linear(store, rng, &format!("{prefix}.q"), c, c);
    init_linear(store, rng, &format!("{prefix}.k"), dctx, c);
    init_linear(store, rng, &format!("{prefix}.v"), dctx, c);
    init_linear(store, rng, &format!("{prefix}.o"), c, c);
}

// ── Optimizer ────────────────────────────────────────────────────────

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

/// Adaptive moment estimation over named parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    step_count: u64,
    first_moment: BTreeMap<String, Tensor>,
    second_moment: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step_count: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    /// Apply one update. Only names in `trainable` move; everyone else is
    /// untouched. Gradients are jointly clipped to `clip_norm` first.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        trainable: &BTreeSet<String>,
        clip_norm: Option<f64>,
    ) {
        self.step_count += 1;
        let t = self.step_count;

        let mut clip_scale = 1.0;
        if let Some(max_norm) = clip_norm {
            let mut total = 0.0;
            for (name, g) in grads {
                if trainable.contains(name) {
                    total += g.data().iter().map(|v| v * v).sum::<f64>();
                }
            }
            let norm = libm::sqrt(total);
            if norm > max_norm {
                clip_scale = max_norm / norm;
            }
        }

        let bc1 = 1.0 - libm::pow(self.cfg.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(self.cfg.beta2, t as f64);

        for (name, grad) in grads {
            if !trainable.contains(name) {
                continue;
            }
            let m = self
                .first_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let v = self
                .second_moment
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let param = store.get_mut(name);
            for ((p, (m_i, v_i)), g_raw) in param
                .data_mut()
                .iter_mut()
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
                .zip(grad.data())
            {
                let g = g_raw * clip_scale;
                *m_i = self.cfg.beta1 * *m_i + (1.0 - self.cfg.beta1) * g;
                *v_i = self.cfg.beta2 * *v_i + (1.0 - self.cfg.beta2) * g * g;
                let m_hat = *m_i / bc1;
                let v_hat = *v_i / bc2;
                *p -= self.cfg.lr * m_hat / (libm::sqrt(v_hat) + self.cfg.eps);
            }
        }
    }
}

/// Convenience: the set of every name in the store.
pub fn all_names(store: &ParamStore) -> BTreeSet<String> {
    store.names().map(ToOwned::to_owned).collect()
}
