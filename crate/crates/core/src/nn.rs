//! Parameter storage, initialization, optimizer, and normalization helpers
//! shared by the static and generated parts of the network.

use indexmap::IndexMap;
use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Arr, Gradients, Tape, Tensor};

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone)]
pub struct Param {
    pub value: Arr,
    /// Running-statistic buffers and similar state are not trainable.
    pub trainable: bool,
}

/// Named parameter store. Insertion order is fixed at model construction, so
/// iteration (and therefore optimization and checkpointing) is deterministic.
#[derive(Clone, Default)]
pub struct ParamStore {
    map: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Arr) {
        self.insert_full(name, value, true);
    }

    pub fn insert_buffer(&mut self, name: &str, value: Arr) {
        self.insert_full(name, value, false);
    }

    fn insert_full(&mut self, name: &str, value: Arr, trainable: bool) {
        let prev = self.map.insert(name.to_string(), Param { value, trainable });
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> &Arr {
        &self.map.get(name).unwrap_or_else(|| panic!("unknown parameter {name}")).value
    }

    pub fn set(&mut self, name: &str, value: Arr) {
        let p = self.map.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        assert_eq!(p.value.shape(), value.shape(), "shape change for {name}");
        p.value = value;
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.map.iter()
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|p| p.value.len()).sum()
    }

    /// Bind every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &Tape) -> Bindings {
        let mut map = IndexMap::new();
        for (name, p) in &self.map {
            let t = if p.trainable {
                tape.leaf(p.value.clone())
            } else {
                tape.constant(p.value.clone())
            };
            map.insert(name.clone(), t);
        }
        Bindings { map }
    }
}

/// Tape leaves for one forward pass, keyed by parameter name.
pub struct Bindings {
    map: IndexMap<String, Tensor>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
            .clone()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }
}

/// Context for one forward pass: the tape, bound parameters, the train/eval
/// switch, and the running-statistic updates collected along the way (applied
/// to the store by the caller after the step).
pub struct Fwd<'a> {
    pub tape: &'a Tape,
    pub params: &'a Bindings,
    pub train: bool,
    pub stat_updates: std::cell::RefCell<Vec<(String, Arr)>>,
}

pub const BN_MOMENTUM: f64 = 0.1;

impl<'a> Fwd<'a> {
    pub fn new(tape: &'a Tape, params: &'a Bindings, train: bool) -> Self {
        Self {
            tape,
            params,
            train,
            stat_updates: std::cell::RefCell::new(Vec::new()),
        }
    }

    pub fn p(&self, name: &str) -> Tensor {
        self.params.get(name)
    }

    /// Static 2D batch norm with running statistics stored under
    /// `{prefix}.rmean` / `{prefix}.rvar`. Batch statistics in train mode,
    /// running statistics in eval mode.
    pub fn bn2d(&self, prefix: &str, x: &Tensor) -> Tensor {
        let c = x.shape()[1];
        let gamma = self.p(&format!("{prefix}.gamma")).reshape(&[1, c, 1, 1]);
        let beta = self.p(&format!("{prefix}.beta")).reshape(&[1, c, 1, 1]);
        if self.train {
            let (y, mu, var) = batch_norm(x, &gamma, &beta, &[0, 2, 3]);
            let flat_mu = mu.to_shape(IxDyn(&[c])).unwrap().to_owned();
            let flat_var = var.to_shape(IxDyn(&[c])).unwrap().to_owned();
            let mut updates = self.stat_updates.borrow_mut();
            let old_mu = self.p(&format!("{prefix}.rmean")).value();
            let old_var = self.p(&format!("{prefix}.rvar")).value();
            updates.push((
                format!("{prefix}.rmean"),
                &old_mu * (1.0 - BN_MOMENTUM) + &flat_mu * BN_MOMENTUM,
            ));
            updates.push((
                format!("{prefix}.rvar"),
                &old_var * (1.0 - BN_MOMENTUM) + &flat_var * BN_MOMENTUM,
            ));
            y
        } else {
            let rmean = self.p(&format!("{prefix}.rmean")).reshape(&[1, c, 1, 1]);
            let rvar = self.p(&format!("{prefix}.rvar")).reshape(&[1, c, 1, 1]);
            batch_norm_eval(x, &gamma, &beta, &rmean, &rvar)
        }
    }

    /// Apply collected running-stat updates to the store.
    pub fn apply_stat_updates(&self, store: &mut ParamStore) {
        for (name, value) in self.stat_updates.borrow().iter() {
            store.set(name, value.clone());
        }
    }
}

/// Register gamma/beta/rmean/rvar for a static BN layer.
pub fn register_bn(store: &mut ParamStore, prefix: &str, c: usize) {
    store.insert(&format!("{prefix}.gamma"), ones(&[c]));
    store.insert(&format!("{prefix}.beta"), zeros(&[c]));
    store.insert_buffer(&format!("{prefix}.rmean"), zeros(&[c]));
    store.insert_buffer(&format!("{prefix}.rvar"), ones(&[c]));
}

// ---- initialization ----------------------------------------------------

pub fn zeros(shape: &[usize]) -> Arr {
    Arr::zeros(IxDyn(shape))
}

pub fn ones(shape: &[usize]) -> Arr {
    Arr::from_elem(IxDyn(shape), 1.0)
}

pub fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Arr {
    let dist = Normal::new(0.0, std).unwrap();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Arr::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// He-normal for conv/linear weights; `fan_in` = inputs per output unit.
pub fn he_normal(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Arr {
    normal(rng, shape, (2.0 / fan_in as f64).sqrt())
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Arr {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Arr::from_shape_vec(IxDyn(shape), data).unwrap()
}

// ---- layers ------------------------------------------------------------

/// `x`: [..., in], `w`: [in, out], `b`: [out].
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    x.matmul(w).add(b)
}

/// Normalize over `axes` with the batch statistics of this forward pass.
/// `gamma`/`beta` must already be shaped for broadcast against `x`.
/// Returns the detached per-channel mean and variance for running-stat
/// bookkeeping.
pub fn batch_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, axes: &[usize]) -> (Tensor, Arr, Arr) {
    let mu = x.mean_axes(axes);
    let xc = x.sub(&mu);
    let var = xc.mul(&xc).mean_axes(axes);
    let y = xc.div(&var.add_scalar(BN_EPS).sqrt()).mul(gamma).add(beta);
    (y, mu.value(), var.value())
}

/// Inference-mode batch norm using stored running statistics (constants).
pub fn batch_norm_eval(x: &Tensor, gamma: &Tensor, beta: &Tensor, rmean: &Tensor, rvar: &Tensor) -> Tensor {
    x.sub(rmean)
        .div(&rvar.add_scalar(BN_EPS).sqrt())
        .mul(gamma)
        .add(beta)
}

/// Layer norm over the last axis. `gamma`/`beta`: [C].
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Tensor {
    let last = x.shape().len() - 1;
    let mu = x.mean_axes(&[last]);
    let xc = x.sub(&mu);
    let var = xc.mul(&xc).mean_axes(&[last]);
    xc.div(&var.add_scalar(1e-6).sqrt()).mul(gamma).add(beta)
}

// ---- optimizer ---------------------------------------------------------

#[derive(Clone, serde::Serialize, serde::Deserialize, Default)]
pub struct AdamState {
    pub t: u64,
    pub m: IndexMap<String, Vec<f64>>,
    pub v: IndexMap<String, Vec<f64>>,
}

pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState,
}

impl Adam {
    pub fn new() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            state: AdamState::default(),
        }
    }

    /// One update over every trainable parameter that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore, bindings: &Bindings, grads: &Gradients, lr: f64) {
        self.state.t += 1;
        let t = self.state.t;
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        for (name, tensor) in bindings.iter() {
            let Some(g) = grads.get(tensor) else { continue };
            let p = store.map.get_mut(name).expect("bound param missing from store");
            if !p.trainable {
                continue;
            }
            let n = p.value.len();
            let m = self.state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let gv = g.as_standard_layout();
            let gs = gv.as_slice().unwrap();
            let ps = p.value.as_slice_mut().unwrap();
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gs[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gs[i] * gs[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                ps[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}
