//! Named parameter storage, initialization helpers and the Adam optimizer.

use crate::diff::{Arr, Gradients, Tape, Var};
use ndarray::IxDyn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// Insertion-ordered set of named tensors. Order is stable, which keeps
/// checkpoints and optimizer state aligned.
#[derive(Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Arr>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Arr) {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
    }

    pub fn get(&self, name: &str) -> &Arr {
        let i = self.index[name];
        &self.values[i]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Arr {
        let i = self.index[name];
        &mut self.values[i]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arr)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let mut vars = HashMap::with_capacity(self.names.len());
        for (name, value) in self.iter() {
            vars.insert(name.to_string(), tape.leaf(value.clone()));
        }
        Bound { vars }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|a| a.iter().all(|x| x.is_finite()))
    }
}

/// Tape handles for a bound [`ParamStore`].
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    /// Pulls gradients for every bound parameter; missing ones become zero.
    pub fn collect_grads(&self, store: &ParamStore, grads: &mut Gradients) -> GradMap {
        let mut out = HashMap::with_capacity(store.len());
        for (name, value) in store.iter() {
            let g = grads
                .take(self.var(name))
                .unwrap_or_else(|| Arr::zeros(IxDyn(value.shape())));
            out.insert(name.to_string(), g);
        }
        GradMap { grads: out }
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct GradMap {
    grads: HashMap<String, Arr>,
}

impl GradMap {
    pub fn zeros_like(store: &ParamStore) -> Self {
        let grads = store
            .iter()
            .map(|(n, v)| (n.to_string(), Arr::zeros(IxDyn(v.shape()))))
            .collect();
        GradMap { grads }
    }

    pub fn get(&self, name: &str) -> &Arr {
        &self.grads[name]
    }

    pub fn add_assign(&mut self, other: &GradMap) {
        for (name, g) in &mut self.grads {
            *g += &other.grads[name];
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            *g *= factor;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(|a| a.iter().all(|x| x.is_finite()))
    }
}

/// He-style normal init with fan-in scaling.
pub fn he_init(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Arr {
    let std = (2.0 / fan_in as f64).sqrt();
    Arr::from_shape_fn(IxDyn(shape), |_| {
        // Box-Muller; two uniforms per draw keeps the stream simple
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

pub fn zeros(shape: &[usize]) -> Arr {
    Arr::zeros(IxDyn(shape))
}

pub fn full(shape: &[usize], value: f64) -> Arr {
    Arr::from_elem(IxDyn(shape), value)
}

/// Adam with bias correction. Defaults follow the usual constants.
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone)]
pub struct Adam {
    pub m: Vec<Arr>,
    pub v: Vec<Arr>,
    pub step_count: u64,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        Adam {
            m: store.iter().map(|(_, a)| Arr::zeros(IxDyn(a.shape()))).collect(),
            v: store.iter().map(|(_, a)| Arr::zeros(IxDyn(a.shape()))).collect(),
            step_count: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &GradMap, lr: f64) {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bias1 = 1.0 - ADAM_BETA1.powf(t);
        let bias2 = 1.0 - ADAM_BETA2.powf(t);
        for i in 0..store.len() {
            let name = store.names[i].clone();
            let g = grads.get(&name);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |m, &g| *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g);
            v.zip_mut_with(g, |v, &g| *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g);
            let param = &mut store.values[i];
            ndarray::Zip::from(&mut *param)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| {
                    let mh = m / bias1;
                    let vh = v / bias2;
                    *p -= lr * mh / (vh.sqrt() + ADAM_EPS);
                });
        }
    }
}
