//! Named parameter storage and the Adam optimizer with decoupled weight decay.

use std::collections::BTreeMap;

use super::{Tape, TensorId};

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
}

/// Flat list of named parameters. Order is insertion order and is the
/// canonical gradient layout for optimizer steps and checkpoints.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, shape: &[usize], value: Vec<f64>) -> usize {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            value,
        });
        self.by_name.insert(name.to_string(), self.params.len() - 1);
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, name: &str) -> &Param {
        &self.params[self.by_name[name]]
    }

    /// Put every parameter on a tape as a gradient-requiring leaf, in store
    /// order. Returns the tape ids aligned with [`ParamStore::params`].
    pub fn bind(&self, tape: &mut Tape) -> Vec<TensorId> {
        self.params
            .iter()
            .map(|p| tape.leaf(&p.shape, p.value.clone(), true))
            .collect()
    }

    /// Collect gradients for bound parameters after a backward pass.
    pub fn collect_grads(&self, tape: &Tape, bound: &[TensorId]) -> Vec<Vec<f64>> {
        bound
            .iter()
            .zip(&self.params)
            .map(|(&id, p)| {
                tape.grad(id)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; p.value.len()])
            })
            .collect()
    }
}

/// First/second moment buffers, aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            m: store.params().iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: store.params().iter().map(|p| vec![0.0; p.value.len()]).collect(),
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    /// One adaptive-moment update with decoupled weight decay.
    pub fn step(&self, store: &mut ParamStore, grads: &[Vec<f64>], state: &mut AdamState) {
        assert_eq!(grads.len(), store.len());
        state.step += 1;
        let bc1 = 1.0 - self.beta1.powi(state.step as i32);
        let bc2 = 1.0 - self.beta2.powi(state.step as i32);
        for (pi, param) in store.params_mut().iter_mut().enumerate() {
            let g = &grads[pi];
            let m = &mut state.m[pi];
            let v = &mut state.v[pi];
            for k in 0..param.value.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                param.value[k] -= self.lr * mhat / (vhat.sqrt() + self.eps)
                    + self.lr * self.weight_decay * param.value[k];
            }
        }
    }
}
