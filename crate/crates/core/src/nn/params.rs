//! Named parameter storage shared by the tape (training) and the frame-wise
//! eval path, plus the Adam optimizer.

use super::{Grads, NodeId, Tape};
use crate::tensor::Tensor;
use crate::{Error, Result};
use rand::Rng;
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
    /// Adam first/second moment accumulators (zero for non-trainables).
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.entries.len());
        let shape = value.shape().to_vec();
        self.entries.push(Param {
            name: name.to_string(),
            value,
            trainable,
            m: Tensor::zeros(shape.clone()),
            v: Tensor::zeros(shape),
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.entries[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of scalar values in trainable parameters whose name starts
    /// with `prefix` (empty prefix counts everything).
    pub fn trainable_count(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|p| p.trainable && p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }
}

/// Uniform fan-in init, U(-sqrt(1/fan_in), sqrt(1/fan_in)).
pub fn init_uniform<R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).unwrap()
}

/// One training-graph build: a tape plus the leaf bindings of parameters so
/// gradients can be routed back to the store after `backward`.
pub struct Session {
    pub tape: Tape,
    bindings: Vec<(ParamId, NodeId)>,
}

impl Session {
    pub fn new() -> Self {
        Self {
            tape: Tape::new(),
            bindings: Vec::new(),
        }
    }

    /// Materialize a parameter as a tape leaf and remember the binding.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let node = self.tape.leaf(store.get(id).value.clone());
        self.bindings.push((id, node));
        node
    }

    pub fn bound_params(&self) -> &[(ParamId, NodeId)] {
        &self.bindings
    }

    /// Collect per-parameter gradients after a backward pass, summing over
    /// multiple uses of the same parameter.
    pub fn param_grads(&self, grads: &Grads) -> HashMap<ParamId, Tensor> {
        let mut out: HashMap<ParamId, Tensor> = HashMap::new();
        for (pid, nid) in &self.bindings {
            if let Some(g) = grads.get(*nid) {
                match out.get_mut(pid) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    None => {
                        out.insert(*pid, g.clone());
                    }
                }
            }
        }
        out
    }
}

impl Default for Session {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.0004,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update over every trainable parameter that received a gradient.
/// `step` is the 1-based global step used for bias correction.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &HashMap<ParamId, Tensor>,
    cfg: &AdamConfig,
    step: u64,
) {
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for (pid, g) in grads {
        let p = store.get_mut(*pid);
        if !p.trainable {
            continue;
        }
        let gm = g.data();
        let m = p.m.data_mut();
        let v = p.v.data_mut();
        let value = p.value.data_mut();
        for i in 0..gm.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gm[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gm[i] * gm[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            value[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
}
