//! Named parameter tensors with per-parameter Adam state.

use std::collections::BTreeMap;

use crate::error::DiffError;
use crate::rng::Rng;
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;

pub const ADAM_BETA_M: f64 = 0.9;
pub const ADAM_BETA_V: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
struct Param {
    tensor: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

/// Named parameters plus optimizer state. Names are unique; iteration order
/// is the name order (BTreeMap), so runs are reproducible.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

/// Tape bindings for one store: the leaf id of every parameter, in name order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    ids: Vec<(String, ValueId)>,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> ValueId {
        self.ids
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .unwrap_or_else(|| panic!("parameter `{}` is not bound", name))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, ValueId)> {
        self.ids.iter().map(|(n, id)| (n.as_str(), *id))
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Registers a tensor under a unique name; the tensor becomes trainable.
    pub fn insert(&mut self, name: &str, mut tensor: Tensor) {
        assert!(
            !self.params.contains_key(name),
            "parameter name `{}` already registered",
            name
        );
        tensor.set_requires_grad(true);
        let numel = tensor.numel();
        self.params.insert(
            name.to_string(),
            Param { tensor, m: vec![0.0; numel], v: vec![0.0; numel], step: 0 },
        );
    }

    /// Registers a tensor with entries drawn from N(0, scale^2).
    pub fn insert_normal(&mut self, name: &str, shape: Vec<usize>, scale: f64, rng: &mut Rng) {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| scale * rng.normal()).collect();
        self.insert(name, Tensor::new(shape, data));
    }

    /// Registers an all-zero tensor (typical for biases).
    pub fn insert_zeros(&mut self, name: &str, shape: Vec<usize>) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.params.get(name).unwrap_or_else(|| panic!("no parameter `{}`", name)).tensor
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self.params.get_mut(name).unwrap_or_else(|| panic!("no parameter `{}`", name)).tensor
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.tensor.numel()).sum()
    }

    pub fn step_count(&self, name: &str) -> u64 {
        self.params.get(name).unwrap_or_else(|| panic!("no parameter `{}`", name)).step
    }

    /// Leafs every parameter onto the tape, returning the bindings.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let ids = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), tape.leaf(&p.tensor)))
            .collect();
        BoundParams { ids }
    }

    /// Accumulates tape gradients (after `backward`) into the parameters.
    /// Parameters the loss did not touch keep their gradient buffer absent.
    pub fn absorb_grads(&mut self, tape: &Tape, bound: &BoundParams) {
        for (name, id) in &bound.ids {
            if let Some(g) = tape.grad(*id) {
                self.params.get_mut(name).expect("bound name").tensor.accumulate_grad(g);
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for p in self.params.values_mut() {
            p.tensor.clear_grad();
        }
    }

    /// Ensures every parameter owns a gradient buffer (zeros where absent),
    /// for losses that legitimately leave some parameters untouched.
    pub fn zero_fill_missing_grads(&mut self) {
        for p in self.params.values_mut() {
            if p.tensor.grad().is_none() {
                let n = p.tensor.numel();
                p.tensor.accumulate_grad(&vec![0.0; n]);
            }
        }
    }

    /// One Adam update with bias correction; clears gradients afterwards.
    pub fn adam_step(&mut self, lr: f64, beta_m: f64, beta_v: f64, eps: f64) -> Result<(), DiffError> {
        for (name, p) in self.params.iter() {
            if p.tensor.grad().is_none() {
                return Err(DiffError::MissingGradient { param: name.clone() });
            }
        }
        for p in self.params.values_mut() {
            p.step += 1;
            let bc_m = 1.0 - beta_m.powi(p.step as i32);
            let bc_v = 1.0 - beta_v.powi(p.step as i32);
            let grad = p.tensor.grad().expect("checked above").to_vec();
            let data = p.tensor.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                p.m[i] = beta_m * p.m[i] + (1.0 - beta_m) * g;
                p.v[i] = beta_v * p.v[i] + (1.0 - beta_v) * g * g;
                let m_hat = p.m[i] / bc_m;
                let v_hat = p.v[i] / bc_v;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            p.tensor.clear_grad();
        }
        Ok(())
    }

    pub fn adam_step_default(&mut self, lr: f64) -> Result<(), DiffError> {
        self.adam_step(lr, ADAM_BETA_M, ADAM_BETA_V, ADAM_EPS)
    }

    /// Clamps every parameter value into [-limit, limit].
    pub fn clamp_all(&mut self, limit: f64) {
        assert!(limit > 0.0, "clamp limit must be positive");
        for p in self.params.values_mut() {
            for v in p.tensor.data_mut() {
                *v = v.clamp(-limit, limit);
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.params
            .values()
            .flat_map(|p| p.tensor.data().iter())
            .fold(0.0, |acc: f64, v| acc.max(v.abs()))
    }

    /// Parameters as (name, tensor) pairs in name order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(n, p)| (n.as_str(), &p.tensor))
    }
}
