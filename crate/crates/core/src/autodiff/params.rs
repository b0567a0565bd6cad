use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{usage_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::{NodeId, Tape};

/// One trainable parameter with its Adam state.
#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub value: Tensor<T>,
    m: Tensor<T>,
    v: Tensor<T>,
    step: u64,
    pub frozen: bool,
}

/// Named parameters and non-trainable buffers (batchnorm running stats).
///
/// Iteration is in name order everywhere, which keeps initialization,
/// optimization and serialization deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    params: BTreeMap<String, Param<T>>,
    buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) {
        let shape = value.shape().to_vec();
        self.params.insert(
            name.to_string(),
            Param {
                value,
                m: Tensor::zeros(&shape),
                v: Tensor::zeros(&shape),
                step: 0,
                frozen: false,
            },
        );
    }

    pub fn insert_buffer(&mut self, name: &str, value: Tensor<T>) {
        self.buffers.insert(name.to_string(), value);
    }

    pub fn param(&self, name: &str) -> Result<&Param<T>> {
        self.params
            .get(name)
            .ok_or_else(|| usage_err!("unknown parameter '{name}'"))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers
            .get(name)
            .ok_or_else(|| usage_err!("unknown buffer '{name}'"))
    }

    pub fn set_buffer(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        match self.buffers.get_mut(name) {
            Some(slot) => {
                *slot = value;
                Ok(())
            }
            None => Err(usage_err!("unknown buffer '{name}'")),
        }
    }

    pub fn set_param_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        match self.params.get_mut(name) {
            Some(p) => {
                if p.value.shape() != value.shape() {
                    return Err(usage_err!(
                        "parameter '{name}' has shape {:?}, assignment has {:?}",
                        p.value.shape(),
                        value.shape()
                    ));
                }
                p.value = value;
                Ok(())
            }
            None => Err(usage_err!("unknown parameter '{name}'")),
        }
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn buffer_names(&self) -> impl Iterator<Item = &str> {
        self.buffers.keys().map(|s| s.as_str())
    }

    pub fn iter_params(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Freeze every parameter whose name starts with one of the prefixes;
    /// frozen parameters are bound without gradient and skipped by Adam.
    pub fn freeze_prefixes(&mut self, prefixes: &[String]) {
        for (name, p) in self.params.iter_mut() {
            if prefixes.iter().any(|pre| name.starts_with(pre.as_str())) {
                p.frozen = true;
            }
        }
    }

    /// Sum of squared parameter values; reported when training aborts.
    pub fn value_norm(&self) -> f64 {
        self.params
            .values()
            .flat_map(|p| p.value.data().iter())
            .map(|v| v.to_f64() * v.to_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Insert every parameter and buffer into a tape. Parameters become
    /// differentiable leaves (unless frozen), buffers become constants.
    pub fn bind(&self, tape: &mut Tape<T>) -> Binding {
        let mut ids = BTreeMap::new();
        for (name, p) in &self.params {
            let id = tape.leaf(p.value.clone(), !p.frozen);
            ids.insert(name.clone(), id);
        }
        for (name, b) in &self.buffers {
            let id = tape.constant(b.clone());
            ids.insert(name.clone(), id);
        }
        Binding { ids }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, p) in &self.params {
            out.insert(name, p.value.cast::<U>());
            if p.frozen {
                out.params.get_mut(name).unwrap().frozen = true;
            }
        }
        for (name, b) in &self.buffers {
            out.insert_buffer(name, b.cast::<U>());
        }
        out
    }
}

/// Name-to-node map for one bound forward pass.
pub struct Binding {
    ids: BTreeMap<String, NodeId>,
}

impl Binding {
    /// Assemble a binding from explicit (name, node) pairs; used by the
    /// gradient checker to make parameters differentiable check inputs.
    pub fn from_pairs(pairs: Vec<(String, NodeId)>) -> Self {
        Binding {
            ids: pairs.into_iter().collect(),
        }
    }

    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| usage_err!("parameter '{name}' is not bound"))
    }
}

/// Adam hyper-parameters.
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
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update with bias correction over every unfrozen parameter.
///
/// Parameters missing from `grads` (no path to the loss) are treated as
/// having zero gradient: moments decay and the step count advances.
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    cfg: AdamConfig,
) -> Result<()> {
    for name in grads.keys() {
        if !store.params.contains_key(name) {
            return Err(usage_err!("gradient for unknown parameter '{name}'"));
        }
    }
    for (name, p) in store.params.iter_mut() {
        if p.frozen {
            continue;
        }
        let zero;
        let grad = match grads.get(name) {
            Some(g) => {
                if g.shape() != p.value.shape() {
                    return Err(usage_err!(
                        "gradient shape {:?} does not match parameter '{name}' {:?}",
                        g.shape(),
                        p.value.shape()
                    ));
                }
                g
            }
            None => {
                zero = Tensor::zeros(p.value.shape());
                &zero
            }
        };
        p.step += 1;
        let b1 = T::from_f64(cfg.beta1);
        let b2 = T::from_f64(cfg.beta2);
        let one_m_b1 = T::from_f64(1.0 - cfg.beta1);
        let one_m_b2 = T::from_f64(1.0 - cfg.beta2);
        let corr1 = T::from_f64(1.0 / (1.0 - cfg.beta1.powi(p.step as i32)));
        let corr2 = T::from_f64(1.0 / (1.0 - cfg.beta2.powi(p.step as i32)));
        let lr = T::from_f64(cfg.lr);
        let eps = T::from_f64(cfg.eps);
        for i in 0..p.value.numel() {
            let g = grad.data()[i];
            let m = b1 * p.m.data()[i] + one_m_b1 * g;
            let v = b2 * p.v.data()[i] + one_m_b2 * g * g;
            p.m.data_mut()[i] = m;
            p.v.data_mut()[i] = v;
            let m_hat = m * corr1;
            let v_hat = v * corr2;
            let upd = lr * m_hat / (v_hat.sqrt() + eps);
            p.value.data_mut()[i] = p.value.data()[i] - upd;
        }
    }
    Ok(())
}

/// He-uniform draw in the convention of the framework the network was
/// originally trained in: `U(-b, b)` with `b = 1 / sqrt(fan_in)` (the
/// default convolution initializer there, kaiming-uniform with its
/// leaky-ReLU gain folded in).
pub fn he_uniform<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64(rng.gen_range(-bound..bound)))
}
