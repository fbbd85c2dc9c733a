//! Named parameter sets and the Adam optimizer with stepwise rate decay.

use std::collections::HashMap;

use super::{Tensor, TensorError};

/// One named tensor. Non-trainable entries (running statistics) ride along
/// in the set and its checkpoints but are never touched by the optimizer.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// An ordered, name-indexed collection of parameters. Order is insertion
/// order everywhere (iteration, checkpoints, digests), which keeps every
/// downstream artifact deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParameterSet {
    entries: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParameterSet {
    pub fn new() -> Self {
        ParameterSet::default()
    }

    pub fn push(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor,
        trainable: bool,
    ) -> Result<(), TensorError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::invalid(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Param {
            name,
            tensor,
            trainable,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].tensor)
    }

    pub fn entry(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<(), TensorError> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| TensorError::invalid(format!("unknown parameter {name:?}")))?;
        if self.entries[i].tensor.shape() != tensor.shape() {
            return Err(TensorError::ShapeMismatch {
                context: "parameter update",
                expected: self.entries[i].tensor.shape().to_vec(),
                got: tensor.shape().to_vec(),
            });
        }
        self.entries[i].tensor = tensor;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    /// Count of trainable scalar values.
    pub fn scalar_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Order-sensitive digest over names, flags, shapes, and exact bits.
    pub fn bits_digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.entries {
            for b in p.name.as_bytes() {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
            h ^= p.trainable as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
            h ^= p.tensor.bits_digest();
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

/// Gradients keyed by parameter name.
pub type GradientMap = HashMap<String, Tensor>;

/// First and second moment estimates for one trainable parameter.
#[derive(Debug, Clone)]
pub struct AdamMoments {
    pub name: String,
    pub m: Tensor,
    pub v: Tensor,
}

/// Steps per unit of exponential decay. A decay factor near 0.995 applied
/// per step would freeze a network within two thousand steps; per thousand
/// steps it trims the rate gently over a full run.
pub const DECAY_INTERVAL: f64 = 1000.0;

/// Adam state plus the decay schedule
/// `rate(t) = base_rate * decay^(t / DECAY_INTERVAL)`,
/// where `t` counts completed steps.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub base_rate: f64,
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub moments: Vec<AdamMoments>,
}

impl AdamState {
    /// Zero moments for every trainable entry of `params`.
    pub fn new(params: &ParameterSet, base_rate: f64, decay: f64) -> Self {
        let moments = params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| AdamMoments {
                name: p.name.clone(),
                m: Tensor::zeros(p.tensor.shape()),
                v: Tensor::zeros(p.tensor.shape()),
            })
            .collect();
        AdamState {
            step: 0,
            base_rate,
            decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            moments,
        }
    }

    /// The learning rate the next step will use.
    pub fn effective_rate(&self) -> f64 {
        self.base_rate * self.decay.powf(self.step as f64 / DECAY_INTERVAL)
    }
}

/// One Adam update over every trainable parameter in `params`.
///
/// `grads` must hold exactly one gradient per trainable parameter; a missing
/// or extra name is an error, so silently unstepped parameters cannot slip
/// through. Gradients of exactly zero leave the parameter unchanged on fresh
/// moments and let existing moments decay.
pub fn adam_step(
    params: &mut ParameterSet,
    grads: &GradientMap,
    state: &mut AdamState,
) -> Result<(), TensorError> {
    let trainable: Vec<String> = params
        .iter()
        .filter(|p| p.trainable)
        .map(|p| p.name.clone())
        .collect();
    if trainable.len() != state.moments.len() {
        return Err(TensorError::invalid(format!(
            "optimizer state covers {} parameters, set has {} trainable",
            state.moments.len(),
            trainable.len()
        )));
    }
    if grads.len() != trainable.len() {
        let extra: Vec<&String> = grads
            .keys()
            .filter(|k| !trainable.iter().any(|t| &t == k))
            .collect();
        return Err(TensorError::invalid(format!(
            "gradient map holds {} entries for {} trainable parameters (unmatched: {extra:?})",
            grads.len(),
            trainable.len()
        )));
    }
    let rate = state.effective_rate();
    let t = (state.step + 1) as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (name, mom) in trainable.iter().zip(state.moments.iter_mut()) {
        if &mom.name != name {
            return Err(TensorError::invalid(format!(
                "optimizer state entry {:?} does not match parameter {name:?}",
                mom.name
            )));
        }
        let grad = grads
            .get(name)
            .ok_or_else(|| TensorError::MissingGradient(name.clone()))?;
        let i = params
            .iter()
            .position(|p| &p.name == name)
            .expect("trainable name came from this set");
        let mut value = params.entries[i].tensor.clone();
        if grad.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                context: "adam gradient",
                expected: value.shape().to_vec(),
                got: grad.shape().to_vec(),
            });
        }
        for (((p, g), m), v) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(mom.m.data_mut())
            .zip(mom.v.data_mut())
        {
            *m = state.beta1 * *m + (1.0 - state.beta1) * g;
            *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= rate * m_hat / (v_hat.sqrt() + state.eps);
        }
        value.check_finite("adam_step")?;
        params.entries[i].tensor = value;
    }
    state.step += 1;
    Ok(())
}
