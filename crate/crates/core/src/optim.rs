//! SGD with momentum and L2 weight decay.

use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { learning_rate: 0.05, momentum: 0.9, weight_decay: 1e-4 }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(format!("learning_rate must be non-negative, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        Ok(())
    }
}

/// Hyperparameters plus one velocity buffer per store entry.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T: Scalar = f32> {
    pub config: SgdConfig,
    /// Indexed by [`ParamId::index`]; empty for non-trainable entries.
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(config: SgdConfig, store: &ParamStore<T>) -> Self {
        let velocity = store
            .ids()
            .map(|id| if store.is_trainable(id) { vec![T::zero(); store.get(id).numel()] } else { Vec::new() })
            .collect();
        OptimizerState { config, velocity }
    }

    pub fn velocity(&self, id: ParamId) -> &[T] {
        &self.velocity[id.index()]
    }

    pub fn velocity_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.velocity[id.index()]
    }

    /// `v ← μ·v + g + λ·θ;  θ ← θ − η·v` for every trainable entry holding a
    /// gradient and not listed in `frozen`.
    pub fn step(&mut self, store: &mut ParamStore<T>, frozen: &[ParamId]) -> Result<(), TensorError> {
        if self.velocity.len() != store.len() {
            return Err(TensorError::Shape("optimizer state does not match parameter store".into()));
        }
        for id in store.ids().collect::<Vec<_>>() {
            if !store.is_trainable(id) || frozen.contains(&id) {
                continue;
            }
            let Some(grad) = store.get(id).grad.as_ref() else { continue };
            if let Some(pos) = grad.iter().position(|g| !g.is_finite()) {
                return Err(TensorError::NonFinite(format!(
                    "gradient of `{}` has {:?} at index {pos}",
                    store.name(id),
                    grad[pos]
                )));
            }
        }
        let lr = T::of_f64(self.config.learning_rate);
        let mu = T::of_f64(self.config.momentum);
        let wd = T::of_f64(self.config.weight_decay);
        for id in store.ids().collect::<Vec<_>>() {
            if !store.is_trainable(id) || frozen.contains(&id) {
                continue;
            }
            let tensor = store.get_mut(id);
            let Some(grad) = tensor.grad.take() else { continue };
            let vel = &mut self.velocity[id.index()];
            if vel.len() != grad.len() {
                return Err(TensorError::Shape(format!("velocity buffer for entry {} has wrong length", id.index())));
            }
            for ((p, v), g) in tensor.data_mut().iter_mut().zip(vel.iter_mut()).zip(grad) {
                *v = mu * *v + g + wd * *p;
                *p = *p - lr * *v;
            }
        }
        Ok(())
    }
}
