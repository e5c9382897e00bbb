//! SGD with momentum and L2 weight decay, restricted to a parameter group.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone)]
pub struct Sgd {
    learning_rate: f64,
    momentum: f64,
    weight_decay: f64,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        if weight_decay < 0.0 || !weight_decay.is_finite() {
            return Err(Error::Config(format!("weight decay must be nonnegative, got {weight_decay}")));
        }
        Ok(Sgd { learning_rate, momentum, weight_decay, velocity: Vec::new() })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.learning_rate = lr;
    }

    pub fn velocity(&self, id: ParamId) -> Option<&[f64]> {
        self.velocity.get(id.0).and_then(|v| v.as_deref())
    }

    /// `v ← momentum·v + grad + weight_decay·param; param ← param − lr·v`,
    /// then clears the gradients of the stepped parameters. Parameters outside
    /// `group` are not touched.
    pub fn step(&mut self, params: &mut ParamStore, group: &[ParamId]) -> Result<()> {
        if let Some(&missing) = group.iter().find(|&&id| params.get(id).grad().is_none()) {
            return Err(Error::Contract(format!(
                "sgd step: parameter '{}' has no gradient",
                params.name(missing)
            )));
        }
        if self.velocity.len() < params.len() {
            self.velocity.resize(params.len(), None);
        }
        for &id in group {
            let tensor = params.get_mut(id);
            let grad = tensor.grad().expect("checked above").to_vec();
            let v = self.velocity[id.0].get_or_insert_with(|| vec![0.0; grad.len()]);
            let data = tensor.data_mut();
            for i in 0..data.len() {
                v[i] = self.momentum * v[i] + grad[i] + self.weight_decay * data[i];
                data[i] -= self.learning_rate * v[i];
            }
            tensor.zero_grad();
        }
        Ok(())
    }
}
