//! Named parameter storage shared by the model, optimizer, and checkpoints.

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Registers every parameter on the tape; only ids in `trainable` carry
    /// gradients.
    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>, trainable: &[ParamId]) -> Bound {
        let mut flags = vec![false; self.len()];
        for id in trainable {
            flags[id.0] = true;
        }
        let vars = self.tensors.iter().zip(&flags).map(|(t, &rg)| tape.leaf_with(t, rg)).collect();
        Bound { vars, trainable: trainable.to_vec() }
    }

    /// Adds the gradients of trainable parameters from a backward sweep.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients) -> Result<()> {
        for &id in &bound.trainable {
            if let Some(g) = grads.get(bound.var(id)) {
                self.tensors[id.0].accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Raw bytes of the listed parameters, for bit-exact comparisons.
    pub fn snapshot(&self, ids: &[ParamId]) -> Vec<u64> {
        ids.iter().flat_map(|id| self.tensors[id.0].data().iter().map(|v| v.to_bits())).collect()
    }

    pub fn replace(&mut self, id: ParamId, tensor: Tensor) -> Result<()> {
        if tensor.shape() != self.tensors[id.0].shape() {
            return Err(Error::shape(
                "replace",
                format!("{} has shape {:?}, got {:?}", self.names[id.0], self.tensors[id.0].shape(), tensor.shape()),
            ));
        }
        self.tensors[id.0] = tensor;
        Ok(())
    }
}

/// Tape variables for every parameter of a store.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    trainable: Vec<ParamId>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}
