use std::collections::HashMap;

use super::tape::{Gradients, Tape, Var};
use super::Tensor;
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// A named tensor owned by a model. Non-trainable entries hold running statistics.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
    pub trainable: bool,
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            grad: None,
            trainable,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    /// Gives every trainable parameter a zero gradient buffer.
    pub fn zero_grads(&mut self) {
        for p in self.params.iter_mut().filter(|p| p.trainable) {
            p.grad = Some(Tensor::zeros(p.value.shape()));
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Extracts the gradient of each bound parameter from a reverse pass.
    pub fn collect_grads(&self, tape: &Tape, grads: &Gradients, bindings: &[(ParamId, Var)]) -> Vec<Option<Vec<f64>>> {
        let mut out = vec![None::<Vec<f64>>; self.params.len()];
        for &(id, var) in bindings {
            if !self.params[id.0].trainable {
                continue;
            }
            if let Some(g) = grads.raw(var) {
                let slot = out[id.0].get_or_insert_with(|| vec![0.0; g.len()]);
                debug_assert_eq!(slot.len(), tape.value(var).numel());
                slot.iter_mut().zip(g).for_each(|(s, g)| *s += g);
            }
        }
        out
    }

    /// Adds per-parameter gradient buffers (as returned by [`Self::collect_grads`]).
    pub fn accumulate(&mut self, grads: &[Option<Vec<f64>>]) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(shape_err!("gradient table for {} params, store has {}", grads.len(), self.params.len()));
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            let slot = p.grad.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            if slot.numel() != g.len() {
                return Err(shape_err!("gradient for {} has {} values, expected {}", p.name, g.len(), slot.numel()));
            }
            slot.data_mut().iter_mut().zip(g).for_each(|(s, g)| *s += g);
        }
        Ok(())
    }

    pub fn scale_grads(&mut self, s: f64) {
        for g in self.params.iter_mut().filter_map(|p| p.grad.as_mut()) {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}
