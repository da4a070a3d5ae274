use std::collections::BTreeMap;

use super::{Graph, Tensor, Var};
use crate::error::{NiceError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Named model parameters, iterated in sorted path order.
///
/// Frozen entries enter a graph as constants, so a backward pass never
/// produces a gradient for them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, tensor: Tensor) {
        self.entries.insert(path.into(), ParamEntry { tensor, trainable: true });
    }

    pub fn get(&self, path: &str) -> Option<&Tensor> {
        self.entries.get(path).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(path).map(|e| &mut e.tensor)
    }

    pub fn entry(&self, path: &str) -> Option<&ParamEntry> {
        self.entries.get(path)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }

    pub fn set_trainable(&mut self, path: &str, trainable: bool) -> Result<()> {
        let e = self
            .entries
            .get_mut(path)
            .ok_or_else(|| NiceError::MissingParam(path.to_string()))?;
        e.trainable = trainable;
        Ok(())
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.entries.values_mut().for_each(|e| e.trainable = trainable);
    }

    pub fn trainable_paths(&self) -> Vec<&str> {
        self.iter().filter(|(_, e)| e.trainable).map(|(k, _)| k).collect()
    }

    pub fn zero_grads(&mut self) {
        self.entries.values_mut().for_each(|e| e.tensor.zero_grad());
    }

    /// Records every entry on `g`: trainable ones as gradient leaves, frozen ones as constants.
    pub fn bind(&self, g: &Graph) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|(k, e)| {
                let mut t = e.tensor.clone();
                t.grad = None;
                let v = if e.trainable { g.leaf(t) } else { g.constant(t) };
                (k.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    /// Records every entry as a constant, for inference-only graphs.
    pub fn bind_frozen(&self, g: &Graph) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|(k, e)| {
                let mut t = e.tensor.clone();
                t.grad = None;
                (k.clone(), g.constant(t))
            })
            .collect();
        BoundParams { vars }
    }

    /// Adds the gradients from the last backward pass on `g` into trainable entries.
    pub fn collect_grads(&mut self, g: &Graph, bound: &BoundParams) {
        for (k, e) in self.entries.iter_mut() {
            if !e.trainable {
                continue;
            }
            if let Some(grad) = bound.vars.get(k).and_then(|&v| g.grad(v)) {
                e.tensor.accumulate_grad(grad.values());
            }
        }
    }

    /// Copies values from `other`, which must hold the same paths and shapes.
    pub fn load_values(&mut self, other: &ParamSet) -> Result<()> {
        for (k, e) in self.entries.iter_mut() {
            let src = other.get(k).ok_or_else(|| NiceError::MissingParam(k.clone()))?;
            if src.shape() != e.tensor.shape() {
                return Err(NiceError::shape(
                    "load_values",
                    format!("{k}: checkpoint {:?} vs model {:?}", src.shape(), e.tensor.shape()),
                ));
            }
            e.tensor.values_mut().copy_from_slice(src.values());
        }
        if let Some(extra) = other.entries.keys().find(|k| !self.entries.contains_key(*k)) {
            return Err(NiceError::InvalidArgument(format!("checkpoint has unexpected parameter `{extra}`")));
        }
        Ok(())
    }
}

/// Graph variables for one [`ParamSet::bind`] call.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, path: &str) -> Result<Var> {
        self.vars
            .get(path)
            .copied()
            .ok_or_else(|| NiceError::MissingParam(path.to_string()))
    }
}
