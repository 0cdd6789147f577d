//! Named, ordered parameter collections.

use std::collections::HashMap;

use super::{NumericsError, Tensor};

/// Index of a tensor inside a [`ParameterSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Every learnable tensor of one network, in insertion order.
///
/// Cloning produces an independent copy (`snapshot` is an alias that reads
/// better at call sites handing parameters to a rollout worker).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    lookup: HashMap<String, usize>,
    /// Number of optimizer steps applied so far.
    pub step: u64,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId, NumericsError> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(NumericsError::DuplicateName(name));
        }
        let id = self.tensors.len();
        self.lookup.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar values.
    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn snapshot(&self) -> ParameterSet {
        self.clone()
    }

    /// Stores `grads` (aligned with parameter order) in each tensor's
    /// gradient slot, adding to anything already there.
    pub fn accumulate_grads(&mut self, grads: &[Tensor]) {
        assert_eq!(grads.len(), self.tensors.len(), "gradient count mismatch");
        for (t, g) in self.tensors.iter_mut().zip(grads) {
            let merged = match t.grad() {
                Some(old) => old.iter().zip(g.data()).map(|(a, b)| a + b).collect(),
                None => g.data().to_vec(),
            };
            t.set_grad(Some(merged));
        }
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.set_grad(None);
        }
    }

    /// `self ← τ·source + (1−τ)·self`, tensor by tensor.
    pub fn polyak_from(&mut self, source: &ParameterSet, tau: f64) {
        assert_eq!(self.names, source.names, "polyak between different layouts");
        for (dst, src) in self.tensors.iter_mut().zip(&source.tensors) {
            for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d = tau * s + (1.0 - tau) * *d;
            }
        }
    }

    /// Same names and shapes, in the same order.
    pub fn same_layout(&self, other: &ParameterSet) -> bool {
        self.names == other.names && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape() == b.shape())
    }

    /// Replaces values from `other`, which must share this layout.
    pub fn copy_values_from(&mut self, other: &ParameterSet) -> Result<(), NumericsError> {
        if !self.same_layout(other) {
            return Err(NumericsError::ShapeMismatch {
                op: "copy_values_from",
                detail: "parameter layouts differ".into(),
            });
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}
