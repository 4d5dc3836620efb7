use serde::{Deserialize, Serialize};

use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Index of an entry in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Trainable entries get a gradient and optimizer slots; buffers (running
    /// statistics) are updated outside the optimizer.
    pub trainable: bool,
    pub grad: Vec<T>,
    /// Adam first moment; unused by RMSProp.
    pub moment1: Vec<T>,
    /// Adam second moment or RMSProp mean-square accumulator.
    pub moment2: Vec<T>,
}

/// Named parameter arrays with their gradient and optimizer-state slots.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    fn push(&mut self, name: String, value: Tensor<T>, trainable: bool) -> ParamId {
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let n = if trainable { value.len() } else { 0 };
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
            grad: vec![T::zero(); n],
            moment1: vec![T::zero(); n],
            moment2: vec![T::zero(); n],
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.push(name.into(), value, true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.push(name.into(), value, false)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entry_mut(&mut self, id: ParamId) -> &mut ParamEntry<T> {
        &mut self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn entries(&self) -> impl Iterator<Item = (ParamId, &ParamEntry<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e))
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry<T>> {
        self.entries.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Adds a gradient into the slot of `id`.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[T]) -> Result<()> {
        let e = &mut self.entries[id.0];
        if !e.trainable || e.grad.len() != grad.len() {
            return Err(Error::shape(
                e.name.clone(),
                format!(
                    "gradient of length {} for slot of length {}",
                    grad.len(),
                    e.grad.len()
                ),
            ));
        }
        e.grad.iter_mut().zip(grad).for_each(|(g, &d)| *g += d);
        Ok(())
    }

    /// Replaces all values with another store of identical layout.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.entries.len() != self.entries.len() {
            return Err(Error::State("parameter stores differ in layout".into()));
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::State(format!(
                    "parameter {} does not match {}",
                    dst.name, src.name
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }

    /// Converts every array to another precision, keeping optimizer state.
    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        let conv = |v: &[T]| v.iter().map(|&x| U::of(x.f64())).collect::<Vec<U>>();
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                    grad: conv(&e.grad),
                    moment1: conv(&e.moment1),
                    moment2: conv(&e.moment2),
                })
                .collect(),
        }
    }
}
