use std::collections::BTreeMap;

use rand::Rng;

use super::tensor::Tensor2;
use crate::error::{Result, TipsError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct ParamEntry {
    name: String,
    value: Tensor2,
    trainable: bool,
}

/// Named parameter tensors. Gradients live in a [`GradStore`] created by
/// [`ParamRegistry::grad_store`], which has one slot per parameter with the
/// same shape.
#[derive(Clone, Debug, Default)]
pub struct ParamRegistry {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor2) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(TipsError::Config(format!("duplicate parameter name {name:?}")));
        }
        if !value.is_finite() {
            return Err(TipsError::Numeric(format!("initial value of {name}")));
        }
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            trainable: true,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor2 {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor2) -> Result<()> {
        let cur = &self.entries[id.0].value;
        if cur.shape() != value.shape() {
            return Err(TipsError::Dimension {
                op: "set_value",
                left: cur.shape(),
                right: value.shape(),
            });
        }
        self.entries[id.0].value = value;
        Ok(())
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.data().len()).sum()
    }

    pub fn grad_store(&self) -> GradStore {
        GradStore {
            slots: self
                .entries
                .iter()
                .map(|e| Tensor2::zeros(e.value.rows(), e.value.cols()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.is_finite())
    }
}

/// Gradient accumulators aligned with a [`ParamRegistry`]. Accumulation is
/// additive; call [`GradStore::zero`] at the start of each batch.
#[derive(Clone, Debug)]
pub struct GradStore {
    slots: Vec<Tensor2>,
}

impl GradStore {
    pub fn zero(&mut self) {
        self.slots.iter_mut().for_each(|s| s.fill(0.0));
    }

    pub fn get(&self, id: ParamId) -> &Tensor2 {
        &self.slots[id.0]
    }

    pub(crate) fn slot_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.slots[id.0]
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Sum another accumulator into this one (barrier merge).
    pub fn merge(&mut self, other: &GradStore) {
        for (a, b) in self.slots.iter_mut().zip(&other.slots) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.slots.iter_mut().for_each(|s| s.scale_assign(k));
    }

    pub fn global_norm(&self) -> f64 {
        self.slots.iter().map(Tensor2::norm_sq).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().all(Tensor2::is_finite)
    }
}

/// Uniform initialisation in `[-bound, bound]`.
pub fn uniform_init<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Tensor2 {
    let mut t = Tensor2::zeros(rows, cols);
    if bound > 0.0 {
        t.data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-bound..=bound));
    }
    t
}
