//! Named parameter tensors with gradient accumulators and routing tags.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{PdmlError, Result};
use crate::Scalar;

/// Which part of the network a parameter belongs to. The trainer uses the tag
/// to decide which loss terms may update it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    Backbone,
    MeanHead,
    VarHead,
    Classifier,
    MetricScalars,
}

impl Tag {
    pub const ALL: [Tag; 5] = [
        Tag::Backbone,
        Tag::MeanHead,
        Tag::VarHead,
        Tag::Classifier,
        Tag::MetricScalars,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Tag::Backbone => "backbone",
            Tag::MeanHead => "mean_head",
            Tag::VarHead => "var_head",
            Tag::Classifier => "classifier",
            Tag::MetricScalars => "metric_scalars",
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Tag {
    type Err = PdmlError;

    fn from_str(s: &str) -> Result<Self> {
        Tag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| PdmlError::Config(format!("unknown routing tag {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<F> {
    pub name: String,
    pub tag: Tag,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
}

/// Ordered parameter collection. Entry order is insertion order and is the
/// order used by gradient buffers and checkpoints.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<F> {
    entries: Vec<ParamEntry<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tag: Tag, value: Tensor<F>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(PdmlError::Config(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        let grad = Tensor::zeros(value.shape());
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            tag,
            value,
            grad,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn entry(&self, id: usize) -> &ParamEntry<F> {
        &self.entries[id]
    }

    pub fn entry_mut(&mut self, id: usize) -> &mut ParamEntry<F> {
        &mut self.entries[id]
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<F>> {
        self.id(name).map(|i| &self.entries[i])
    }

    pub fn value(&self, id: usize) -> &[F] {
        self.entries[id].value.data()
    }

    pub fn value_mut(&mut self, id: usize) -> &mut [F] {
        self.entries[id].value.data_mut()
    }

    pub fn grad(&self, id: usize) -> &[F] {
        self.entries[id].grad.data()
    }

    pub fn tags(&self) -> Vec<Tag> {
        self.entries.iter().map(|e| e.tag).collect()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(F::zero());
        }
    }

    /// Adds `grads` into the accumulators.
    pub fn accumulate(&mut self, grads: &Gradients<F>) {
        for (e, g) in self.entries.iter_mut().zip(&grads.bufs) {
            for (a, &b) in e.grad.data_mut().iter_mut().zip(g) {
                *a += b;
            }
        }
    }

    /// Copies the accumulators into a standalone buffer.
    pub fn grads(&self) -> Gradients<F> {
        Gradients {
            bufs: self
                .entries
                .iter()
                .map(|e| e.grad.data().to_vec())
                .collect(),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        let mut out = ParamStore::new();
        for e in &self.entries {
            out.insert(e.name.clone(), e.tag, e.value.cast())
                .expect("names are unique");
        }
        out
    }
}

/// Gradient buffers aligned with a [`ParamStore`]'s entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<F> {
    pub bufs: Vec<Vec<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn zeros_like(store: &ParamStore<F>) -> Self {
        Self {
            bufs: store
                .entries()
                .iter()
                .map(|e| vec![F::zero(); e.value.len()])
                .collect(),
        }
    }

    pub fn get(&self, id: usize) -> &[F] {
        &self.bufs[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut [F] {
        &mut self.bufs[id]
    }

    pub fn add_assign(&mut self, other: &Gradients<F>) {
        for (a, b) in self.bufs.iter_mut().zip(&other.bufs) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, c: F) {
        for buf in &mut self.bufs {
            buf.iter_mut().for_each(|x| *x *= c);
        }
    }

    pub fn is_all_zero(&self, id: usize) -> bool {
        self.bufs[id].iter().all(|x| *x == F::zero())
    }
}
