use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// How the optimizer treats a stored tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// Learnable and subject to weight decay (conv and linear weights).
    Weight,
    /// Learnable, exempt from weight decay (biases, norm affines, class token).
    NoDecay,
    /// Not learnable (batch-norm running statistics).
    Buffer,
}

impl ParamKind {
    pub fn learnable(self) -> bool {
        !matches!(self, ParamKind::Buffer)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub tensor: Tensor<T>,
    pub kind: ParamKind,
}

/// Gradients keyed by parameter name.
pub type ParamGrads<T> = IndexMap<String, Tensor<T>>;

/// Named model tensors in deterministic insertion order.
///
/// Names encode the module path, e.g. `rc1.prm.branch0.weight` or `nc3.mhsa.wq`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    entries: IndexMap<String, Param<T>>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, kind: ParamKind) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Usage(format!("parameter {name} registered twice")));
        }
        self.entries.insert(name, Param { tensor, kind });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// The tensor stored under `name`, or a usage error naming it.
    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::Usage(format!("unknown parameter {name}")))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.entries
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::Usage(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn learnable(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.iter()
            .filter(|(_, p)| p.kind.learnable())
            .map(|(k, p)| (k, &p.tensor))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total learnable scalar count.
    pub fn num_learnable(&self) -> usize {
        self.learnable().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            tensor: p.tensor.cast(),
                            kind: p.kind,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Checks that `other` holds the same names, kinds and shapes in the same order.
    pub fn check_same_layout<U: Float>(&self, other: &ParamStore<U>) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::Format(format!(
                "parameter count mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        for ((a, pa), (b, pb)) in self.iter().zip(other.iter()) {
            if a != b {
                return Err(Error::Format(format!("parameter order mismatch: {a} vs {b}")));
            }
            if pa.tensor.shape() != pb.tensor.shape() || pa.kind != pb.kind {
                return Err(Error::Format(format!(
                    "parameter {a}: shape {:?} disagrees with {:?}",
                    pa.tensor.shape(),
                    pb.tensor.shape()
                )));
            }
        }
        Ok(())
    }
}
