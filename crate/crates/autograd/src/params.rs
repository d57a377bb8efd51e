//! Named parameter collections and their binding into a [`Graph`].

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::graph::{Gradients, Graph, NodeId, Tensor};

/// Ordered map from parameter name to tensor. Iteration order is insertion
/// order, which keeps optimizer updates and serialization deterministic.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), ArrayD::zeros(v.raw_dim()))).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Merges `other` into `self` with every name prefixed by `prefix`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamStore) {
        for (k, v) in other.iter() {
            self.insert(format!("{prefix}{k}"), v.clone());
        }
    }

    /// Sub-store of names starting with `prefix`, prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new();
        for (k, v) in self.iter() {
            if let Some(rest) = k.strip_prefix(prefix) {
                out.insert(rest, v.clone());
            }
        }
        out
    }

    /// Adds every tensor to `g` as a trainable leaf (or as constants when frozen).
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let ids = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let id = if trainable { g.param(v.clone()) } else { g.constant(v.clone()) };
                (k.clone(), id)
            })
            .collect();
        Bound { ids }
    }
}

/// Graph node ids of a bound [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    ids: IndexMap<String, NodeId>,
}

impl Bound {
    pub fn id(&self, name: &str) -> NodeId {
        *self.ids.get(name).unwrap_or_else(|| panic!("parameter {name:?} not bound"))
    }

    pub fn try_id(&self, name: &str) -> Option<NodeId> {
        self.ids.get(name).copied()
    }

    /// Gradients for every bound tensor; names without a gradient get zeros.
    pub fn grads(&self, graph: &Graph, grads: &Gradients) -> ParamStore {
        let mut out = ParamStore::new();
        for (k, &id) in &self.ids {
            let g = grads.get(id).cloned().unwrap_or_else(|| ArrayD::zeros(graph.value(id).raw_dim()));
            out.insert(k.clone(), g);
        }
        out
    }
}

impl FromIterator<(String, NodeId)> for Bound {
    fn from_iter<I: IntoIterator<Item = (String, NodeId)>>(iter: I) -> Self {
        Self { ids: iter.into_iter().collect() }
    }
}

/// Scaled-normal initializer: `N(0, gain² / fan_in)`.
pub fn he_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    let std = gain / (fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("valid std");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || normal.sample(rng))
}
