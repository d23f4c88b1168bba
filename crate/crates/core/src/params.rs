//! Named parameter tensors and their binding onto a graph.

use indexmap::IndexMap;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::rng;
use crate::tensor::{Graph, Precision, Tensor, Var};

/// Ordered map from parameter path to tensor.
///
/// Iteration follows insertion order, which every constructor in this crate
/// fixes, so enumeration is deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor>,
}

/// How a freshly created parameter is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given standard deviation.
    Normal(f64),
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor. Panics on a duplicate name; names are fixed by code.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        let prev = self.tensors.insert(name.clone(), value);
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    /// Creates a parameter filled according to `init`. The values depend only
    /// on `(seed, name)`.
    pub fn init(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        init: Init,
        seed: u64,
        precision: Precision,
    ) {
        let name = name.into();
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let mut r = rng::stream(seed, &name);
                (0..n)
                    .map(|_| std * r.sample::<f64, _>(StandardNormal))
                    .collect()
            }
        };
        let t = Tensor::from_parts(shape, data).rounded(precision);
        self.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar values across all tensors.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// True when both stores hold the same names, in the same order, with
    /// bit-identical values.
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }

    pub fn rounded(self, precision: Precision) -> Self {
        ParamStore {
            tensors: self
                .tensors
                .into_iter()
                .map(|(k, v)| (k, v.rounded(precision)))
                .collect(),
        }
    }
}

impl FromIterator<(String, Tensor)> for ParamStore {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        let mut store = ParamStore::new();
        for (k, v) in iter {
            store.insert(k, v);
        }
        store
    }
}

/// Graph handles for every tensor of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: IndexMap<String, Var>,
    trainable: bool,
}

impl BoundParams {
    /// Records each parameter as a leaf. Frozen (`trainable = false`)
    /// parameters become constants and never receive gradients.
    pub fn bind(g: &mut Graph, store: &ParamStore, trainable: bool) -> Self {
        let vars = store
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), g.leaf(t.clone(), trainable)))
            .collect();
        BoundParams { vars, trainable }
    }

    /// Handle for `name`. Panics if the parameter does not exist, which is a
    /// construction bug rather than a runtime condition.
    pub fn var(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(v) => *v,
            None => panic!("parameter {name} not bound"),
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    /// Gradients after backward, in store order. Empty when frozen.
    pub fn grads(&self, g: &Graph) -> Vec<(String, Tensor)> {
        if !self.trainable {
            return Vec::new();
        }
        self.vars
            .iter()
            .filter_map(|(k, &v)| g.grad(v).map(|t| (k.clone(), t)))
            .collect()
    }
}
