//! Named parameter storage and binding of parameters onto a graph.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Trainable tensors keyed by dotted path, iterated in sorted order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
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

    /// Number of trainable scalars.
    pub fn num_scalars(&self) -> u64 {
        self.tensors.values().map(|t| t.numel() as u64).sum()
    }

    /// A copy with every value rounded to the nearest `f32`.
    pub fn quantized_f32(&self) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), t.map(|v| v as f32 as f64)))
                .collect(),
        }
    }

    /// Same names and shapes as `other`.
    pub fn same_layout(&self, other: &ParamStore) -> std::result::Result<(), String> {
        for (name, t) in &self.tensors {
            match other.tensors.get(name) {
                None => return Err(format!("missing tensor `{name}`")),
                Some(o) if o.shape() != t.shape() => {
                    return Err(format!(
                        "tensor `{name}` has shape {:?}, expected {:?}",
                        o.shape(),
                        t.shape()
                    ))
                }
                _ => {}
            }
        }
        if let Some(extra) = other.tensors.keys().find(|k| !self.tensors.contains_key(*k)) {
            return Err(format!("unexpected tensor `{extra}`"));
        }
        Ok(())
    }
}

/// Registers freshly initialized parameters under a path prefix.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    pub fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> Result<()> {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound))?;
        self.store.insert(name, t);
        Ok(())
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn fan_in(&mut self, name: String, shape: &[usize], fan_in: usize) -> Result<()> {
        self.uniform(name, shape, 1.0 / (fan_in as f64).sqrt())
    }

    pub fn constant(&mut self, name: String, shape: &[usize], value: f64) -> Result<()> {
        self.store.insert(name, Tensor::full(shape, value)?);
        Ok(())
    }

    pub fn tensor(&mut self, name: String, t: Tensor) {
        self.store.insert(name, t);
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }
}

/// Binds stored parameters onto a graph, once per name.
pub struct Binder<'g> {
    graph: &'g Graph,
    store: &'g ParamStore,
    trainable: bool,
    bound: RefCell<BTreeMap<String, Var>>,
}

impl<'g> Binder<'g> {
    /// Parameters become leaves that receive gradients.
    pub fn trainable(graph: &'g Graph, store: &'g ParamStore) -> Self {
        Binder {
            graph,
            store,
            trainable: true,
            bound: RefCell::new(BTreeMap::new()),
        }
    }

    /// Parameters become constants.
    pub fn frozen(graph: &'g Graph, store: &'g ParamStore) -> Self {
        Binder {
            trainable: false,
            ..Binder::trainable(graph, store)
        }
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(v.clone());
        }
        let t = self.store.get(name)?.clone();
        let v = if self.trainable {
            self.graph.leaf(t)
        } else {
            self.graph.constant(t)
        };
        self.bound.borrow_mut().insert(name.to_string(), v.clone());
        Ok(v)
    }

    /// Gradients of every bound parameter, shaped like the parameter.
    ///
    /// Stored parameters never touched by the forward pass get zeros.
    pub fn collect_gradients(&self, grads: &Gradients) -> Result<BTreeMap<String, Tensor>> {
        let bound = self.bound.borrow();
        let mut out = BTreeMap::new();
        for (name, t) in self.store.iter() {
            let g = match bound.get(name).and_then(|v| Graph::grad_of(grads, v)) {
                Some(g) => g,
                None => Tensor::zeros(t.shape())?,
            };
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
