use std::collections::HashMap;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named tensors of a model: trainable parameters plus non-trainable
/// buffers such as batch-norm running statistics. Names are stable and
/// double as checkpoint entry names.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(trainable);
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|id| self.trainable[id.0])
    }

    /// Total number of trainable scalars.
    pub fn num_parameters(&self) -> usize {
        self.trainable_ids()
            .map(|id| self.values[id.0].numel())
            .sum()
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::shape(format!(
                "parameter {} expects {}, got {}",
                self.names[id.0],
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// `(name, tensor)` pairs in registration order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Overwrites every entry from `entries`; all names must be present
    /// with matching shapes.
    pub fn load_entries<'a>(
        &mut self,
        entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    ) -> Result<()> {
        let mut seen = vec![false; self.len()];
        for (name, t) in entries {
            let Some(id) = self.find(name) else { continue };
            self.set(id, t.clone())?;
            seen[id.0] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::config(format!(
                "checkpoint is missing entry {}",
                self.names[missing]
            )));
        }
        Ok(())
    }
}

/// Forward-pass context: a fresh graph, lazily bound parameters and the
/// train/eval mode.
pub struct Ctx<'a> {
    pub graph: Graph,
    store: &'a mut ParamStore,
    vars: Vec<Option<Var>>,
    train: bool,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a mut ParamStore, train: bool) -> Self {
        let n = store.len();
        Ctx {
            graph: Graph::new(),
            store,
            vars: vec![None; n],
            train,
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Graph node for a parameter, created on first use.
    pub fn var(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = self
            .graph
            .leaf(self.store.values[id.0].clone(), self.store.trainable[id.0]);
        self.vars[id.0] = Some(v);
        v
    }

    /// Writes a buffer (e.g. running statistics). Does not touch a value
    /// already bound into the graph.
    pub fn update_buffer(&mut self, id: ParamId, value: Tensor) {
        debug_assert!(!self.store.trainable[id.0]);
        self.store.values[id.0] = value;
    }

    /// Gradient of every trainable parameter after `graph.backward`;
    /// parameters that were never used get `None`.
    pub fn grads(&self) -> Vec<(ParamId, Option<Tensor>)> {
        self.store
            .trainable_ids()
            .map(|id| {
                (
                    id,
                    self.vars[id.0].and_then(|v| self.graph.grad(v).cloned()),
                )
            })
            .collect()
    }
}
