//! Binds named parameters from a [`ParamStore`] into a [`Graph`].

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use pmdm_tensor::{Gradients, Graph, ParamStore, Tensor, Var};

use crate::error::{Error, Result};

/// Each parameter becomes exactly one graph leaf no matter how many times
/// the forward pass reads it, so its gradient accumulates in one place.
pub struct Binder<'g, 's> {
    graph: &'g Graph,
    store: &'s ParamStore,
    trainable: bool,
    bound: RefCell<HashMap<String, Var<'g>>>,
}

impl<'g, 's> Binder<'g, 's> {
    /// Parameters are recorded as trainable leaves.
    pub fn new(graph: &'g Graph, store: &'s ParamStore) -> Self {
        Self {
            graph,
            store,
            trainable: true,
            bound: RefCell::new(HashMap::new()),
        }
    }

    /// Parameters are recorded as constants; nothing is differentiated.
    pub fn frozen(graph: &'g Graph, store: &'s ParamStore) -> Self {
        Self {
            trainable: false,
            ..Self::new(graph, store)
        }
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn get(&self, name: &str) -> Result<Var<'g>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(*v);
        }
        let value = self
            .store
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))?
            .clone();
        let v = self.graph.leaf(value, self.trainable);
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    pub fn constant(&self, value: Tensor) -> Var<'g> {
        self.graph.constant(value)
    }

    /// Gradients of every stored parameter; parameters the forward pass never
    /// read (or that do not reach the loss) get zeros.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        let bound = self.bound.borrow();
        self.store
            .iter()
            .map(|(name, value)| {
                let g = bound
                    .get(name)
                    .map(|v| grads.get_or_zeros(*v))
                    .unwrap_or_else(|| Tensor::zeros(value.shape()));
                (name.to_string(), g)
            })
            .collect()
    }
}
