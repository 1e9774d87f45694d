use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{NumError, Result};
use crate::tape::{Gradients, NodeId, Tape};
use crate::tensor::Tensor;

/// Named trainable (or frozen) tensor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Ordered collection of named parameters. Insertion order is the
/// canonical order used for gradients, optimizer state and serialization.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParamSet {
    params: Vec<Parameter>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(NumError::DuplicateParam(name.to_string()));
        }
        let idx = self.params.len();
        self.params.push(Parameter {
            name: name.to_string(),
            tensor,
            trainable: true,
        });
        self.index.insert(name.to_string(), idx);
        Ok(idx)
    }

    /// Rebuild the name index after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn lookup(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, idx: usize) -> &Parameter {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Parameter {
        &mut self.params[idx]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.lookup(name).map(|i| self.get(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Total number of scalar entries across all parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Load every parameter onto a tape as a leaf. The binding maps
    /// parameter index to tape node for the life of that tape.
    pub fn bind(&self, tape: &mut Tape) -> ParamBinding {
        let nodes = self
            .params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone()))
            .collect();
        ParamBinding { nodes }
    }
}

/// Tape nodes for one binding of a ParamSet.
#[derive(Debug, Clone)]
pub struct ParamBinding {
    nodes: Vec<NodeId>,
}

impl ParamBinding {
    pub fn node(&self, idx: usize) -> NodeId {
        self.nodes[idx]
    }

    /// Gradients in parameter order, zero-filled where the loss did not
    /// touch a parameter.
    pub fn gradients(&self, params: &ParamSet, grads: &Gradients) -> Vec<Tensor> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, &n)| grads.dense(n, params.get(i).tensor.shape()))
            .collect()
    }
}
