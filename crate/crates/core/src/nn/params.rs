//! Named parameter storage and graph bindings.

use indexmap::IndexMap;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered, named parameters and non-trainable buffers (running statistics,
/// kernel-shape shadows).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Tensor>,
    buffers: IndexMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor) {
        self.buffers.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::State(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("missing parameter {name}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::State(format!("missing buffer {name}")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| Error::State(format!("missing buffer {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Bind every parameter into `g`: as a trainable leaf when `trainable`
    /// says so, as a constant otherwise.
    pub fn bind(&self, g: &mut Graph, trainable: &dyn Fn(&str) -> bool) -> Bindings {
        let nodes = self
            .params
            .iter()
            .map(|(k, v)| {
                let id = if trainable(k) { g.param(v.clone()) } else { g.constant(v.clone()) };
                (k.clone(), id)
            })
            .collect();
        Bindings { nodes, masks: IndexMap::new() }
    }
}

/// Graph nodes standing in for named parameters during one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    nodes: IndexMap<String, NodeId>,
    masks: IndexMap<String, NodeId>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .get(name)
            .copied()
            .ok_or_else(|| Error::State(format!("parameter {name} is not bound")))
    }

    pub fn try_get(&self, name: &str) -> Option<NodeId> {
        self.nodes.get(name).copied()
    }

    /// Substitute another node for a parameter, e.g. an adapted copy.
    pub fn set(&mut self, name: impl Into<String>, id: NodeId) {
        self.nodes.insert(name.into(), id);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.nodes.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Kernel-shape mask node for the layer prefix `name`, if bound.
    pub fn mask(&self, name: &str) -> Option<NodeId> {
        self.masks.get(name).copied()
    }

    pub fn set_mask(&mut self, name: impl Into<String>, id: NodeId) {
        self.masks.insert(name.into(), id);
    }

    pub fn masks(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.masks.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Role of a parameter, derived from its name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    Similarity,
    Predictor,
    Adapter,
    Classifier,
}

impl ParamGroup {
    pub fn of(name: &str) -> ParamGroup {
        if name.starts_with("head.") {
            ParamGroup::Classifier
        } else if name.starts_with("adapt.") {
            ParamGroup::Adapter
        } else if name.starts_with("pred.") || name.contains(".pred.") {
            ParamGroup::Predictor
        } else if name.contains(".sim.") {
            ParamGroup::Similarity
        } else {
            ParamGroup::Backbone
        }
    }

    pub fn parse(s: &str) -> Option<ParamGroup> {
        match s {
            "backbone" => Some(ParamGroup::Backbone),
            "similarity" => Some(ParamGroup::Similarity),
            "predictor" => Some(ParamGroup::Predictor),
            "adapter" => Some(ParamGroup::Adapter),
            "classifier" => Some(ParamGroup::Classifier),
            _ => None,
        }
    }
}
