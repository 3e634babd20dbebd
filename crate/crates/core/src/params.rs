//! Named parameter storage shared by networks, the optimizer and checkpoints.

use std::collections::BTreeMap;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub trainable: bool,
}

/// Parameters keyed by slash-separated names such as `base/block1/conv1/weight`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Param>,
}

/// Trainable parameters bound onto a tape during one forward pass.
pub type Bindings = Vec<(String, Var)>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) {
        self.map.insert(name.into(), Param { value, trainable });
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.map.retain(|k, _| !k.starts_with(prefix));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.map.get(name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Scalar count over parameters whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, p)| p.value.len())
            .sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.value.len()).sum()
    }

    /// Sets every flag to `pred(name)`.
    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for (k, p) in self.map.iter_mut() {
            p.trainable = pred(k);
        }
    }

    /// Records `name` on the tape; trainable parameters are added to `bound`.
    pub fn bind(&self, tape: &mut Tape, name: &str, bound: &mut Bindings) -> Result<Var> {
        let p = self
            .map
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        let var = tape.leaf(p.value.clone(), p.trainable);
        if p.trainable {
            bound.push((name.to_string(), var));
        }
        Ok(var)
    }
}
