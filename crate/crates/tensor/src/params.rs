use std::collections::BTreeMap;

use crate::error::{shape_err, Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Named learnable tensors, iterated in lexicographic name order.
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
        self.tensors
            .get(name)
            .ok_or_else(|| TensorError::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| TensorError::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
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

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Copies every parameter onto `tape` as a gradient-tracking leaf.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), tape.param(k, t.clone())))
            .collect();
        ParamVars { vars }
    }

    /// Copies every parameter onto `tape` as a constant.
    pub fn register_frozen(&self, tape: &mut Tape) -> ParamVars {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| (k.clone(), tape.constant(t.clone())))
            .collect();
        ParamVars { vars }
    }
}

impl FromIterator<(String, Tensor)> for ParamStore {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
        }
    }
}

/// Tape handles for a registered [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::Contract(format!("parameter `{name}` not registered")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    tensors: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Elementwise accumulation; keys missing on either side are carried over.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<()> {
        for (k, g) in &other.tensors {
            match self.tensors.get_mut(k) {
                Some(acc) => {
                    if acc.shape() != g.shape() {
                        return Err(shape_err("Gradients::accumulate", acc.shape(), g.shape()));
                    }
                    acc.add_assign(g)?;
                }
                None => {
                    self.tensors.insert(k.clone(), g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.tensors.values_mut() {
            g.scale_in_place(c);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|t| t.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}
