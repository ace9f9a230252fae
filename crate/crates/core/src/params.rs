use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Ordered collection of named parameter tensors.
///
/// When bound into a graph, parameter `i` becomes the leaf with id
/// `base + i`, which lets two networks share one graph.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Trainable leaves.
    pub fn bind<'g>(&self, g: &'g Graph, base: usize) -> Vec<Var<'g>> {
        self.tensors.iter().enumerate().map(|(i, t)| g.param(t, base + i)).collect()
    }

    /// Constant leaves (no gradient).
    pub fn bind_const<'g>(&self, g: &'g Graph) -> Vec<Var<'g>> {
        self.tensors.iter().map(|t| g.constant(t)).collect()
    }

    /// Replaces tensors from `other` by name; shapes must agree.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let j = other.index_of(name).ok_or_else(|| shape_err!("missing parameter {name}"))?;
            if other.tensors[j].shape() != self.tensors[i].shape() {
                return Err(shape_err!(
                    "parameter {name}: shape {:?} vs {:?}",
                    other.tensors[j].shape(),
                    self.tensors[i].shape()
                ));
            }
            self.tensors[i] = other.tensors[j].clone();
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_finite())
    }
}
