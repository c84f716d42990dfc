use std::collections::HashMap;

use super::{Graph, Tensor, TensorError, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable tensors. Every use of a parameter in a forward pass reads
/// the same storage; gradients from all uses accumulate in one buffer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId, TensorError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(self.values.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
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

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// One differentiable leaf per parameter, indexed by `ParamId`.
    pub fn leaves(&self, g: &mut Graph) -> Vec<Var> {
        self.values.iter().map(|t| g.variable(t.clone())).collect()
    }

    /// Gradients of `leaves` after a backward pass; zeros where nothing flowed.
    pub fn collect_grads(&self, g: &Graph, leaves: &[Var]) -> Vec<Vec<f64>> {
        leaves
            .iter()
            .zip(&self.values)
            .map(|(v, t)| g.grad_slice(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect()
    }

    /// Replaces values with those of `other` for every matching name.
    ///
    /// All parameters must be present with identical shapes.
    pub fn load_from<'a>(&mut self, records: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<(), TensorError> {
        let mut seen = vec![false; self.values.len()];
        for (name, t) in records {
            let Some(&i) = self.index.get(name) else { continue };
            if self.values[i].shape() != t.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "load parameter",
                    left: self.values[i].shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            self.values[i] = t.clone();
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(TensorError::MissingParam(self.names[i].clone()));
        }
        Ok(())
    }
}
