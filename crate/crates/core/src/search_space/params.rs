use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Named parameter tensors of one network, in registration order.
///
/// The flattened view concatenates the tensors in that order; it is the
/// vector space all gradient algebra (inner products, updates) works in.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NetworkParams {
    entries: IndexMap<String, Tensor>,
}

/// Graph handles for every tensor of a [`NetworkParams`], index-aligned.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn get(&self, index: usize) -> Var {
        self.vars[index]
    }

    pub fn as_slice(&self) -> &[Var] {
        &self.vars
    }
}

impl NetworkParams {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor and returns its index. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let (index, _) = self.entries.insert_full(name, value);
        Ok(index)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn by_index(&self, index: usize) -> &Tensor {
        &self.entries[index]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for t in self.entries.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Overwrites every tensor from a flat vector produced by [`flatten`](Self::flatten).
    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::Shape(format!(
                "flat parameter vector has {} values, network has {}",
                flat.len(),
                self.numel()
            )));
        }
        let mut offset = 0;
        for t in self.entries.values_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        out.unflatten(flat)?;
        Ok(out)
    }

    pub fn register(&self, g: &mut Graph) -> ParamVars {
        ParamVars {
            vars: self.entries.values().map(|t| g.leaf(t.clone())).collect(),
        }
    }

    /// Flattened gradient in the same order as [`flatten`](Self::flatten).
    pub fn flat_gradient(&self, grads: &Gradients, vars: &ParamVars) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for (t, &v) in self.entries.values().zip(&vars.vars) {
            match grads.get(v) {
                Some(gt) => out.extend_from_slice(gt.data()),
                None => out.extend(std::iter::repeat_n(0.0, t.numel())),
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn flatten_round_trips(values in proptest::collection::vec(-1e6f64..1e6, 7)) {
            let mut p = NetworkParams::new();
            p.insert("a", Tensor::zeros(vec![2, 2])).unwrap();
            p.insert("b", Tensor::zeros(vec![3])).unwrap();
            p.unflatten(&values).unwrap();
            prop_assert_eq!(p.flatten(), values);
            prop_assert_eq!(p.get("b").unwrap().data(), &p.flatten()[4..]);
        }
    }

    #[test]
    fn rejects_duplicates_and_bad_lengths() {
        let mut p = NetworkParams::new();
        p.insert("a", Tensor::zeros(vec![2])).unwrap();
        assert!(p.insert("a", Tensor::zeros(vec![1])).is_err());
        assert!(p.unflatten(&[1.0]).is_err());
    }
}
