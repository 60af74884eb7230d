use std::sync::Arc;

use indexmap::IndexMap;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Named trainable tensors in a fixed insertion order.
///
/// The order is part of the model's identity: flattening, checkpoints and
/// optimizer state all follow it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: IndexMap<String, Arc<Tensor>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name, Arc::new(value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|t| t.as_ref())
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    /// Mutable access; clones the storage only if a graph still shares it.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(Arc::make_mut)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries
            .iter_mut()
            .map(|(k, v)| (k.as_str(), Arc::make_mut(v)))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }

    pub fn scalar_count_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// All scalars concatenated in parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.scalar_count());
        for t in self.entries.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of [`ParamSet::flatten`].
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.scalar_count() {
            return Err(Error::dim("assign_flat", &[self.scalar_count()], &[flat.len()]));
        }
        let mut offset = 0;
        for t in self.entries.values_mut() {
            let t = Arc::make_mut(t);
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Registers every tensor as a trainable leaf of `graph` without copying.
    pub fn bind(&self, graph: &mut Graph, requires_grad: bool) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), graph.leaf_shared(Arc::clone(v), requires_grad)))
            .collect();
        BoundParams { vars }
    }
}

/// Graph handles for a bound [`ParamSet`], same order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter `{name}` is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradients of all bound parameters after `graph.backward`, in order.
    pub fn grads(&self, graph: &Graph) -> Result<Vec<Tensor>> {
        self.vars
            .iter()
            .map(|(name, &v)| {
                graph
                    .grad(v)
                    .cloned()
                    .ok_or_else(|| Error::Contract(format!("no gradient for `{name}`")))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_round_trips_in_insertion_order() {
        let mut p = ParamSet::new();
        p.insert("b", Tensor::row(&[1.0, 2.0])).unwrap();
        p.insert("a", Tensor::scalar(3.0)).unwrap();
        assert_eq!(p.flatten(), vec![1.0, 2.0, 3.0]);
        p.assign_flat(&[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(p.get("a").unwrap().data(), &[6.0]);
        assert!(p.assign_flat(&[1.0]).is_err());
        assert!(p.insert("a", Tensor::scalar(0.0)).is_err());
    }

    #[test]
    fn bound_params_share_storage_until_mutated() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::row(&[1.0])).unwrap();
        let mut g = Graph::new();
        let bound = p.bind(&mut g, true);
        p.get_mut("w").unwrap().data_mut()[0] = 9.0;
        assert_eq!(g.value(bound.var("w").unwrap()).data(), &[1.0]);
        assert_eq!(p.get("w").unwrap().data(), &[9.0]);
    }
}
