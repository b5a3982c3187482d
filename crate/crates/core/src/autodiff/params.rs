use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Named model parameters. Iteration is always in sorted-name order so that
/// seeded runs visit parameters identically.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a trainable parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        self.insert_with(name, tensor, true)
    }

    pub fn insert_frozen(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        self.insert_with(name, tensor, false)
    }

    fn insert_with(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Usage(format!("duplicate parameter name {name:?}")));
        }
        self.params.insert(name, Param { tensor, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::Usage(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.tensor)
            .ok_or_else(|| Error::Usage(format!("unknown parameter {name:?}")))
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.params.get(name).is_some_and(|p| p.trainable)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_values(&self) -> usize {
        self.params.values().map(|p| p.tensor.len()).sum()
    }

    pub fn clear_grads(&mut self) {
        for p in self.params.values_mut() {
            p.tensor.clear_grad();
        }
    }

    /// Sets every trainable gradient to zeros of the right shape.
    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            if p.trainable {
                let n = p.tensor.len();
                p.tensor.set_grad(vec![0.0; n]).expect("same length");
            } else {
                p.tensor.clear_grad();
            }
        }
    }

    /// L2 norm over all populated gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .values()
            .filter_map(|p| p.tensor.grad())
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn grads_finite(&self) -> bool {
        self.params
            .values()
            .filter_map(|p| p.tensor.grad())
            .all(|g| g.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_sorted() {
        let mut store = ParamStore::new();
        store.insert("z", Tensor::scalar(1.0)).unwrap();
        store.insert("a", Tensor::scalar(2.0)).unwrap();
        store.insert_frozen("m", Tensor::scalar(3.0)).unwrap();
        assert!(store.insert("a", Tensor::scalar(0.0)).is_err());
        assert_eq!(store.names().collect::<Vec<_>>(), ["a", "m", "z"]);
        assert!(!store.is_trainable("m"));
        assert!(store.get("nope").is_err());
    }

    #[test]
    fn zero_grads_skips_frozen() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(&[2, 2])).unwrap();
        store.insert_frozen("f", Tensor::zeros(&[3])).unwrap();
        store.zero_grads();
        assert_eq!(store.get("w").unwrap().grad(), Some(&[0.0; 4][..]));
        assert!(store.get("f").unwrap().grad().is_none());
        assert_eq!(store.grad_norm(), 0.0);
    }
}
