use std::collections::BTreeMap;

use super::{SeededRng, Tensor};
use crate::error::{Error, Result};

/// Named learnable tensors, enumerated in lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        self.tensors.insert(name, tensor.with_requires_grad(true));
        Ok(())
    }

    /// Truncated-normal weight (std in the argument, cut at two sigma).
    pub fn init_normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut SeededRng,
    ) -> Result<()> {
        let t = Tensor::from_fn(shape, |_| rng.truncated_normal(std));
        self.insert(name, t)
    }

    pub fn init_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn init_ones(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::ones(shape))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::config(format!("unknown parameter `{name}`")))
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

    /// Total scalar count over all tensors.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn zero_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::zero_grad);
    }

    pub fn clear_grads(&mut self) {
        self.tensors.values_mut().for_each(Tensor::clear_grad);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_sorted() {
        let mut p = ParameterSet::new();
        p.init_zeros("b.weight", &[2]).unwrap();
        p.init_zeros("a.bias", &[1]).unwrap();
        p.init_zeros("blocks.10.w", &[1]).unwrap();
        p.init_zeros("blocks.2.w", &[1]).unwrap();
        assert!(p.init_zeros("a.bias", &[1]).is_err());
        let names: Vec<_> = p.names().collect();
        assert_eq!(names, ["a.bias", "b.weight", "blocks.10.w", "blocks.2.w"]);
        assert!(p.iter().all(|(_, t)| t.requires_grad()));
    }
}
