//! Named weight tensors paired with gradient slots.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle into a [`ParameterStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Ordered, uniquely named collection of weights and their gradients.
///
/// Insertion order is the iteration order and the checkpoint record order.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name:?}")));
        }
        let grad = Tensor::zeros(value.shape());
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, value, grad });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].grad
    }

    /// Borrow a weight immutably and its gradient slot mutably.
    pub fn split_mut(&mut self, id: ParamId) -> (&Tensor<T>, &mut Tensor<T>) {
        let p = &mut self.params[id.0];
        (&p.value, &mut p.grad)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad.fill(T::zero()));
    }

    /// Total scalar count over all weights.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        ParameterStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Replace every weight with the same-named tensor from `other`.
    pub fn load_values(&mut self, other: impl IntoIterator<Item = (String, Tensor<T>)>) -> Result<()> {
        let mut seen = vec![false; self.params.len()];
        for (name, value) in other {
            let id = self
                .id(&name)
                .ok_or_else(|| Error::Config(format!("unexpected parameter {name:?}")))?;
            let p = &mut self.params[id.0];
            if p.value.shape() != value.shape() {
                return Err(Error::Config(format!(
                    "parameter {name:?} has shape {:?}, expected {:?}",
                    value.shape(),
                    p.value.shape()
                )));
            }
            p.value = value;
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Config(format!(
                "missing parameter {:?}",
                self.params[i].name
            )));
        }
        Ok(())
    }
}

/// Exact total scalar count of a store.
pub fn param_count<T: Scalar>(params: &ParameterStore<T>) -> usize {
    params.count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counting() {
        let mut s = ParameterStore::<f32>::new();
        assert_eq!(param_count(&s), 0);
        s.add("w", Tensor::zeros(&[3, 4])).unwrap();
        s.add("b", Tensor::zeros(&[4])).unwrap();
        assert_eq!(param_count(&s), 16);
    }

    #[test]
    fn names_are_unique_and_ordered() {
        let mut s = ParameterStore::<f64>::new();
        s.add("b", Tensor::zeros(&[1])).unwrap();
        s.add("a", Tensor::zeros(&[1])).unwrap();
        assert!(s.add("a", Tensor::zeros(&[2])).is_err());
        let names: Vec<_> = s.iter().map(|p| p.name.as_str()).collect();
        assert_eq!(names, ["b", "a"]);
    }

    #[test]
    fn load_values_checks_names_and_shapes() {
        let mut s = ParameterStore::<f64>::new();
        s.add("w", Tensor::zeros(&[2])).unwrap();
        assert!(s.load_values([("w".to_string(), Tensor::zeros(&[3]))]).is_err());
        assert!(s.load_values([("v".to_string(), Tensor::zeros(&[2]))]).is_err());
        assert!(s.load_values(Vec::new()).is_err());
        s.load_values([("w".to_string(), Tensor::full(&[2], 1.0))]).unwrap();
        assert_eq!(s.value(s.id("w").unwrap()).data(), &[1.0, 1.0]);
    }
}
