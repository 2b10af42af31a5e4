use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape4, Tensor};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

/// A named tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter<T: Real = f32> {
    name: String,
    value: Tensor<T>,
    grad: Tensor<T>,
    trainable: bool,
}

impl<T: Real> Parameter<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn grad(&self) -> &Tensor<T> {
        &self.grad
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    pub fn shape(&self) -> Shape4 {
        self.value.shape()
    }

    /// Replaces the value; the shape must not change.
    pub fn set_value(&mut self, value: Tensor<T>) -> Result<()> {
        value.expect_shape("Parameter::set_value", self.value.shape())?;
        self.value = value;
        Ok(())
    }

    pub fn value_mut(&mut self) -> &mut [T] {
        self.value.data_mut()
    }

    pub(crate) fn value_and_grad_mut(&mut self) -> (&mut [T], &[T]) {
        (self.value.data_mut(), self.grad.data())
    }

    pub fn accumulate_grad(&mut self, g: &Tensor<T>) -> Result<()> {
        self.grad.add_assign(g)
    }

    pub fn zero_grad(&mut self) {
        self.grad = Tensor::zeros(self.value.shape());
    }
}

/// Ordered collection of uniquely named parameters.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real = f32> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            grad: Tensor::zeros(value.shape()),
            value,
            trainable,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    /// Total number of scalar values over trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Sets every parameter value (trainable or not) to zero.
    pub fn zero_values(&mut self) {
        for p in &mut self.params {
            p.value = Tensor::zeros(p.value.shape());
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut store = ParamStore::<f32>::new();
        let s = Shape4::new(1, 1, 1, 2).unwrap();
        store.insert("a.w", Tensor::zeros(s), true).unwrap();
        assert!(store.insert("a.w", Tensor::zeros(s), true).is_err());
        assert_eq!(store.id("a.w"), Some(ParamId(0)));
    }

    #[test]
    fn grad_tracks_value_shape() {
        let mut store = ParamStore::<f32>::new();
        let s = Shape4::new(2, 1, 1, 3).unwrap();
        let id = store.insert("p", Tensor::ones(s), true).unwrap();
        assert_eq!(store.get(id).grad().shape(), s);
        assert!(store.get_mut(id).set_value(Tensor::zeros(Shape4::scalar())).is_err());
    }
}
