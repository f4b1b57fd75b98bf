//! Learnable parameters and the registry that owns them.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SspError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a parameter in its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Running statistics and other buffers are registered with `trainable = false`.
    pub trainable: bool,
}

/// Registry of parameters, kept in insertion ("registry") order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        let grad = Tensor::from_parts(value.shape().to_vec(), vec![T::zero(); value.len()]);
        self.params.push(Parameter { name: name.into(), value, grad, trainable });
        ParamId(self.params.len() - 1)
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

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.grad.shape() != grad.shape() {
            return Err(SspError::contract(
                "accumulate_grad",
                format!("gradient shape {:?} does not match parameter '{}' {:?}", grad.shape(), p.name, p.value.shape()),
            ));
        }
        for (acc, &g) in p.grad.data_mut().iter_mut().zip(grad.data()) {
            *acc = *acc + g;
        }
        Ok(())
    }

    /// Number of trainable scalar elements.
    pub fn trainable_elements(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter { name: p.name.clone(), value: p.value.cast(), grad: p.grad.cast(), trainable: p.trainable })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_grad_resets_and_shapes_match() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::full(&[2, 3], 1.0).unwrap(), true);
        store.accumulate_grad(id, &Tensor::full(&[2, 3], 0.5).unwrap()).unwrap();
        assert_eq!(store.get(id).grad.sum(), 3.0);
        assert!(store.accumulate_grad(id, &Tensor::full(&[3, 2], 0.5).unwrap()).is_err());
        store.zero_grad();
        assert!(store.get(id).grad.data().iter().all(|&g| g == 0.0));
        assert_eq!(store.get(id).grad.shape(), store.get(id).value.shape());
    }
}
