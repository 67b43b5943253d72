use std::collections::HashMap;

use crate::error::{NeuralError, Result};
use crate::graph::{Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Named trainable tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Ordered, name-unique collection of parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NeuralError::DuplicateParameter(name));
        }
        let id = self.params.len();
        let grad = Tensor::zeros(value.shape());
        self.index.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.id(name).map(|id| &mut self.params[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Records every parameter on `tape` as a trainable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Vec<Var<'t, T>> {
        self.params.iter().map(|p| tape.param(p.value.clone())).collect()
    }

    /// Records every parameter as a constant (inference, no gradients kept).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> Vec<Var<'t, T>> {
        self.params.iter().map(|p| tape.constant(p.value.clone())).collect()
    }

    /// Adds the tape's leaf gradients for `vars` (from [`ParamStore::bind`])
    /// into the parameter gradient accumulators.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>, vars: &[Var<'_, T>]) {
        for (p, v) in self.params.iter_mut().zip(vars) {
            if let Some(g) = tape.grad(*v) {
                p.grad.add_assign(&g);
            }
        }
    }

    /// Replaces values by name; every incoming name must exist with the same
    /// shape.
    pub fn load_values(&mut self, values: Vec<(String, Tensor<T>)>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(NeuralError::Format(format!(
                "expected {} parameters, found {}",
                self.params.len(),
                values.len()
            )));
        }
        for (name, value) in values {
            let id = self
                .id(&name)
                .ok_or_else(|| NeuralError::UnknownParameter(name.clone()))?;
            let p = &mut self.params[id.0];
            if p.value.shape() != value.shape() {
                return Err(NeuralError::Shape(format!(
                    "parameter `{name}` has shape {:?}, checkpoint holds {:?}",
                    p.value.shape(),
                    value.shape()
                )));
            }
            p.value = value;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}
