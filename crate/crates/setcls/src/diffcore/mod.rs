//! Dense-tensor numerical kernel with reverse-mode gradients.
//!
//! Everything runs on row-major `f64` tensors. Forward operations are
//! recorded on a [`tape::Tape`]; [`tape::Tape::backward`] replays the tape in
//! reverse to accumulate gradients for every recorded node, including the
//! leaves that mirror model parameters.

pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use crate::Result;

/// A named trainable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape().to_vec());
        Parameter { name: name.into(), value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Ordered parameter store. Order is insertion order and is the canonical
/// order for checkpoints and optimizer state, so training stays
/// deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(crate::Error::Invalid(format!("duplicate parameter name {name:?}")));
        }
        self.params.push(Parameter::new(name, value));
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Parameter {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Parameter {
        &mut self.params[idx]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }
}
