//! Named parameter and buffer storage for a model.
//!
//! Trainable parameters carry a gradient tensor of the same shape that the
//! tape accumulates into; buffers (batch-norm running stats) are state the
//! training loop updates directly and are never differentiated.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(pub usize);

pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

pub struct Buffer<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// All learnable state of a model, in registration order.
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    buffers: Vec<Buffer<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), buffers: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::InvalidArg(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value, grad });
        Ok(id)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> BufferId {
        let id = BufferId(self.buffers.len());
        self.buffers.push(Buffer { name: name.into(), value });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
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

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0].value
    }

    pub fn buffers(&self) -> impl Iterator<Item = (BufferId, &Buffer<T>)> {
        self.buffers.iter().enumerate().map(|(i, b)| (BufferId(i), b))
    }

    /// Count of scalar entries across all trainable parameters. This is the
    /// enumeration side of the parameter-accounting check: the analytic
    /// per-layer sums must reproduce this number exactly.
    pub fn total_param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn accumulate_grad(&mut self, id: ParamId, delta: &Tensor<T>) {
        let p = &mut self.params[id.0];
        debug_assert_eq!(p.grad.shape(), delta.shape());
        let g = p.grad.data_mut();
        for (gv, dv) in g.iter_mut().zip(delta.data()) {
            *gv = *gv + *dv;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    /// Sets a parameter value, keeping its gradient (shape must match).
    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape(
                "set_value",
                format!("parameter `{}` shape {} != {}", p.name, p.value.shape(), value.shape()),
            ));
        }
        p.value = value;
        Ok(())
    }
}

/// Fan-in-scaled zero-mean normal init for conv weights: std = sqrt(2/fan_in).
pub fn conv_init_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

pub fn channel_vec<T: Element>(c: usize, v: f64) -> Tensor<T> {
    Tensor::full(Shape::new(1, c, 1, 1), T::from_f64(v))
}
