use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::graph::Gradients;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BufferId(pub(crate) usize);

/// A learnable tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter<T> {
    name: String,
    value: Arc<Tensor<T>>,
    grad: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn grad(&self) -> &Tensor<T> {
        &self.grad
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

/// Non-learnable persistent state (batch-norm running statistics).
#[derive(Debug, Clone)]
pub struct Buffer<T> {
    name: String,
    value: Arc<Tensor<T>>,
}

impl<T> Buffer<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Param(ParamId),
    Buffer(BufferId),
}

/// Owns every parameter and buffer of a model, addressed by id or by
/// unique dotted name.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    buffers: Vec<Buffer<T>>,
    names: HashMap<String, Slot>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            buffers: Vec::new(),
            names: HashMap::new(),
        }
    }

    fn claim(&mut self, name: &str, slot: Slot) -> Result<()> {
        if self.names.contains_key(name) {
            return Err(TensorError::InvalidArgument {
                op: "ParamStore::add",
                detail: format!("duplicate tensor name {name}"),
            });
        }
        self.names.insert(name.to_string(), slot);
        Ok(())
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        let id = ParamId(self.params.len());
        self.claim(&name, Slot::Param(id))?;
        let grad = Tensor::zeros(value.shape().to_vec());
        self.params.push(Parameter {
            name,
            value: Arc::new(value),
            grad,
        });
        Ok(id)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<BufferId> {
        let name = name.into();
        let id = BufferId(self.buffers.len());
        self.claim(&name, Slot::Buffer(id))?;
        self.buffers.push(Buffer {
            name,
            value: Arc::new(value),
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    pub fn params(&self) -> &[Parameter<T>] {
        &self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn param(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub(crate) fn value_arc(&self, id: ParamId) -> Arc<Tensor<T>> {
        self.params[id.0].value.clone()
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "ParamStore::set_value",
                detail: format!("{}: {:?} vs {:?}", p.name, p.value.shape(), value.shape()),
            });
        }
        p.value = Arc::new(value);
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].value
    }

    pub(crate) fn buffer_arc(&self, id: BufferId) -> Arc<Tensor<T>> {
        self.buffers[id.0].value.clone()
    }

    pub fn set_buffer(&mut self, id: BufferId, value: Tensor<T>) -> Result<()> {
        let b = &mut self.buffers[id.0];
        if b.value.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "ParamStore::set_buffer",
                detail: format!("{}: {:?} vs {:?}", b.name, b.value.shape(), value.shape()),
            });
        }
        b.value = Arc::new(value);
        Ok(())
    }

    pub fn lookup(&self, name: &str) -> Option<Slot> {
        self.names.get(name).copied()
    }

    pub fn find_param(&self, name: &str) -> Option<ParamId> {
        match self.lookup(name) {
            Some(Slot::Param(id)) => Some(id),
            _ => None,
        }
    }

    /// Parameters then buffers, in creation order.
    pub fn named_tensors(&self) -> Vec<(&str, &Tensor<T>)> {
        self.params
            .iter()
            .map(|p| (p.name.as_str(), p.value.as_ref()))
            .chain(self.buffers.iter().map(|b| (b.name.as_str(), b.value.as_ref())))
            .collect()
    }

    /// Replaces the tensor stored under `name`, parameter or buffer.
    pub fn set_named(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        match self.lookup(name) {
            Some(Slot::Param(id)) => self.set_value(id, value),
            Some(Slot::Buffer(id)) => self.set_buffer(id, value),
            None => Err(TensorError::InvalidArgument {
                op: "ParamStore::set_named",
                detail: format!("no tensor named {name}"),
            }),
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }

    /// Adds the parameter gradients of one backward pass into `grad`.
    pub fn accumulate(&mut self, grads: &Gradients<T>) -> Result<()> {
        for (id, g) in grads.params() {
            let p = &mut self.params[id.0];
            if !g.all_finite() {
                return Err(TensorError::NonFiniteGradient {
                    name: p.name.clone(),
                });
            }
            p.grad.add_assign(g)?;
        }
        Ok(())
    }

    /// Overwrites the accumulated gradient of one parameter.
    pub fn set_grad(&mut self, id: ParamId, grad: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if grad.shape() != p.value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "ParamStore::set_grad",
                detail: format!("{:?} for {} {:?}", grad.shape(), p.name, p.value.shape()),
            });
        }
        p.grad = grad;
        Ok(())
    }

    pub fn apply_buffer_updates(&mut self, updates: Vec<(BufferId, Tensor<T>)>) -> Result<()> {
        for (id, value) in updates {
            self.set_buffer(id, value)?;
        }
        Ok(())
    }

    /// Sets every parameter whose name satisfies `pred` to zero; returns how
    /// many tensors were touched.
    pub fn zero_where(&mut self, pred: impl Fn(&str) -> bool) -> usize {
        let mut count = 0;
        for p in &mut self.params {
            if pred(&p.name) {
                Arc::make_mut(&mut p.value).data_mut().fill(T::zero());
                count += 1;
            }
        }
        count
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: Arc::new(p.value.cast()),
                    grad: p.grad.cast(),
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| Buffer {
                    name: b.name.clone(),
                    value: Arc::new(b.value.cast()),
                })
                .collect(),
            names: self.names.clone(),
        }
    }
}
