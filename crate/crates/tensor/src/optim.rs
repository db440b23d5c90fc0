//! Stochastic gradient descent with heavy-ball momentum.

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::scalar::{cast, Scalar};
use crate::tensor::Tensor;

/// SGD with coupled weight decay:
/// `v <- m * v + (g + wd * p)`, `p <- p - lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Momentum buffers, one per parameter in store order (empty before the
    /// first step).
    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<Tensor<T>>) {
        self.velocity = velocity;
    }

    /// Applies one update from the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = store.params().iter().map(|p| Tensor::zeros(p.value().shape().to_vec())).collect();
        }
        if self.velocity.len() != store.len() {
            return Err(TensorError::InvalidArgument {
                op: "sgd_step",
                detail: format!("{} momentum buffers for {} parameters", self.velocity.len(), store.len()),
            });
        }
        let (lr, m, wd) = (cast::<T>(self.lr), cast::<T>(self.momentum), cast::<T>(self.weight_decay));
        let ids: Vec<_> = store.ids().collect();
        for (id, v) in ids.into_iter().zip(self.velocity.iter_mut()) {
            let p = store.param(id);
            if v.shape() != p.value().shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "sgd_step",
                    detail: format!("momentum {:?} for {} {:?}", v.shape(), p.name(), p.value().shape()),
                });
            }
            for ((vi, &gi), &pi) in v.data_mut().iter_mut().zip(p.grad().data()).zip(p.value().data()) {
                *vi = m * *vi + (gi + wd * pi);
            }
            if lr == T::zero() {
                continue;
            }
            for (pi, &vi) in store.value_mut(id).data_mut().iter_mut().zip(v.data()) {
                *pi -= lr * vi;
            }
        }
        Ok(())
    }
}
