//! Momentum SGD with weight decay folded into the gradient.

use crate::error::{shape_err, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

pub const MOMENTUM: f64 = 0.9;
pub const SEG_WEIGHT_DECAY: f64 = 1e-4;
pub const CIFAR_WEIGHT_DECAY: f64 = 5e-4;

#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, buffers: Vec::new() }
    }

    pub fn buffer(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.buffers.get(id.0).and_then(Option::as_ref)
    }

    /// One update of a single tensor: `g += wd p; v = m v + g; p -= lr v`.
    pub fn update(&mut self, slot: usize, param: &mut Tensor<T>, grad: &Tensor<T>, lr: f64) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(shape_err("sgd_step", format!("param {:?} vs grad {:?}", param.shape(), grad.shape())));
        }
        if self.buffers.len() <= slot {
            self.buffers.resize(slot + 1, None);
        }
        let buf = self.buffers[slot].get_or_insert_with(|| Tensor::zeros(param.shape()));
        let (m, wd, lr) = (T::lit(self.momentum), T::lit(self.weight_decay), T::lit(lr));
        for ((p, &g), v) in param.data_mut().iter_mut().zip(grad.data()).zip(buf.data_mut()) {
            let g = g + wd * *p;
            *v = m * *v + g;
            *p -= lr * *v;
        }
        Ok(())
    }

    /// Applies gradients from [`crate::nn::Forward::param_grads`].
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) -> Result<()> {
        for (id, g) in grads {
            self.update(id.0, store.get_mut(*id), g, lr)?;
        }
        Ok(())
    }
}
