//! ReLU, sigmoid, softmax and softplus.

use crate::error::{shape_err, Result};
use crate::ops::basic::split_axis;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

#[inline]
pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus_scalar<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Inverse of softplus, for initializing a parameter to a target positive value.
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

pub fn softplus<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(softplus_scalar)
}

/// Softmax along `axis`, max-subtracted.
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.ndim() {
        return Err(shape_err("softmax", format!("axis {axis} for shape {:?}", x.shape())));
    }
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let mut out = x.clone();
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let mut m = T::neg_infinity();
            for k in 0..len {
                m = m.max(d[idx(k)]);
            }
            let mut z = T::zero();
            for k in 0..len {
                let e = (d[idx(k)] - m).exp();
                d[idx(k)] = e;
                z += e;
            }
            for k in 0..len {
                d[idx(k)] /= z;
            }
        }
    }
    Ok(out)
}

impl<T: Real> Tape<T> {
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = relu(self.value(a));
        Ok(self.push("relu", out, vec![a], Box::new(|args| {
            Ok(vec![Some(args.grad.zip_map(args.inputs[0], |g, x| if x > T::zero() { g } else { T::zero() })?)])
        })))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = sigmoid(self.value(a));
        Ok(self.push("sigmoid", out, vec![a], Box::new(|args| {
            Ok(vec![Some(args.grad.zip_map(args.output, |g, y| g * y * (T::one() - y))?)])
        })))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out = softplus(self.value(a));
        Ok(self.push("softplus", out, vec![a], Box::new(|args| {
            Ok(vec![Some(args.grad.zip_map(args.inputs[0], |g, x| g * sigmoid_scalar(x))?)])
        })))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = softmax(self.value(a), axis)?;
        let (outer, len, inner) = split_axis(out.shape(), axis);
        Ok(self.push("softmax", out, vec![a], Box::new(move |args| {
            let y = args.output.data();
            let g = args.grad.data();
            let mut gx = Tensor::zeros(args.output.shape());
            let d = gx.data_mut();
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * len + k) * inner + i;
                    let dot: T = (0..len).map(|k| y[idx(k)] * g[idx(k)]).sum();
                    for k in 0..len {
                        d[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                    }
                }
            }
            Ok(vec![Some(gx)])
        })))
    }
}
