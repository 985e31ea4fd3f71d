//! Fully connected layer `y = x W^T + b`.

use crate::error::{shape_err, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

fn check<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<(usize, usize, usize)> {
    if input.ndim() != 2 || weight.ndim() != 2 {
        return Err(shape_err(
            "linear",
            format!("expected input [N,F_in] and weight [F_out,F_in], got {:?} and {:?}", input.shape(), weight.shape()),
        ));
    }
    let (n, fin) = (input.dim(0), input.dim(1));
    let fout = weight.dim(0);
    if weight.dim(1) != fin {
        return Err(shape_err("linear", format!("F_in: input has {fin}, weight has {}", weight.dim(1))));
    }
    if let Some(b) = bias {
        if b.shape() != [fout] {
            return Err(shape_err("linear", format!("F_out: weight has {fout}, bias shape {:?}", b.shape())));
        }
    }
    Ok((n, fin, fout))
}

pub fn linear<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (n, fin, fout) = check(input, weight, bias)?;
    let mut out = vec![T::zero(); n * fout];
    if let Some(b) = bias {
        for row in out.chunks_mut(fout) {
            row.copy_from_slice(b.data());
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    T::gemm(false, true, n, fout, fin, T::one(), input.data(), weight.data(), beta, &mut out);
    Tensor::new(&[n, fout], out)
}

impl<T: Real> Tape<T> {
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let out = linear(self.value(input), self.value(weight), bias.map(|b| self.value(b)))?;
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push("linear", out, inputs, Box::new(|args| {
            let (x, w) = (args.inputs[0], args.inputs[1]);
            let (n, fin, fout) = (x.dim(0), x.dim(1), w.dim(0));
            let g = args.grad.data();
            let gx = if args.needs[0] {
                let mut d = vec![T::zero(); n * fin];
                T::gemm(false, false, n, fin, fout, T::one(), g, w.data(), T::zero(), &mut d);
                Some(Tensor::new(x.shape(), d)?)
            } else {
                None
            };
            let gw = if args.needs[1] {
                let mut d = vec![T::zero(); fout * fin];
                T::gemm(true, false, fout, fin, n, T::one(), g, x.data(), T::zero(), &mut d);
                Some(Tensor::new(w.shape(), d)?)
            } else {
                None
            };
            let mut grads = vec![gx, gw];
            if args.inputs.len() == 3 {
                let mut db = vec![T::zero(); fout];
                for row in g.chunks(fout) {
                    for (a, &b) in db.iter_mut().zip(row) {
                        *a += b;
                    }
                }
                grads.push(Some(Tensor::new(&[fout], db)?));
            }
            Ok(grads)
        })))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weight() {
        let x = Tensor::from_vec(&[1, 2], vec![1.0f64, 2.0]);
        let w = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let b = Tensor::zeros(&[2]);
        assert_eq!(linear(&x, &w, Some(&b)).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn weighted_sum_plus_bias() {
        let x = Tensor::from_vec(&[1, 2], vec![1.0f64, 1.0]);
        let w = Tensor::from_vec(&[1, 2], vec![2.0, 3.0]);
        let b = Tensor::from_vec(&[1], vec![5.0]);
        assert_eq!(linear(&x, &w, Some(&b)).unwrap().data(), &[10.0]);
    }

    #[test]
    fn inner_dimension_mismatch() {
        let x = Tensor::<f64>::zeros(&[2, 3]);
        let w = Tensor::<f64>::zeros(&[4, 5]);
        let err = linear(&x, &w, None).unwrap_err().to_string();
        assert!(err.contains("F_in"), "{err}");
    }
}
