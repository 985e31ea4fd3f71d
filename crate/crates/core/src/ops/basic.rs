//! Elementwise arithmetic, reductions and layout changes.

use crate::error::{shape_err, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Splits `shape` around `axis` into (outer, axis_len, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Row-wise L2 normalization. Rows with zero norm map to zero and are
/// reported in the returned flags.
pub fn l2_normalize_rows<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<bool>)> {
    if x.ndim() != 2 {
        return Err(shape_err("l2_normalize", format!("expected [N,F], got {:?}", x.shape())));
    }
    let (n, f) = (x.dim(0), x.dim(1));
    let mut out = Tensor::zeros(x.shape());
    let mut zero_rows = vec![false; n];
    for r in 0..n {
        let row = &x.data()[r * f..(r + 1) * f];
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm == T::zero() {
            zero_rows[r] = true;
            continue;
        }
        for (o, &v) in out.data_mut()[r * f..(r + 1) * f].iter_mut().zip(row) {
            *o = v / norm;
        }
    }
    Ok((out, zero_rows))
}

impl<T: Real> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push("add", out, vec![a, b], Box::new(|args| {
            Ok(vec![Some(args.grad.clone()), Some(args.grad.clone())])
        })))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push("sub", out, vec![a, b], Box::new(|args| {
            Ok(vec![Some(args.grad.clone()), Some(args.grad.scale(-T::one()))])
        })))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push("mul", out, vec![a, b], Box::new(|args| {
            let ga = if args.needs[0] { Some(args.grad.zip_map(args.inputs[1], |g, y| g * y)?) } else { None };
            let gb = if args.needs[1] { Some(args.grad.zip_map(args.inputs[0], |g, x| g * x)?) } else { None };
            Ok(vec![ga, gb])
        })))
    }

    /// Scalar-times-tensor, the only broadcast the engine supports.
    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let out = self.value(a).scale(factor);
        Ok(self.push("scale", out, vec![a], Box::new(move |args| Ok(vec![Some(args.grad.scale(factor))]))))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        Ok(self.push("sum_all", out, vec![a], Box::new(|args| {
            let g = args.grad.item();
            Ok(vec![Some(Tensor::full(args.inputs[0].shape(), g))])
        })))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let s = self.sum_all(a)?;
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.ndim() {
            return Err(shape_err("sum_axis", format!("axis {axis} for shape {:?}", x.shape())));
        }
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &x.data()[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let out = Tensor::from_vec(&shape, out);
        Ok(self.push("sum_axis", out, vec![a], Box::new(move |args| {
            let mut g = Tensor::zeros(args.inputs[0].shape());
            let gd = g.data_mut();
            for o in 0..outer {
                for k in 0..len {
                    gd[(o * len + k) * inner..(o * len + k + 1) * inner]
                        .copy_from_slice(&args.grad.data()[o * inner..(o + 1) * inner]);
                }
            }
            Ok(vec![Some(g)])
        })))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push("reshape", out, vec![a], Box::new(|args| {
            Ok(vec![Some(args.grad.clone().reshape(args.inputs[0].shape())?)])
        })))
    }

    /// `[N, A, B] -> [N, B, A]`.
    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.ndim() != 3 {
            return Err(shape_err("transpose_last2", format!("expected 3 dims, got {:?}", x.shape())));
        }
        let (n, ra, rb) = (x.dim(0), x.dim(1), x.dim(2));
        let out = Tensor::from_vec(&[n, rb, ra], transpose_batched(x.data(), n, ra, rb));
        Ok(self.push("transpose_last2", out, vec![a], Box::new(move |args| {
            Ok(vec![Some(Tensor::from_vec(&[n, ra, rb], transpose_batched(args.grad.data(), n, rb, ra)))])
        })))
    }

    /// Mean over every axis after the channel axis: `[N, C, ...] -> [N, C]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.ndim() < 2 {
            return Err(shape_err("global_avg_pool", format!("expected [N,C,...], got {:?}", x.shape())));
        }
        let (n, c) = (x.dim(0), x.dim(1));
        let spatial = x.len() / (n * c).max(1);
        let inv = T::one() / T::lit(spatial as f64);
        let out: Vec<T> = x.data().chunks(spatial).map(|ch| ch.iter().copied().sum::<T>() * inv).collect();
        let out = Tensor::from_vec(&[n, c], out);
        Ok(self.push("global_avg_pool", out, vec![a], Box::new(move |args| {
            let mut g = Tensor::zeros(args.inputs[0].shape());
            for (chunk, &go) in g.data_mut().chunks_mut(spatial).zip(args.grad.data()) {
                chunk.fill(go * inv);
            }
            Ok(vec![Some(g)])
        })))
    }

    /// Channel-wise multiplication `Y[n,c,...] = X[n,c,...] * gate[n,c]`.
    pub fn scale_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        let xv = self.value(x);
        let gv = self.value(gate);
        if xv.ndim() < 2 || gv.shape() != &xv.shape()[..2] {
            return Err(shape_err(
                "scale_channels",
                format!("featuremap {:?} vs gate {:?}", xv.shape(), gv.shape()),
            ));
        }
        let spatial = xv.len() / gv.len().max(1);
        let mut out = xv.clone();
        for (chunk, &g) in out.data_mut().chunks_mut(spatial).zip(gv.data()) {
            for v in chunk {
                *v *= g;
            }
        }
        Ok(self.push("scale_channels", out, vec![x, gate], Box::new(move |args| {
            let (xv, gv) = (args.inputs[0], args.inputs[1]);
            let gx = if args.needs[0] {
                let mut gx = args.grad.clone();
                for (chunk, &g) in gx.data_mut().chunks_mut(spatial).zip(gv.data()) {
                    for v in chunk {
                        *v *= g;
                    }
                }
                Some(gx)
            } else {
                None
            };
            let gg = if args.needs[1] {
                let data = args
                    .grad
                    .data()
                    .chunks(spatial)
                    .zip(xv.data().chunks(spatial))
                    .map(|(go, xs)| go.iter().zip(xs).map(|(&a, &b)| a * b).sum())
                    .collect();
                Some(Tensor::from_vec(gv.shape(), data))
            } else {
                None
            };
            Ok(vec![gx, gg])
        })))
    }

    /// Row-wise L2 normalization of `[N, F]`; zero rows stay zero.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let (out, _) = l2_normalize_rows(self.value(a))?;
        Ok(self.push("l2_normalize", out, vec![a], Box::new(|args| {
            let x = args.inputs[0];
            let y = args.output;
            let f = x.dim(1);
            let mut g = Tensor::zeros(x.shape());
            for r in 0..x.dim(0) {
                let xs = &x.data()[r * f..(r + 1) * f];
                let norm = xs.iter().map(|&v| v * v).sum::<T>().sqrt();
                if norm == T::zero() {
                    continue;
                }
                let ys = &y.data()[r * f..(r + 1) * f];
                let gs = &args.grad.data()[r * f..(r + 1) * f];
                let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                for ((o, &yv), &gv) in g.data_mut()[r * f..(r + 1) * f].iter_mut().zip(ys).zip(gs) {
                    *o = (gv - yv * dot) / norm;
                }
            }
            Ok(vec![Some(g)])
        })))
    }
}

pub(crate) fn transpose_batched<T: Real>(data: &[T], n: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for b in 0..n {
        let src = &data[b * rows * cols..(b + 1) * rows * cols];
        let dst = &mut out[b * rows * cols..(b + 1) * rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l2_normalize_three_four_five() {
        let x = Tensor::from_vec(&[1, 2], vec![3.0f64, 4.0]);
        let (y, zero) = l2_normalize_rows(&x).unwrap();
        assert_eq!(y.data(), &[0.6, 0.8]);
        assert_eq!(zero, vec![false]);
    }

    #[test]
    fn l2_normalize_zero_row_flagged() {
        let x = Tensor::<f64>::zeros(&[2, 3]);
        let (y, zero) = l2_normalize_rows(&x).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert_eq!(zero, vec![true, true]);
    }

    #[test]
    fn sum_axis_middle() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::from_fn(&[2, 3, 2], |i| i as f64));
        let s = tape.sum_axis(a, 1).unwrap();
        assert_eq!(tape.value(s).shape(), &[2, 2]);
        assert_eq!(tape.value(s).data(), &[6.0, 9.0, 24.0, 27.0]);
    }

    #[test]
    fn transpose_round_trip() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let t = tape.transpose_last2(a).unwrap();
        let tt = tape.transpose_last2(t).unwrap();
        assert_eq!(tape.value(tt), tape.value(a));
        assert_eq!(tape.value(t).at(&[1, 2, 0]), tape.value(a).at(&[1, 0, 2]));
    }

    #[test]
    fn scale_channels_rejects_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(&[2, 3, 4, 4]));
        let g = tape.param(Tensor::zeros(&[2, 4]));
        assert!(tape.scale_channels(x, g).is_err());
    }
}
