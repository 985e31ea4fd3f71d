//! Align-corners bilinear resampling of `[N, C, H, W]`.

use crate::error::{invalid, shape_err, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Source taps `(lo, hi, frac)` for each output index.
fn taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    (0..output)
        .map(|o| {
            let src = if output > 1 { o as f64 * (input - 1) as f64 / (output - 1) as f64 } else { 0.0 };
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

fn check<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<()> {
    if x.ndim() != 4 {
        return Err(shape_err("bilinear_resize", format!("expected [N,C,H,W], got {:?}", x.shape())));
    }
    if out_h == 0 || out_w == 0 || x.dim(2) == 0 || x.dim(3) == 0 {
        return Err(invalid("bilinear_resize", format!("sizes must be positive: {:?} -> {out_h}x{out_w}", x.shape())));
    }
    Ok(())
}

pub fn bilinear_resize<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    check(x, out_h, out_w)?;
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let mut out = vec![T::zero(); n * c * out_h * out_w];
    for (plane, dst) in x.data().chunks(h * w).zip(out.chunks_mut(out_h * out_w)) {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::lit(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::lit(fx);
                let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
                dst[oy * out_w + ox] = top * (T::one() - fy) + bottom * fy;
            }
        }
    }
    Tensor::new(&[n, c, out_h, out_w], out)
}

/// Mirror the last axis.
pub fn flip_horizontal<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let w = *x.shape().last().unwrap_or(&1);
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(w.max(1)) {
        row.reverse();
    }
    out
}

fn resize_backward<T: Real>(grad: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let (h, w) = (in_shape[2], in_shape[3]);
    let (out_h, out_w) = (grad.dim(2), grad.dim(3));
    if (h, w) == (out_h, out_w) {
        return grad.clone();
    }
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let mut dx = Tensor::zeros(in_shape);
    for (src, plane) in grad.data().chunks(out_h * out_w).zip(dx.data_mut().chunks_mut(h * w)) {
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::lit(fy);
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::lit(fx);
                let g = src[oy * out_w + ox];
                let gt = g * (T::one() - fy);
                let gb = g * fy;
                plane[y0 * w + x0] += gt * (T::one() - fx);
                plane[y0 * w + x1] += gt * fx;
                plane[y1 * w + x0] += gb * (T::one() - fx);
                plane[y1 * w + x1] += gb * fx;
            }
        }
    }
    dx
}

impl<T: Real> Tape<T> {
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = bilinear_resize(self.value(x), out_h, out_w)?;
        Ok(self.push("bilinear_resize", out, vec![x], Box::new(|args| {
            Ok(vec![Some(resize_backward(args.grad, args.inputs[0].shape()))])
        })))
    }
}
