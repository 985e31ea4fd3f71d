//! Per-pixel cross-entropy and binary cross-entropy.

use crate::error::{invalid, shape_err, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Lower clamp for probabilities inside logarithms.
pub const LOG_EPS: f64 = 1e-12;

fn prob_eps<T: Real>() -> T {
    T::lit(LOG_EPS).max(T::epsilon())
}

fn ce_layout<T: Real>(logits: &Tensor<T>, target: &[i32], ignore: i32) -> Result<(usize, usize, usize)> {
    if logits.ndim() != 4 {
        return Err(shape_err("cross_entropy_2d", format!("logits must be [N,Cls,H,W], got {:?}", logits.shape())));
    }
    let (n, cls) = (logits.dim(0), logits.dim(1));
    let plane = logits.dim(2) * logits.dim(3);
    if target.len() != n * plane {
        return Err(shape_err("cross_entropy_2d", format!("target has {} labels, logits cover {}", target.len(), n * plane)));
    }
    if let Some(&bad) = target.iter().find(|&&t| t != ignore && (t < 0 || t as usize >= cls)) {
        return Err(invalid("cross_entropy_2d", format!("label {bad} outside [0, {cls}) and not the ignore label {ignore}")));
    }
    Ok((n, cls, plane))
}

/// Per-pixel (softmax, loss) pairs; `None` for ignored pixels.
fn ce_terms<T: Real>(logits: &Tensor<T>, target: &[i32], ignore: i32) -> Result<(T, usize)> {
    let (n, cls, plane) = ce_layout(logits, target, ignore)?;
    let d = logits.data();
    let mut total = T::zero();
    let mut count = 0;
    for b in 0..n {
        for p in 0..plane {
            let t = target[b * plane + p];
            if t == ignore {
                continue;
            }
            let at = |k: usize| d[(b * cls + k) * plane + p];
            let m = (0..cls).map(at).fold(T::neg_infinity(), T::max);
            let lse = m + (0..cls).map(|k| (at(k) - m).exp()).sum::<T>().ln();
            total += lse - at(t as usize);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::AllIgnored);
    }
    Ok((total / T::lit(count as f64), count))
}

/// Mean cross-entropy over non-ignored pixels. `target` is `[N, H, W]` flattened.
pub fn cross_entropy_2d<T: Real>(logits: &Tensor<T>, target: &[i32], ignore_label: i32) -> Result<T> {
    Ok(ce_terms(logits, target, ignore_label)?.0)
}

fn bce_check<T: Real>(probs: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    probs.expect_same_shape(target, "binary_cross_entropy")?;
    if probs.is_empty() {
        return Err(invalid("binary_cross_entropy", "empty input"));
    }
    Ok(())
}

/// `-mean(t log p + (1 - t) log(1 - p))` with `p` clamped to `[eps, 1 - eps]`.
pub fn binary_cross_entropy<T: Real>(probs: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    bce_check(probs, target)?;
    let eps = prob_eps::<T>();
    let hi = T::one() - eps;
    let total: T = probs
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let p = p.max(eps).min(hi);
            -(t * p.ln() + (T::one() - t) * (T::one() - p).ln())
        })
        .sum();
    Ok(total / T::lit(probs.len() as f64))
}

impl<T: Real> Tape<T> {
    pub fn cross_entropy_2d(&mut self, logits: Var, target: &[i32], ignore_label: i32) -> Result<Var> {
        let (loss, count) = ce_terms(self.value(logits), target, ignore_label)?;
        let target = target.to_vec();
        Ok(self.push("cross_entropy_2d", Tensor::scalar(loss), vec![logits], Box::new(move |args| {
            let x = args.inputs[0];
            let (n, cls) = (x.dim(0), x.dim(1));
            let plane = x.dim(2) * x.dim(3);
            let scale = args.grad.item() / T::lit(count as f64);
            let d = x.data();
            let mut gx = Tensor::zeros(x.shape());
            let g = gx.data_mut();
            for b in 0..n {
                for p in 0..plane {
                    let t = target[b * plane + p];
                    if t == ignore_label {
                        continue;
                    }
                    let idx = |k: usize| (b * cls + k) * plane + p;
                    let m = (0..cls).map(|k| d[idx(k)]).fold(T::neg_infinity(), T::max);
                    let z: T = (0..cls).map(|k| (d[idx(k)] - m).exp()).sum();
                    for k in 0..cls {
                        let sm = (d[idx(k)] - m).exp() / z;
                        let onehot = if k == t as usize { T::one() } else { T::zero() };
                        g[idx(k)] = (sm - onehot) * scale;
                    }
                }
            }
            Ok(vec![Some(gx)])
        })))
    }

    /// BCE against a constant target.
    pub fn binary_cross_entropy(&mut self, probs: Var, target: &Tensor<T>) -> Result<Var> {
        let loss = binary_cross_entropy(self.value(probs), target)?;
        let target = target.clone();
        Ok(self.push("binary_cross_entropy", Tensor::scalar(loss), vec![probs], Box::new(move |args| {
            let eps = prob_eps::<T>();
            let hi = T::one() - eps;
            let scale = args.grad.item() / T::lit(target.len() as f64);
            let g = args.inputs[0].zip_map(&target, |p, t| {
                if p < eps || p > hi {
                    T::zero()
                } else {
                    -(t / p - (T::one() - t) / (T::one() - p)) * scale
                }
            })?;
            Ok(vec![Some(g)])
        })))
    }
}
