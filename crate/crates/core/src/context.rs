//! Context encoding module: encoded semantics drive a channel-wise gate on
//! the featuremap and a per-class presence prediction.

use rand_chacha::ChaCha8Rng;

use crate::data::LabelMask;
use crate::encoding::{EncodingLayer, EncodingReadout};
use crate::error::{shape_err, Result};
use crate::nn::{Forward, Linear, ParamStore};
use crate::ops::{linear, sigmoid};
use crate::tape::Var;
use crate::tensor::{Real, Tensor};

/// Binary class-presence vector `[num_classes]` of a mask. The ignore label
/// contributes nothing; every present class counts once regardless of area.
pub fn presence_targets<T: Real>(mask: &LabelMask, num_classes: usize, ignore_label: i32) -> Result<Tensor<T>> {
    mask.validate(num_classes, ignore_label)?;
    let mut out = Tensor::zeros(&[num_classes]);
    for &l in &mask.labels {
        if l != ignore_label {
            out.data_mut()[l as usize] = T::one();
        }
    }
    Ok(out)
}

/// Stacks presence vectors of several masks into `[N, num_classes]`.
pub fn presence_batch<T: Real>(masks: &[&LabelMask], num_classes: usize, ignore_label: i32) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(masks.len() * num_classes);
    for m in masks {
        data.extend(presence_targets::<T>(m, num_classes, ignore_label)?.into_data());
    }
    Tensor::new(&[masks.len(), num_classes], data)
}

/// `Y = X * sigmoid(W e + b)` channel-wise, for `X: [N,C,H,W]`, `e: [N,C_e]`.
pub fn attention_scale<T: Real>(x: &Tensor<T>, e: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let gamma = sigmoid(&linear(e, weight, Some(bias))?);
    if x.ndim() != 4 || gamma.shape() != &x.shape()[..2] {
        return Err(shape_err("attention_scale", format!("featuremap {:?} vs gate {:?}", x.shape(), gamma.shape())));
    }
    let plane = x.dim(2) * x.dim(3);
    let mut y = x.clone();
    for (chunk, &g) in y.data_mut().chunks_mut(plane).zip(gamma.data()) {
        for v in chunk {
            *v *= g;
        }
    }
    Ok(y)
}

/// Class-presence probabilities `sigmoid(W e + b)`, `[N, Cls]`.
pub fn se_head<T: Real>(e: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(sigmoid(&linear(e, weight, Some(bias))?))
}

/// Parameters of one context encoding module.
#[derive(Clone, Debug)]
pub struct ContextModule {
    pub encoding: EncodingLayer,
    /// Absent on auxiliary modules that only feed the presence loss.
    pub attention: Option<Linear>,
    pub se_head: Linear,
    pub channels: usize,
    pub num_classes: usize,
}

/// Tape handles produced by [`ContextModule::forward`].
#[derive(Clone, Copy, Debug)]
pub struct ContextOutput {
    /// Gated featuremap, when the module has an attention branch.
    pub y: Option<Var>,
    pub gamma: Option<Var>,
    pub se_probs: Var,
    pub encoded: Var,
}

impl ContextModule {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        k: usize,
        num_classes: usize,
        with_attention: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let encoding = EncodingLayer::new(store, &format!("{name}.encoding"), channels, k, EncodingReadout::Aggregate, false, rng);
        let e_dim = encoding.out_dim();
        let attention = with_attention.then(|| Linear::new(store, &format!("{name}.attention"), e_dim, channels, true, rng));
        let se_head = Linear::new(store, &format!("{name}.se_head"), e_dim, num_classes, true, rng);
        ContextModule { encoding, attention, se_head, channels, num_classes }
    }

    pub fn forward<T: Real>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<ContextOutput> {
        let encoded = self.encoding.forward(f, x)?;
        let (y, gamma) = match &self.attention {
            Some(att) => {
                let logits = att.forward(f, encoded)?;
                let gamma = f.tape.sigmoid(logits)?;
                (Some(f.tape.scale_channels(x, gamma)?), Some(gamma))
            }
            None => (None, None),
        };
        let se_logits = self.se_head.forward(f, encoded)?;
        let se_probs = f.tape.sigmoid(se_logits)?;
        Ok(ContextOutput { y, gamma, se_probs, encoded })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::IGNORE_LABEL;

    #[test]
    fn presence_examples() {
        let all_ignored = LabelMask::filled(3, 3, IGNORE_LABEL);
        assert!(presence_targets::<f64>(&all_ignored, 6, IGNORE_LABEL).unwrap().data().iter().all(|&v| v == 0.0));
        let mask = LabelMask::new(2, 3, vec![1, 1, 3, 3, IGNORE_LABEL, 1]).unwrap();
        assert_eq!(presence_targets::<f64>(&mask, 6, IGNORE_LABEL).unwrap().data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        let mut tiny = LabelMask::filled(8, 8, 0);
        tiny.labels[27] = 4;
        assert_eq!(presence_targets::<f64>(&tiny, 6, IGNORE_LABEL).unwrap().data()[4], 1.0);
    }

    #[test]
    fn presence_out_of_range_names_pixel() {
        let mask = LabelMask::new(2, 2, vec![0, 0, 0, 9]).unwrap();
        let err = presence_targets::<f64>(&mask, 6, IGNORE_LABEL).unwrap_err().to_string();
        assert!(err.contains("(1, 1)"), "{err}");
    }

    #[test]
    fn zero_attention_halves_input() {
        let x = Tensor::from_fn(&[2, 3, 2, 2], |i| i as f64 - 5.0);
        let e = Tensor::from_fn(&[2, 4], |i| i as f64);
        let y = attention_scale(&x, &e, &Tensor::zeros(&[3, 4]), &Tensor::zeros(&[3])).unwrap();
        assert_eq!(y, x.scale(0.5));
    }

    #[test]
    fn saturated_gate_passes_channel() {
        let x = Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64 + 1.0);
        let e = Tensor::from_fn(&[1, 3], |i| i as f64);
        let y = attention_scale(&x, &e, &Tensor::zeros(&[2, 3]), &Tensor::from_vec(&[2], vec![1000.0, 0.0])).unwrap();
        assert_eq!(&y.data()[..4], &x.data()[..4]);
    }

    #[test]
    fn se_head_zero_weights() {
        let e = Tensor::from_fn(&[2, 4], |i| i as f64);
        let p = se_head(&e, &Tensor::zeros(&[5, 4]), &Tensor::zeros(&[5])).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.5));
        let t = Tensor::from_fn(&[2, 5], |i| (i % 2) as f64);
        let l = crate::ops::binary_cross_entropy(&p, &t).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
