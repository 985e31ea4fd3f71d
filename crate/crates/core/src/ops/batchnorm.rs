//! Batch normalization over every non-channel axis of `[N, C, ...]`.

use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::syncbn::{self, Execution};
use crate::tape::{SyncCounter, Tape, Var};
use crate::tensor::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Exponential moving averages of per-channel mean and (unbiased) variance.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats { mean: vec![T::zero(); channels], var: vec![T::one(); channels] }
    }

    /// Folds biased batch statistics over `count` elements into the averages.
    pub fn update(&mut self, mean: &[T], var: &[T], count: usize, momentum: T) {
        let unbias = if count > 1 { T::lit(count as f64 / (count as f64 - 1.0)) } else { T::one() };
        let keep = T::one() - momentum;
        for (r, &m) in self.mean.iter_mut().zip(mean) {
            *r = keep * *r + momentum * m;
        }
        for (r, &v) in self.var.iter_mut().zip(var) {
            *r = keep * *r + momentum * v * unbias;
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BnOptions<T> {
    pub eps: T,
    pub momentum: T,
    pub mode: BnMode,
    /// Simulated device count; statistics are synchronized across shards when > 1.
    pub devices: usize,
}

impl<T: Real> BnOptions<T> {
    pub fn train() -> Self {
        BnOptions { eps: T::lit(BN_EPS), momentum: T::lit(BN_MOMENTUM), mode: BnMode::Train, devices: 1 }
    }

    pub fn eval() -> Self {
        BnOptions { mode: BnMode::Eval, ..Self::train() }
    }

    pub fn with_mode(mode: BnMode) -> Self {
        BnOptions { mode, ..Self::train() }
    }
}

fn layout<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if x.ndim() < 2 {
        return Err(shape_err("batchnorm", format!("input must be [N,C,...], got {:?}", x.shape())));
    }
    let (n, c) = (x.dim(0), x.dim(1));
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err(
            "batchnorm",
            format!("C: input has {c} channels, gamma {:?}, beta {:?}", gamma.shape(), beta.shape()),
        ));
    }
    let plane = if n * c == 0 { 0 } else { x.len() / (n * c) };
    Ok((n, c, plane))
}

/// Two-pass per-channel mean and biased variance.
pub fn batch_moments<T: Real>(x: &Tensor<T>) -> (Vec<T>, Vec<T>, usize) {
    let (n, c) = (x.dim(0), x.dim(1));
    let plane = x.len() / (n * c).max(1);
    let count = n * plane;
    let m = T::lit(count as f64);
    let mut mean = vec![T::zero(); c];
    for (idx, chunk) in x.data().chunks(plane).enumerate() {
        mean[idx % c] += chunk.iter().copied().sum::<T>();
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let mut var = vec![T::zero(); c];
    for (idx, chunk) in x.data().chunks(plane).enumerate() {
        let mu = mean[idx % c];
        var[idx % c] += chunk.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
    }
    var.iter_mut().for_each(|v| *v /= m);
    (mean, var, count)
}

fn normalize<T: Real>(x: &Tensor<T>, mean: &[T], inv_std: &[T], gamma: &[T], beta: &[T]) -> Tensor<T> {
    let c = mean.len();
    let plane = x.len() / (x.dim(0) * c).max(1);
    let mut out = x.clone();
    for (idx, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let ch = idx % c;
        for v in chunk {
            *v = gamma[ch] * (*v - mean[ch]) * inv_std[ch] + beta[ch];
        }
    }
    out
}

/// Batch normalization; train mode also updates `running`.
pub fn batchnorm<T: Real>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
    mode: BnMode,
    running: &mut RunningStats<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let g = tape.constant(gamma.clone());
    let b = tape.constant(beta.clone());
    let opts = BnOptions { eps, momentum: T::lit(BN_MOMENTUM), mode, devices: 1 };
    let y = tape.batchnorm(x, g, b, running, opts)?;
    Ok(tape.value(y).clone())
}

enum Saved<T> {
    Batch { inv_std: Vec<T>, mean: Vec<T> },
    Sharded { saved: syncbn::SavedStats<T>, sizes: Vec<usize>, counter: Arc<SyncCounter> },
    Running { inv_std: Vec<T>, mean: Vec<T> },
}

impl<T: Real> Tape<T> {
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &mut RunningStats<T>,
        opts: BnOptions<T>,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let (n, c, plane) = layout(xv, gv, bv)?;
        if running.mean.len() != c {
            return Err(shape_err("batchnorm", format!("C: running stats track {} channels, input has {c}", running.mean.len())));
        }
        let (out, saved) = match opts.mode {
            BnMode::Eval => {
                let inv_std: Vec<T> = running.var.iter().map(|&v| T::one() / (v + opts.eps).sqrt()).collect();
                let out = normalize(xv, &running.mean, &inv_std, gv.data(), bv.data());
                (out, Saved::Running { inv_std, mean: running.mean.clone() })
            }
            BnMode::Train if opts.devices > 1 => {
                let shards = syncbn::shard_batch(xv, opts.devices.min(n))?;
                let sizes = shards.iter().map(|s| s.input.dim(0)).collect();
                let counter = self.sync_counter().clone();
                let (parts, saved) = syncbn::syncbn_forward(
                    &shards,
                    gv.data(),
                    bv.data(),
                    opts.eps,
                    Some((running, opts.momentum)),
                    &counter,
                    Execution::Serial,
                )?;
                (syncbn::gather(&parts)?, Saved::Sharded { saved, sizes, counter })
            }
            BnMode::Train => {
                if n * plane < 2 {
                    return Err(Error::Population { op: "batchnorm", count: n * plane });
                }
                let (mean, var, count) = batch_moments(xv);
                running.update(&mean, &var, count, opts.momentum);
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + opts.eps).sqrt()).collect();
                let out = normalize(xv, &mean, &inv_std, gv.data(), bv.data());
                (out, Saved::Batch { inv_std, mean })
            }
        };
        Ok(self.push("batchnorm", out, vec![x, gamma, beta], Box::new(move |args| {
            let (x, gamma) = (args.inputs[0], args.inputs[1]);
            let g = args.grad;
            match &saved {
                Saved::Sharded { saved, sizes, counter } => {
                    let shards = syncbn::split_sizes(x, sizes)?;
                    let ups: Vec<Tensor<T>> = syncbn::split_sizes(g, sizes)?.into_iter().map(|s| s.input).collect();
                    let grads = syncbn::syncbn_backward(&ups, &shards, Some(saved), gamma.data(), counter, Execution::Serial)?;
                    Ok(vec![
                        Some(syncbn::gather(&grads.inputs)?),
                        Some(Tensor::from_vec(&[c], grads.gamma)),
                        Some(Tensor::from_vec(&[c], grads.beta)),
                    ])
                }
                Saved::Batch { inv_std, mean } | Saved::Running { inv_std, mean } => {
                    let batch_mode = matches!(saved, Saved::Batch { .. });
                    let mut sum_g = vec![T::zero(); c];
                    let mut sum_gx = vec![T::zero(); c];
                    for (idx, (gc, xc)) in g.data().chunks(plane).zip(x.data().chunks(plane)).enumerate() {
                        let ch = idx % c;
                        for (&gv, &xv) in gc.iter().zip(xc) {
                            sum_g[ch] += gv;
                            sum_gx[ch] += gv * (xv - mean[ch]) * inv_std[ch];
                        }
                    }
                    let m = T::lit((n * plane) as f64);
                    let mut dx = x.clone();
                    for (idx, (dc, gc)) in dx.data_mut().chunks_mut(plane).zip(g.data().chunks(plane)).enumerate() {
                        let ch = idx % c;
                        let scale = gamma.data()[ch] * inv_std[ch];
                        for (v, &gv) in dc.iter_mut().zip(gc) {
                            let xhat = (*v - mean[ch]) * inv_std[ch];
                            *v = if batch_mode {
                                scale * (gv - sum_g[ch] / m - xhat * sum_gx[ch] / m)
                            } else {
                                scale * gv
                            };
                        }
                    }
                    Ok(vec![Some(dx), Some(Tensor::from_vec(&[c], sum_gx)), Some(Tensor::from_vec(&[c], sum_g))])
                }
            }
        })))
    }
}
