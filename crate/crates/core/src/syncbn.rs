//! Cross-device synchronized batch normalization, simulated in-process.
//!
//! Each device reduces its shard to per-channel `(Σx, Σx²)`; one all-reduce
//! produces the global sums from which mean and variance follow as
//! `σ² = Σx²/N − (Σx)²/N²`. Backward needs the global `Σdy` and `Σdy·x`,
//! again gathered with a single all-reduce.

use crate::error::{invalid, shape_err, Error, Result};
use crate::ops::batchnorm::RunningStats;
use crate::tape::SyncCounter;
use crate::tensor::{Real, Tensor};

/// One device's slice of the global batch, `[n_d, C, ...]`.
#[derive(Clone, Debug)]
pub struct DeviceShard<T> {
    pub device_id: usize,
    pub input: Tensor<T>,
}

/// Per-channel partial sums exchanged by the all-reduce.
#[derive(Clone, Debug, PartialEq)]
pub struct SyncStats<T> {
    pub sum_x: Vec<T>,
    pub sum_x2: Vec<T>,
    pub count: usize,
}

/// Whether shard-local phases run on the calling thread or one thread per shard.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Execution {
    #[default]
    Serial,
    Threaded,
}

/// Statistics saved by the forward pass for backward.
#[derive(Clone, Debug)]
pub struct SavedStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
    pub count: usize,
}

#[derive(Clone, Debug)]
pub struct SyncBnGrads<T> {
    pub inputs: Vec<Tensor<T>>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

fn channels_and_plane<T: Real>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if x.ndim() < 2 {
        return Err(shape_err("syncbn", format!("shard must be [n,C,...], got {:?}", x.shape())));
    }
    let (n, c) = (x.dim(0), x.dim(1));
    let plane = if n * c == 0 { 0 } else { x.len() / (n * c) };
    Ok((n, c, plane))
}

impl<T: Real> SyncStats<T> {
    pub fn zeros(channels: usize) -> Self {
        SyncStats { sum_x: vec![T::zero(); channels], sum_x2: vec![T::zero(); channels], count: 0 }
    }

    pub fn channels(&self) -> usize {
        self.sum_x.len()
    }

    fn merge(mut self, other: &SyncStats<T>) -> Self {
        for (a, &b) in self.sum_x.iter_mut().zip(&other.sum_x) {
            *a += b;
        }
        for (a, &b) in self.sum_x2.iter_mut().zip(&other.sum_x2) {
            *a += b;
        }
        self.count += other.count;
        self
    }

    /// Mean and variance from the global sums; negative round-off clamped to 0.
    pub fn mean_var(&self) -> (Vec<T>, Vec<T>) {
        let m = T::lit(self.count as f64);
        let mean: Vec<T> = self.sum_x.iter().map(|&s| s / m).collect();
        let var = self
            .sum_x2
            .iter()
            .zip(&self.sum_x)
            .map(|(&s2, &s1)| (s2 / m - (s1 * s1) / (m * m)).max(T::zero()))
            .collect();
        (mean, var)
    }

    /// Variance before clamping, for auditing the cancellation error.
    pub fn raw_variance(&self) -> Vec<T> {
        let m = T::lit(self.count as f64);
        self.sum_x2.iter().zip(&self.sum_x).map(|(&s2, &s1)| s2 / m - (s1 * s1) / (m * m)).collect()
    }
}

/// Per-channel `Σx` and `Σx²` over every sample and spatial position of a shard.
pub fn local_sums<T: Real>(shard: &DeviceShard<T>) -> Result<SyncStats<T>> {
    let (n, c, plane) = channels_and_plane(&shard.input)?;
    if n == 0 {
        return Err(invalid("local_sums", format!("device {} holds an empty shard", shard.device_id)));
    }
    let mut stats = SyncStats::zeros(c);
    for (idx, chunk) in shard.input.data().chunks(plane).enumerate() {
        let ch = idx % c;
        for &v in chunk {
            stats.sum_x[ch] += v;
            stats.sum_x2[ch] += v * v;
        }
    }
    stats.count = n * plane;
    Ok(stats)
}

/// Pairwise tree reduction in device order: `((0+1)+(2+3))+...`.
fn tree_reduce<X: Clone>(mut items: Vec<X>, combine: impl Fn(X, &X) -> X) -> X {
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(combine(a, &b)),
                None => next.push(a),
            }
        }
        items = next;
    }
    items.pop().expect("tree_reduce on empty input")
}

/// Sums partial statistics with a fixed binary tree over device ids; one
/// synchronization event.
pub fn all_reduce<T: Real>(stats: &[SyncStats<T>], counter: &SyncCounter) -> Result<SyncStats<T>> {
    let first = stats.first().ok_or_else(|| invalid("all_reduce", "no shards"))?;
    if let Some(bad) = stats.iter().position(|s| s.channels() != first.channels()) {
        return Err(shape_err(
            "all_reduce",
            format!("shard {bad} has {} channels, shard 0 has {}", stats[bad].channels(), first.channels()),
        ));
    }
    counter.record();
    Ok(tree_reduce(stats.to_vec(), SyncStats::merge))
}

/// Left-to-right fold, the reference association order.
pub fn fold_reduce<T: Real>(stats: &[SyncStats<T>]) -> SyncStats<T> {
    let mut acc = SyncStats::zeros(stats[0].channels());
    for s in stats {
        acc = acc.merge(s);
    }
    acc
}

fn map_shards<T: Real, R: Send>(
    shards: &[DeviceShard<T>],
    exec: Execution,
    f: impl Fn(&DeviceShard<T>) -> R + Sync,
) -> Vec<R> {
    match exec {
        Execution::Serial => shards.iter().map(&f).collect(),
        Execution::Threaded => std::thread::scope(|scope| {
            let handles: Vec<_> = shards.iter().map(|s| scope.spawn(|| f(s))).collect();
            handles.into_iter().map(|h| h.join().expect("shard worker panicked")).collect()
        }),
    }
}

fn sorted_by_device<T>(shards: &[DeviceShard<T>]) -> Result<()> {
    for (i, s) in shards.iter().enumerate() {
        if s.device_id != i {
            return Err(invalid("syncbn", format!("shard {i} carries device id {}; ids must be 0..D in order", s.device_id)));
        }
    }
    Ok(())
}

/// Splits `input` along the batch axis into `devices` contiguous, as-even-as-possible shards.
pub fn shard_batch<T: Real>(input: &Tensor<T>, devices: usize) -> Result<Vec<DeviceShard<T>>> {
    let n = input.dim(0);
    if devices == 0 || devices > n {
        return Err(invalid("shard_batch", format!("cannot split a batch of {n} across {devices} device(s)")));
    }
    let sizes: Vec<usize> = (0..devices).map(|d| n / devices + usize::from(d < n % devices)).collect();
    split_sizes(input, &sizes)
}

/// Splits along the batch axis with explicit per-device sizes.
pub fn split_sizes<T: Real>(input: &Tensor<T>, sizes: &[usize]) -> Result<Vec<DeviceShard<T>>> {
    let n = input.dim(0);
    if sizes.iter().sum::<usize>() != n || sizes.contains(&0) {
        return Err(invalid("split_sizes", format!("sizes {sizes:?} do not partition a batch of {n} into nonempty shards")));
    }
    let per_sample = input.len() / n;
    let mut offset = 0;
    let mut shards = Vec::with_capacity(sizes.len());
    for (device_id, &sz) in sizes.iter().enumerate() {
        let mut shape = input.shape().to_vec();
        shape[0] = sz;
        let data = input.data()[offset * per_sample..(offset + sz) * per_sample].to_vec();
        shards.push(DeviceShard { device_id, input: Tensor::new(&shape, data)? });
        offset += sz;
    }
    Ok(shards)
}

/// Concatenates per-shard tensors back along the batch axis.
pub fn gather<T: Real>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| invalid("gather", "no shards"))?;
    let mut shape = first.shape().to_vec();
    shape[0] = parts.iter().map(|p| p.dim(0)).sum();
    let data = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Tensor::new(&shape, data)
}

/// Normalizes every shard with the global batch statistics.
///
/// Exactly one synchronization is recorded on `counter`. When `running` is
/// given, the root device folds the global statistics into it.
#[allow(clippy::too_many_arguments)]
pub fn syncbn_forward<T: Real>(
    shards: &[DeviceShard<T>],
    gamma: &[T],
    beta: &[T],
    eps: T,
    running: Option<(&mut RunningStats<T>, T)>,
    counter: &SyncCounter,
    exec: Execution,
) -> Result<(Vec<Tensor<T>>, SavedStats<T>)> {
    sorted_by_device(shards)?;
    let partials: Result<Vec<_>> = map_shards(shards, exec, local_sums).into_iter().collect();
    let global = all_reduce(&partials?, counter)?;
    if global.count < 2 {
        return Err(Error::Population { op: "syncbn_forward", count: global.count });
    }
    let c = global.channels();
    if gamma.len() != c || beta.len() != c {
        return Err(shape_err("syncbn_forward", format!("{c} channels but gamma/beta of length {}/{}", gamma.len(), beta.len())));
    }
    let (mean, var) = global.mean_var();
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    if let Some((stats, momentum)) = running {
        // root device update; every device reads the same running buffers
        stats.update(&mean, &var, global.count, momentum);
    }
    let outputs = map_shards(shards, exec, |shard| {
        let (_, _, plane) = channels_and_plane(&shard.input).expect("validated");
        let mut out = shard.input.clone();
        for (idx, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
            let ch = idx % c;
            let (m, r, g, b) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for v in chunk {
                *v = g * (*v - m) * r + b;
            }
        }
        out
    });
    Ok((outputs, SavedStats { mean, var, inv_std, count: global.count }))
}

/// Backward of [`syncbn_forward`] with one synchronization of
/// `(Σdy, Σdy·x)`, from which the gradients of `Σx` and `Σx²` follow.
pub fn syncbn_backward<T: Real>(
    upstream: &[Tensor<T>],
    shards: &[DeviceShard<T>],
    saved: Option<&SavedStats<T>>,
    gamma: &[T],
    counter: &SyncCounter,
    exec: Execution,
) -> Result<SyncBnGrads<T>> {
    let saved = saved.ok_or_else(|| invalid("syncbn_backward", "forward statistics were not saved"))?;
    if upstream.len() != shards.len() {
        return Err(shape_err("syncbn_backward", format!("{} upstream gradients for {} shards", upstream.len(), shards.len())));
    }
    for (g, s) in upstream.iter().zip(shards) {
        g.expect_same_shape(&s.input, "syncbn_backward")?;
    }
    let c = saved.mean.len();
    // local partials: sum_x slot carries Σdy, sum_x2 slot carries Σdy·x
    let pairs: Vec<(&Tensor<T>, &DeviceShard<T>)> = upstream.iter().zip(shards).collect();
    let partials: Vec<SyncStats<T>> = match exec {
        Execution::Serial => pairs.iter().map(|(g, s)| grad_partials(g, &s.input, c)).collect(),
        Execution::Threaded => std::thread::scope(|scope| {
            let hs: Vec<_> = pairs.iter().map(|(g, s)| scope.spawn(move || grad_partials(g, &s.input, c))).collect();
            hs.into_iter().map(|h| h.join().expect("shard worker panicked")).collect()
        }),
    };
    let global = all_reduce(&partials, counter)?;
    let m = T::lit(saved.count as f64);
    let two = T::lit(2.0);
    let half = T::lit(0.5);
    let mut d_s1 = vec![T::zero(); c];
    let mut d_s2 = vec![T::zero(); c];
    let mut d_gamma = vec![T::zero(); c];
    for ch in 0..c {
        let (mu, r, g) = (saved.mean[ch], saved.inv_std[ch], gamma[ch]);
        let (sum_dy, sum_dyx) = (global.sum_x[ch], global.sum_x2[ch]);
        let centered = sum_dyx - mu * sum_dy;
        let d_mu = -g * r * sum_dy;
        let d_var = -half * g * r * r * r * centered;
        d_s1[ch] = d_mu / m - two * mu * d_var / m;
        d_s2[ch] = d_var / m;
        d_gamma[ch] = r * centered;
    }
    let inputs = pairs
        .iter()
        .map(|(up, s)| {
            let plane = s.input.len() / (s.input.dim(0) * c);
            let mut dx = s.input.clone();
            for (idx, (chunk, gchunk)) in dx.data_mut().chunks_mut(plane).zip(up.data().chunks(plane)).enumerate() {
                let ch = idx % c;
                let scale = gamma[ch] * saved.inv_std[ch];
                for (v, &dy) in chunk.iter_mut().zip(gchunk) {
                    *v = scale * dy + d_s1[ch] + two * *v * d_s2[ch];
                }
            }
            dx
        })
        .collect();
    Ok(SyncBnGrads { inputs, gamma: d_gamma, beta: global.sum_x.clone() })
}

fn grad_partials<T: Real>(grad: &Tensor<T>, x: &Tensor<T>, c: usize) -> SyncStats<T> {
    let plane = x.len() / (x.dim(0) * c);
    let mut s = SyncStats::zeros(c);
    for (idx, (gchunk, xchunk)) in grad.data().chunks(plane).zip(x.data().chunks(plane)).enumerate() {
        let ch = idx % c;
        for (&g, &v) in gchunk.iter().zip(xchunk) {
            s.sum_x[ch] += g;
            s.sum_x2[ch] += g * v;
        }
    }
    s.count = x.dim(0) * plane;
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shard(id: usize, shape: &[usize], data: Vec<f64>) -> DeviceShard<f64> {
        DeviceShard { device_id: id, input: Tensor::from_vec(shape, data) }
    }

    #[test]
    fn local_sums_of_ones_and_zeros() {
        let s = local_sums(&shard(0, &[3, 2, 2, 2], vec![1.0; 24])).unwrap();
        assert_eq!(s.sum_x, vec![12.0, 12.0]);
        assert_eq!(s.sum_x2, vec![12.0, 12.0]);
        assert_eq!(s.count, 12);
        let z = local_sums(&shard(0, &[1, 2, 2, 2], vec![0.0; 8])).unwrap();
        assert_eq!(z.sum_x, vec![0.0, 0.0]);
        assert_eq!(z.sum_x2, vec![0.0, 0.0]);
    }

    #[test]
    fn all_reduce_identity_and_sum() {
        let counter = SyncCounter::new();
        let a = SyncStats { sum_x: vec![3.0f64], sum_x2: vec![1.0], count: 1 };
        assert_eq!(all_reduce(&[a.clone()], &counter).unwrap(), a);
        let b = SyncStats { sum_x: vec![5.0f64], sum_x2: vec![2.0], count: 2 };
        let r = all_reduce(&[a, b], &counter).unwrap();
        assert_eq!(r.sum_x, vec![8.0]);
        assert_eq!(r.count, 3);
        assert_eq!(counter.get(), 2);
    }

    #[test]
    fn all_reduce_rejects_channel_mismatch() {
        let a = SyncStats::<f64>::zeros(2);
        let b = SyncStats::<f64>::zeros(3);
        assert!(all_reduce(&[a, b], &SyncCounter::new()).is_err());
    }

    #[test]
    fn two_values_one_per_shard() {
        let shards = vec![shard(0, &[1, 1], vec![1.0]), shard(1, &[1, 1], vec![3.0])];
        let counter = SyncCounter::new();
        let (out, saved) =
            syncbn_forward(&shards, &[1.0], &[0.0], 0.0, None, &counter, Execution::Serial).unwrap();
        assert_eq!(saved.var, vec![1.0]);
        assert_eq!(out[0].data(), &[-1.0]);
        assert_eq!(out[1].data(), &[1.0]);
        assert_eq!(counter.get(), 1);
    }

    #[test]
    fn constant_data_maps_to_beta() {
        let shards = shard_batch(&Tensor::full(&[4, 2, 3], 2.5f64), 2).unwrap();
        let (out, _) = syncbn_forward(&shards, &[1.0, 2.0], &[0.3, -0.7], 1e-5, None, &SyncCounter::new(), Execution::Serial).unwrap();
        for o in &out {
            for (i, &v) in o.data().iter().enumerate() {
                let beta = if (i / 3) % 2 == 0 { 0.3 } else { -0.7 };
                assert!((v - beta).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_element_population_rejected() {
        let shards = vec![shard(0, &[1, 1], vec![1.0])];
        let err = syncbn_forward(&shards, &[1.0], &[0.0], 1e-5, None, &SyncCounter::new(), Execution::Serial);
        assert!(matches!(err, Err(Error::Population { .. })));
    }

    #[test]
    fn backward_requires_saved_stats() {
        let shards = vec![shard(0, &[2, 1], vec![1.0, 2.0])];
        let up = vec![Tensor::zeros(&[2, 1])];
        assert!(syncbn_backward(&up, &shards, None, &[1.0], &SyncCounter::new(), Execution::Serial).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let x = Tensor::from_fn(&[4, 3, 2], |i| (i as f64 * 0.7).cos());
        let shards = shard_batch(&x, 3).unwrap();
        let counter = SyncCounter::new();
        let (_, saved) = syncbn_forward(&shards, &[1.0; 3], &[0.0; 3], 1e-5, None, &counter, Execution::Serial).unwrap();
        let up: Vec<_> = shards.iter().map(|s| Tensor::zeros(s.input.shape())).collect();
        let g = syncbn_backward(&up, &shards, Some(&saved), &[1.0; 3], &counter, Execution::Serial).unwrap();
        assert!(g.inputs.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        assert!(g.gamma.iter().chain(&g.beta).all(|&v| v == 0.0));
    }

    #[test]
    fn uneven_shards() {
        let x = Tensor::from_fn(&[7, 2], |i| i as f64);
        let shards = shard_batch(&x, 3).unwrap();
        let sizes: Vec<_> = shards.iter().map(|s| s.input.dim(0)).collect();
        assert_eq!(sizes, vec![3, 2, 2]);
        assert_eq!(gather(&shards.iter().map(|s| s.input.clone()).collect::<Vec<_>>()).unwrap(), x);
    }
}
