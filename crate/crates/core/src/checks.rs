//! Self-checks shared by the command line and the test suites: a gradient
//! sweep over every differentiable building block, and a comparison of the
//! sharded batch norm against a single-batch reference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::ops::batchnorm::{BnMode, BnOptions, RunningStats, BN_EPS};
use crate::ops::Conv2dParams;
use crate::syncbn::{gather, split_sizes, syncbn_backward, syncbn_forward, DeviceShard, Execution};
use crate::tape::{SyncCounter, Tape, Var};
use crate::tensor::{Real, Tensor};

pub const GRADIENT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct NamedReport {
    pub name: String,
    pub report: GradCheckReport,
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.random_range(0.1..1.0);
        if rng.random::<bool>() { v } else { -v }
    })
}

type Case = (String, Vec<(&'static str, Tensor<f64>)>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>);

fn cases(seed: u64) -> Vec<Case> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Case> = Vec::new();

    for dilation in [1usize, 2, 4] {
        let inputs = vec![("x", uniform(&[2, 2, 9, 9], &mut r)), ("w", uniform(&[3, 2, 3, 3], &mut r)), ("b", uniform(&[3], &mut r))];
        let p = Conv2dParams::new(1, dilation, dilation);
        out.push((format!("conv3x3_dilation{dilation}"), inputs, Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), p))));
    }
    let inputs = vec![("x", uniform(&[2, 2, 8, 8], &mut r)), ("w", uniform(&[3, 2, 3, 3], &mut r))];
    out.push(("conv3x3_stride2".into(), inputs, Box::new(|t, v| t.conv2d(v[0], v[1], None, Conv2dParams::new(2, 1, 1)))));
    let inputs = vec![("x", uniform(&[4, 7], &mut r)), ("w", uniform(&[3, 7], &mut r)), ("b", uniform(&[3], &mut r))];
    out.push(("linear".into(), inputs, Box::new(|t, v| t.linear(v[0], v[1], Some(v[2])))));

    for mode in [BnMode::Train, BnMode::Eval] {
        let inputs = vec![("x", uniform(&[4, 3, 3, 3], &mut r)), ("gamma", uniform(&[3], &mut r)), ("beta", uniform(&[3], &mut r))];
        let name = if mode == BnMode::Train { "batchnorm_train" } else { "batchnorm_eval" };
        out.push((
            name.into(),
            inputs,
            Box::new(move |t, v| {
                let mut rs = RunningStats { mean: vec![0.1, -0.2, 0.3], var: vec![0.5, 1.5, 2.0] };
                t.batchnorm(v[0], v[1], v[2], &mut rs, BnOptions::with_mode(mode))
            }),
        ));
    }
    for devices in [2usize, 3] {
        let inputs = vec![("x", uniform(&[5, 2, 3, 2], &mut r)), ("gamma", uniform(&[2], &mut r)), ("beta", uniform(&[2], &mut r))];
        out.push((
            format!("syncbn_devices{devices}"),
            inputs,
            Box::new(move |t, v| t.batchnorm(v[0], v[1], v[2], &mut RunningStats::new(2), BnOptions { devices, ..BnOptions::train() })),
        ));
    }

    out.push(("relu".into(), vec![("x", away_from_zero(&[20], &mut r))], Box::new(|t, v| t.relu(v[0]))));
    let x = uniform(&[3, 4, 2], &mut r).scale(3.0);
    out.push(("sigmoid".into(), vec![("x", x.clone())], Box::new(|t, v| t.sigmoid(v[0]))));
    out.push(("softplus".into(), vec![("x", x.clone())], Box::new(|t, v| t.softplus(v[0]))));
    out.push(("softmax".into(), vec![("x", x)], Box::new(|t, v| t.softmax(v[0], 1))));

    let x = uniform(&[1, 2, 4, 5], &mut r);
    out.push(("bilinear_upsample".into(), vec![("x", x.clone())], Box::new(|t, v| t.bilinear_resize(v[0], 7, 9))));
    out.push(("bilinear_downsample".into(), vec![("x", x)], Box::new(|t, v| t.bilinear_resize(v[0], 2, 3))));

    let logits = uniform(&[2, 4, 3, 3], &mut r).scale(2.0);
    let target: Vec<i32> = (0..18).map(|i| if i % 7 == 3 { 255 } else { (i * 5 % 4) as i32 }).collect();
    out.push(("cross_entropy".into(), vec![("logits", logits)], Box::new(move |t, v| t.cross_entropy_2d(v[0], &target, 255))));

    let features = uniform(&[2, 6, 4], &mut r);
    let codewords = uniform(&[3, 4], &mut r).scale(0.5);
    let smoothing = Tensor::from_fn(&[3], |_| r.random_range(0.3..1.5));
    out.push((
        "encode".into(),
        vec![("features", features.clone()), ("codewords", codewords.clone()), ("smoothing", smoothing.clone())],
        Box::new(|t, v| t.encode(v[0], v[1], v[2])),
    ));
    out.push((
        "encode_softplus_smoothing".into(),
        vec![("features", features), ("codewords", codewords), ("smoothing", smoothing.map(|v| v - 0.8))],
        Box::new(|t, v| {
            let s = t.softplus(v[2])?;
            t.encode(v[0], v[1], s)
        }),
    ));
    let inputs = vec![("encoders", uniform(&[3, 4, 5], &mut r)), ("gamma", uniform(&[5], &mut r)), ("beta", uniform(&[5], &mut r))];
    out.push((
        "aggregate".into(),
        inputs,
        Box::new(|t, v| t.aggregate_encoders(v[0], v[1], v[2], &mut RunningStats::new(5), BnOptions::train())),
    ));
    out.push((
        "concat_normalize".into(),
        vec![("encoders", uniform(&[2, 3, 4], &mut r))],
        Box::new(|t, v| {
            let flat = t.reshape(v[0], &[2, 12])?;
            t.l2_normalize(flat)
        }),
    ));

    let inputs = vec![
        ("featuremap", uniform(&[2, 3, 2, 2], &mut r)),
        ("encoded", uniform(&[2, 4], &mut r)),
        ("weight", uniform(&[3, 4], &mut r)),
        ("bias", uniform(&[3], &mut r)),
    ];
    out.push((
        "attention".into(),
        inputs,
        Box::new(|t, v| {
            let logits = t.linear(v[1], v[2], Some(v[3]))?;
            let gamma = t.sigmoid(logits)?;
            t.scale_channels(v[0], gamma)
        }),
    ));
    let inputs = vec![("encoded", uniform(&[3, 4], &mut r)), ("weight", uniform(&[5, 4], &mut r)), ("bias", uniform(&[5], &mut r))];
    let presence = Tensor::from_fn(&[3, 5], |i| (i % 3 == 0) as u8 as f64);
    out.push((
        "se_head_bce".into(),
        inputs,
        Box::new(move |t, v| {
            let logits = t.linear(v[0], v[1], Some(v[2]))?;
            let p = t.sigmoid(logits)?;
            t.binary_cross_entropy(p, &presence)
        }),
    ));
    out.push(("global_avg_pool".into(), vec![("x", uniform(&[2, 3, 2, 2], &mut r))], Box::new(|t, v| t.global_avg_pool(v[0]))));
    out
}

/// Runs central-difference checks over every differentiable building block in 64-bit.
pub fn gradient_suite(seed: u64) -> Result<Vec<NamedReport>> {
    let options = GradCheckOptions { tolerance: GRADIENT_TOLERANCE, ..Default::default() };
    cases(seed)
        .into_iter()
        .map(|(name, inputs, op)| Ok(NamedReport { name, report: grad_check(&inputs, op, &options)? }))
        .collect()
}

/// Outcome of one sharding pattern.
#[derive(Clone, Debug)]
pub struct ShardReport {
    pub sizes: Vec<usize>,
    pub forward_error: f64,
    pub backward_error: f64,
    pub forward_syncs: u64,
    pub backward_syncs: u64,
}

impl ShardReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.forward_error <= tolerance && self.backward_error <= tolerance && self.forward_syncs == 1 && self.backward_syncs == 1
    }
}

/// Single-batch normalization and its gradients, computed in 64-bit with a
/// two-pass variance. Returns `(y, dx, dgamma, dbeta)`.
pub fn reference_batchnorm(
    x: &Tensor<f64>,
    gamma: &[f64],
    beta: &[f64],
    dy: &Tensor<f64>,
    eps: f64,
) -> (Tensor<f64>, Tensor<f64>, Vec<f64>, Vec<f64>) {
    let (n, c) = (x.dim(0), x.dim(1));
    let plane = x.len() / (n * c);
    let m = (n * plane) as f64;
    let mut y = x.clone();
    let mut dx = x.clone();
    let (mut dgamma, mut dbeta) = (vec![0.0; c], vec![0.0; c]);
    for ch in 0..c {
        let idx: Vec<usize> = (0..n).flat_map(|i| (0..plane).map(move |p| (i * c + ch) * plane + p)).collect();
        let mean = idx.iter().map(|&i| x.data()[i]).sum::<f64>() / m;
        let var = idx.iter().map(|&i| (x.data()[i] - mean).powi(2)).sum::<f64>() / m;
        let r = 1.0 / (var + eps).sqrt();
        let xhat = |i: usize| (x.data()[i] - mean) * r;
        let sum_dy: f64 = idx.iter().map(|&i| dy.data()[i]).sum();
        let sum_dy_xhat: f64 = idx.iter().map(|&i| dy.data()[i] * xhat(i)).sum();
        for &i in &idx {
            y.data_mut()[i] = gamma[ch] * xhat(i) + beta[ch];
            dx.data_mut()[i] = gamma[ch] * r / m * (m * dy.data()[i] - sum_dy - xhat(i) * sum_dy_xhat);
        }
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
    }
    (y, dx, dgamma, dbeta)
}

fn max_diff<T: Real>(got: &[T], want: &[f64]) -> f64 {
    got.iter().zip(want).map(|(&a, &b)| (a.as_f64() - b).abs()).fold(0.0, f64::max)
}

/// Splitting patterns for a batch of `n` over `devices`: the even split and,
/// when distinct, a skewed one that puts everything but one sample per
/// device on the first device.
pub fn shard_patterns(n: usize, devices: usize) -> Vec<Vec<usize>> {
    if devices == 0 || devices > n {
        return Vec::new();
    }
    let even: Vec<usize> = (0..devices).map(|d| n / devices + usize::from(d < n % devices)).collect();
    let mut skewed = vec![1; devices];
    skewed[0] = n - (devices - 1);
    if skewed == even { vec![even] } else { vec![even, skewed] }
}

/// Compares sharded forward and backward against [`reference_batchnorm`]
/// for every device count in `1..=max_devices` and each pattern from
/// [`shard_patterns`]. Also counts synchronizations per direction.
pub fn syncbn_shard_check<T: Real>(batch: usize, channels: usize, spatial: usize, max_devices: usize, seed: u64) -> Result<Vec<ShardReport>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let shape = [batch, channels, spatial, spatial];
    let x64 = Tensor::from_fn(&shape, |_| r.random_range(-2.0..2.0));
    let dy64 = Tensor::from_fn(&shape, |_| r.random_range(-1.0..1.0));
    let gamma64: Vec<f64> = (0..channels).map(|_| r.random_range(0.5..1.5)).collect();
    let beta64: Vec<f64> = (0..channels).map(|_| r.random_range(-0.5..0.5)).collect();
    let (x, dy) = (x64.cast::<T>(), dy64.cast::<T>());
    let gamma: Vec<T> = gamma64.iter().map(|&v| T::lit(v)).collect();
    let beta: Vec<T> = beta64.iter().map(|&v| T::lit(v)).collect();
    // the reference sees exactly the rounded values the shards see
    let g_ref: Vec<f64> = gamma.iter().map(|v| v.as_f64()).collect();
    let b_ref: Vec<f64> = beta.iter().map(|v| v.as_f64()).collect();
    let (y_ref, dx_ref, dg_ref, db_ref) = reference_batchnorm(&x.cast(), &g_ref, &b_ref, &dy.cast(), BN_EPS);

    let mut reports = Vec::new();
    for devices in 1..=max_devices {
        for sizes in shard_patterns(batch, devices) {
            let shards: Vec<DeviceShard<T>> = split_sizes(&x, &sizes)?;
            let dy_shards: Vec<Tensor<T>> = split_sizes(&dy, &sizes)?.into_iter().map(|s| s.input).collect();
            let counter = SyncCounter::new();
            let (ys, saved) = syncbn_forward(&shards, &gamma, &beta, T::lit(BN_EPS), None, &counter, Execution::Serial)?;
            let forward_syncs = counter.get();
            counter.reset();
            let grads = syncbn_backward(&dy_shards, &shards, Some(&saved), &gamma, &counter, Execution::Serial)?;
            let backward_syncs = counter.get();
            let y = gather(&ys)?;
            let dx = gather(&grads.inputs)?;
            let backward_error = max_diff(dx.data(), dx_ref.data()).max(max_diff(&grads.gamma, &dg_ref)).max(max_diff(&grads.beta, &db_ref));
            reports.push(ShardReport { sizes, forward_error: max_diff(y.data(), y_ref.data()), backward_error, forward_syncs, backward_syncs });
        }
    }
    Ok(reports)
}
