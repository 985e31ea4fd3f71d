//! Context module: gradient checks, gate properties, and invariance to
//! spatial permutations of the featuremap.

mod common;

use common::{randn, rng};
use encnet::context::{attention_scale, presence_targets, ContextModule};
use encnet::data::{LabelMask, IGNORE_LABEL};
use encnet::gradcheck::{grad_check, GradCheckOptions};
use encnet::nn::{Forward, Mode, ParamStore};
use encnet::ops::batchnorm::{BnOptions, RunningStats};
use encnet::ops::{binary_cross_entropy, Conv2dParams};
use encnet::Tensor;
use rand::Rng;

#[test]
fn attention_scale_gradients() {
    let mut r = rng(21);
    let inputs = [
        ("featuremap", randn(&[2, 3, 2, 2], &mut r)),
        ("encoded", randn(&[2, 4], &mut r)),
        ("weight", randn(&[3, 4], &mut r)),
        ("bias", randn(&[3], &mut r)),
    ];
    let report = grad_check(
        &inputs,
        |t, v| {
            let logits = t.linear(v[1], v[2], Some(v[3]))?;
            let gamma = t.sigmoid(logits)?;
            t.scale_channels(v[0], gamma)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn se_head_with_bce_gradients() {
    let mut r = rng(22);
    let target = Tensor::from_fn(&[3, 5], |_| if r.random::<bool>() { 1.0 } else { 0.0 });
    let inputs = [("encoded", randn(&[3, 4], &mut r)), ("weight", randn(&[5, 4], &mut r)), ("bias", randn(&[5], &mut r))];
    let report = grad_check(
        &inputs,
        |t, v| {
            let logits = t.linear(v[0], v[1], Some(v[2]))?;
            let p = t.sigmoid(logits)?;
            t.binary_cross_entropy(p, &target)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

/// Encoding, eval-mode aggregation, attention, 1x1 classifier with pixel
/// cross-entropy, and the presence loss, all in one scalar.
#[test]
fn module_end_to_end_gradients() {
    let mut r = rng(23);
    let (n, c, k, cls) = (2, 3, 2, 4);
    let mut running = RunningStats::new(c);
    running.mean = vec![0.1, -0.2, 0.05];
    running.var = vec![0.8, 1.3, 0.6];
    let labels: Vec<i32> = (0..n * 9).map(|i| if i % 7 == 3 { IGNORE_LABEL } else { (i % cls) as i32 }).collect();
    let presence = Tensor::from_fn(&[n, cls], |i| (i % 2) as f64);
    let inputs = [
        ("featuremap", randn(&[n, c, 3, 3], &mut r)),
        ("codewords", randn(&[k, c], &mut r).scale(0.5)),
        ("smoothing_raw", randn(&[k], &mut r)),
        ("bn_gamma", Tensor::from_fn(&[c], |_| r.random_range(0.5..1.5))),
        ("bn_beta", randn(&[c], &mut r).scale(0.2)),
        ("att_weight", randn(&[c, c], &mut r)),
        ("att_bias", randn(&[c], &mut r)),
        ("se_weight", randn(&[cls, c], &mut r)),
        ("se_bias", randn(&[cls], &mut r)),
        ("classifier", randn(&[cls, c, 1, 1], &mut r)),
    ];
    let report = grad_check(
        &inputs,
        |t, v| {
            let flat = t.reshape(v[0], &[n, c, 9])?;
            let feats = t.transpose_last2(flat)?;
            let s = t.softplus(v[2])?;
            let e = t.encode(feats, v[1], s)?;
            let mut stats = running.clone();
            let agg = t.aggregate_encoders(e, v[3], v[4], &mut stats, BnOptions::eval())?;
            let logits = t.linear(agg, v[5], Some(v[6]))?;
            let gamma = t.sigmoid(logits)?;
            let y = t.scale_channels(v[0], gamma)?;
            let seg = t.conv2d(y, v[9], None, Conv2dParams::default())?;
            let ce = t.cross_entropy_2d(seg, &labels, IGNORE_LABEL)?;
            let se_logits = t.linear(agg, v[7], Some(v[8]))?;
            let se = t.sigmoid(se_logits)?;
            let bce = t.binary_cross_entropy(se, &presence)?;
            let bce = t.scale(bce, 0.2)?;
            t.add(ce, bce)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn gate_in_open_unit_interval_and_zero_preserving() {
    let mut r = rng(24);
    for _ in 0..20 {
        let mut x = randn(&[2, 3, 4, 4], &mut r);
        for i in (0..x.len()).step_by(5) {
            x.data_mut()[i] = 0.0;
        }
        let e = randn(&[2, 6], &mut r).scale(3.0);
        let y = attention_scale(&x, &e, &randn(&[3, 6], &mut r), &randn(&[3], &mut r)).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            if *a == 0.0 {
                assert_eq!(*b, 0.0);
            } else {
                let g = b / a;
                assert!(g > 0.0 && g < 1.0);
            }
        }
        // ratio constant per (n, c)
        for plane in 0..6 {
            let ratios: Vec<f64> = (0..16)
                .map(|j| plane * 16 + j)
                .filter(|&i| x.data()[i] != 0.0)
                .map(|i| y.data()[i] / x.data()[i])
                .collect();
            for w in ratios.windows(2) {
                assert!((w[0] - w[1]).abs() < 1e-12);
            }
        }
    }
}

fn permute_spatial(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let hw = perm.len();
    Tensor::from_fn(x.shape(), |i| {
        let (plane, p) = (i / hw, i % hw);
        x.data()[plane * hw + perm[p]]
    })
}

#[test]
fn module_outputs_ignore_pixel_order() {
    let mut r = rng(25);
    let mut store = ParamStore::<f64>::new();
    let module = ContextModule::new(&mut store, "ctx", 4, 3, 5, true, &mut r);
    for trial in 0..10 {
        let x = randn(&[2, 4, 3, 5], &mut r);
        let mut perm: Vec<usize> = (0..15).collect();
        for i in (1..15).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let xp = permute_spatial(&x, &perm);
        let mode = if trial % 2 == 0 { Mode::Train } else { Mode::Eval };
        let run = |store: &mut ParamStore<f64>, input: Tensor<f64>| {
            let mut f = Forward::new(store, mode).without_grads();
            let xv = f.input(input);
            let out = module.forward(&mut f, xv).unwrap();
            (f.value(out.encoded).clone(), f.value(out.gamma.unwrap()).clone(), f.value(out.se_probs).clone())
        };
        let a = run(&mut store, x);
        let b = run(&mut store, xp);
        assert!(a.0.max_abs_diff(&b.0) < 1e-12);
        assert!(a.1.max_abs_diff(&b.1) < 1e-12);
        assert!(a.2.max_abs_diff(&b.2) < 1e-12);
    }
}

#[test]
fn duplicated_sample_gives_duplicated_rows_in_eval() {
    let mut r = rng(26);
    let mut store = ParamStore::<f64>::new();
    let module = ContextModule::new(&mut store, "ctx", 3, 2, 4, true, &mut r);
    let x = randn(&[1, 3, 2, 2], &mut r);
    let doubled = Tensor::from_vec(&[2, 3, 2, 2], [x.data(), x.data()].concat());
    let mut f = Forward::new(&mut store, Mode::Eval).without_grads();
    let xv = f.input(doubled);
    let out = module.forward(&mut f, xv).unwrap();
    for v in [out.encoded, out.se_probs, out.gamma.unwrap()] {
        let t = f.value(v);
        let half = t.len() / 2;
        assert_eq!(&t.data()[..half], &t.data()[half..]);
    }
}

#[test]
fn presence_is_size_agnostic() {
    let mut small = LabelMask::filled(6, 6, 0);
    small.labels[7] = 2;
    let mut big = LabelMask::filled(6, 6, 2);
    big.labels[0] = 0;
    let a = presence_targets::<f64>(&small, 4, IGNORE_LABEL).unwrap();
    let b = presence_targets::<f64>(&big, 4, IGNORE_LABEL).unwrap();
    assert_eq!(a, b);
    let probs = Tensor::from_vec(&[1, 4], vec![0.3, 0.6, 0.8, 0.1]);
    let la = binary_cross_entropy(&probs, &a.clone().reshape(&[1, 4]).unwrap()).unwrap();
    let lb = binary_cross_entropy(&probs, &b.reshape(&[1, 4]).unwrap()).unwrap();
    assert_eq!(la, lb);
}
