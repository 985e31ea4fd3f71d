//! Finite-difference checks of every differentiable primitive.

mod common;

use common::{rand_away_from_zero, randn, rng};
use encnet::gradcheck::{grad_check, GradCheckOptions};
use encnet::ops::batchnorm::{BnMode, BnOptions, RunningStats};
use encnet::ops::Conv2dParams;
use encnet::{Tensor, Var};

const TOL: f64 = 1e-4;

fn opts() -> GradCheckOptions {
    GradCheckOptions { tolerance: TOL, ..Default::default() }
}

fn assert_passes(name: &str, report: encnet::gradcheck::GradCheckReport) {
    for r in &report.inputs {
        assert!(r.checked > 0, "{name}/{}: nothing checked", r.name);
    }
    assert!(report.passed(), "{name}: max rel error {:e} ({:?})", report.max_rel_error(), report.inputs);
}

#[test]
fn conv2d_with_dilation() {
    let mut r = rng(1);
    for &(dilation, stride) in &[(1, 1), (2, 1), (4, 1), (1, 2)] {
        let x = randn(&[2, 2, 9, 9], &mut r);
        let w = randn(&[3, 2, 3, 3], &mut r);
        let b = randn(&[3], &mut r);
        let p = Conv2dParams::new(stride, dilation, dilation);
        let report = grad_check(&[("x", x), ("w", w), ("b", b)], |t, v| t.conv2d(v[0], v[1], Some(v[2]), p), &opts()).unwrap();
        assert_passes(&format!("conv d={dilation} s={stride}"), report);
    }
}

#[test]
fn pointwise_conv() {
    let mut r = rng(2);
    let x = randn(&[2, 3, 4, 4], &mut r);
    let w = randn(&[5, 3, 1, 1], &mut r);
    let report = grad_check(&[("x", x), ("w", w)], |t, v| t.conv2d(v[0], v[1], None, Conv2dParams::default()), &opts()).unwrap();
    assert_passes("conv1x1", report);
}

#[test]
fn linear_layer() {
    let mut r = rng(3);
    let report = grad_check(
        &[("x", randn(&[4, 7], &mut r)), ("w", randn(&[3, 7], &mut r)), ("b", randn(&[3], &mut r))],
        |t, v| t.linear(v[0], v[1], Some(v[2])),
        &opts(),
    )
    .unwrap();
    assert!(report.max_rel_error() < 1e-6, "{report:?}");
}

#[test]
fn relu_away_from_kink() {
    let mut r = rng(4);
    let report = grad_check(&[("x", rand_away_from_zero(&[20], &mut r))], |t, v| t.relu(v[0]), &opts()).unwrap();
    assert!(report.max_rel_error() < 1e-6);
    assert!(report.inputs[0].kinks.is_empty());
}

#[test]
fn smooth_activations() {
    let mut r = rng(5);
    let x = randn(&[3, 4, 2], &mut r).scale(3.0);
    assert_passes("sigmoid", grad_check(&[("x", x.clone())], |t, v| t.sigmoid(v[0]), &opts()).unwrap());
    assert_passes("softplus", grad_check(&[("x", x.clone())], |t, v| t.softplus(v[0]), &opts()).unwrap());
    for axis in 0..3 {
        assert_passes("softmax", grad_check(&[("x", x.clone())], |t, v| t.softmax(v[0], axis), &opts()).unwrap());
    }
}

#[test]
fn batchnorm_train_and_eval() {
    let mut r = rng(6);
    let x = randn(&[4, 3, 3, 3], &mut r);
    let g = randn(&[3], &mut r);
    let b = randn(&[3], &mut r);
    for mode in [BnMode::Train, BnMode::Eval] {
        let report = grad_check(
            &[("x", x.clone()), ("gamma", g.clone()), ("beta", b.clone())],
            |t, v| {
                let mut rs = RunningStats { mean: vec![0.1, -0.2, 0.3], var: vec![0.5, 1.5, 2.0] };
                t.batchnorm(v[0], v[1], v[2], &mut rs, BnOptions::with_mode(mode))
            },
            &opts(),
        )
        .unwrap();
        assert_passes("batchnorm", report);
    }
}

#[test]
fn syncbn_forward_through_tape() {
    let mut r = rng(7);
    let x = randn(&[5, 2, 3, 2], &mut r);
    let g = randn(&[2], &mut r);
    let b = randn(&[2], &mut r);
    for devices in [2, 3, 4] {
        let report = grad_check(
            &[("x", x.clone()), ("gamma", g.clone()), ("beta", b.clone())],
            |t, v| {
                let mut rs = RunningStats::new(2);
                t.batchnorm(v[0], v[1], v[2], &mut rs, BnOptions { devices, ..BnOptions::train() })
            },
            &opts(),
        )
        .unwrap();
        assert_passes("syncbn", report);
    }
}

#[test]
fn bilinear_resize_up_and_down() {
    let mut r = rng(8);
    let x = randn(&[1, 2, 4, 5], &mut r);
    for &(h, w) in &[(7, 9), (2, 3), (1, 1), (8, 5)] {
        assert_passes("resize", grad_check(&[("x", x.clone())], |t, v| t.bilinear_resize(v[0], h, w), &opts()).unwrap());
    }
}

#[test]
fn losses() {
    let mut r = rng(9);
    let logits = randn(&[2, 4, 3, 3], &mut r).scale(2.0);
    let target: Vec<i32> = (0..18).map(|i| if i % 7 == 3 { 255 } else { (i * 5 % 4) as i32 }).collect();
    assert_passes("ce", grad_check(&[("logits", logits)], |t, v| t.cross_entropy_2d(v[0], &target, 255), &opts()).unwrap());

    let probs = Tensor::from_fn(&[3, 4], |i| 0.1 + 0.8 * ((i * 7 % 12) as f64 / 12.0));
    let tgt = Tensor::from_fn(&[3, 4], |i| (i % 3 == 0) as u8 as f64);
    assert_passes("bce", grad_check(&[("p", probs)], |t, v| t.binary_cross_entropy(v[0], &tgt), &opts()).unwrap());
}

#[test]
fn layout_ops() {
    let mut r = rng(10);
    let x = randn(&[2, 3, 4], &mut r);
    assert_passes("transpose", grad_check(&[("x", x.clone())], |t, v| t.transpose_last2(v[0]), &opts()).unwrap());
    assert_passes("sum_axis", grad_check(&[("x", x.clone())], |t, v| t.sum_axis(v[0], 1), &opts()).unwrap());
    let x4 = randn(&[2, 3, 2, 2], &mut r);
    assert_passes("gap", grad_check(&[("x", x4.clone())], |t, v| t.global_avg_pool(v[0]), &opts()).unwrap());
    let gate = randn(&[2, 3], &mut r);
    assert_passes("scale_channels", grad_check(&[("x", x4), ("g", gate)], |t, v| t.scale_channels(v[0], v[1]), &opts()).unwrap());
    assert_passes("l2_normalize", grad_check(&[("x", randn(&[3, 5], &mut r))], |t, v: &[Var]| t.l2_normalize(v[0]), &opts()).unwrap());
}
