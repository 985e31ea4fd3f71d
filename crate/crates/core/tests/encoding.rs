//! Encoding layer: brute-force oracles, gradient checks, and orderlessness.

mod common;

use common::{randn, rng};
use encnet::encoding::{aggregate, concat_normalize, encode, soft_assign, stochastic_smoothing_draw, Codebook};
use encnet::gradcheck::{grad_check, GradCheckOptions};
use encnet::nn::Mode;
use encnet::ops::batchnorm::{BnMode, BnOptions, RunningStats};
use encnet::Tensor;
use proptest::prelude::*;
use rand::Rng;

/// Direct evaluation of the soft-assignment residual encoder, one (i, k) at a time.
fn oracle_encode(x: &Tensor<f64>, d: &Tensor<f64>, s: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let (n, c) = (x.dim(0), x.dim(1));
    let k = d.dim(0);
    let mut weights = vec![vec![0.0; k]; n];
    for i in 0..n {
        let sq: Vec<f64> = (0..k)
            .map(|kk| (0..c).map(|j| (x.at(&[i, j]) - d.at(&[kk, j])).powi(2)).sum())
            .collect();
        let denom: f64 = (0..k).map(|j| (-s[j] * sq[j]).exp()).sum();
        for kk in 0..k {
            weights[i][kk] = (-s[kk] * sq[kk]).exp() / denom;
        }
    }
    let mut enc = vec![vec![0.0; c]; k];
    for kk in 0..k {
        for i in 0..n {
            for j in 0..c {
                enc[kk][j] += weights[i][kk] * (x.at(&[i, j]) - d.at(&[kk, j]));
            }
        }
    }
    (weights, enc)
}

#[test]
fn soft_assign_matches_direct_formula() {
    let mut r = rng(11);
    let x = randn(&[3, 2], &mut r);
    let d = randn(&[2, 2], &mut r);
    let s = [0.7, 1.9];
    let w = soft_assign(&x, &Codebook::new(d.clone()).unwrap(), &Tensor::from_vec(&[2], s.to_vec())).unwrap();
    let (ow, _) = oracle_encode(&x, &d, &s);
    for i in 0..3 {
        for k in 0..2 {
            assert!((w.at(&[i, k]) - ow[i][k]).abs() < 1e-12);
        }
    }
}

#[test]
fn encode_matches_double_loop() {
    let mut r = rng(12);
    let x = randn(&[5, 4], &mut r);
    let d = randn(&[3, 4], &mut r);
    let s = [0.5, 1.0, 2.0];
    let out = encode(&x, &Codebook::new(d.clone()).unwrap(), &Tensor::from_vec(&[3], s.to_vec())).unwrap();
    let (_, enc) = oracle_encode(&x, &d, &s);
    for k in 0..3 {
        for j in 0..4 {
            assert!((out.per_codeword_encoders.at(&[k, j]) - enc[k][j]).abs() < 1e-10);
        }
    }
}

fn encoding_inputs(seed: u64) -> Vec<(&'static str, Tensor<f64>)> {
    let mut r = rng(seed);
    vec![
        ("features", randn(&[2, 6, 4], &mut r)),
        ("codewords", randn(&[3, 4], &mut r).scale(0.5)),
        ("smoothing", Tensor::from_fn(&[3], |_| r.random_range(0.3..1.5))),
    ]
}

#[test]
fn encode_gradients() {
    let report = grad_check(&encoding_inputs(13), |t, v| t.encode(v[0], v[1], v[2]), &GradCheckOptions::default()).unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn encode_gradients_through_softplus() {
    let mut inputs = encoding_inputs(14);
    inputs[2].1 = inputs[2].1.map(|v| v - 0.8);
    let report = grad_check(
        &inputs,
        |t, v| {
            let s = t.softplus(v[2])?;
            t.encode(v[0], v[1], s)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn aggregate_gradients() {
    let mut r = rng(15);
    let e = randn(&[3, 4, 5], &mut r);
    let g = Tensor::from_fn(&[5], |_| r.random_range(0.5..1.5));
    let b = randn(&[5], &mut r).scale(0.3);
    let report = grad_check(
        &[("encoders", e), ("gamma", g), ("beta", b)],
        |t, v| t.aggregate_encoders(v[0], v[1], v[2], &mut RunningStats::new(5), BnOptions::train()),
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn concat_normalize_gradients() {
    let mut r = rng(16);
    let e = randn(&[2, 3, 4], &mut r);
    let report = grad_check(
        &[("encoders", e)],
        |t, v| {
            let flat = t.reshape(v[0], &[2, 12])?;
            t.l2_normalize(flat)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn duplicated_codeword_doubles_output() {
    let mut r = rng(17);
    let e1 = randn(&[1, 4], &mut r);
    // two samples so BN has a population; duplicate codeword rows within each sample
    let e2 = randn(&[1, 4], &mut r);
    let mut data = Vec::new();
    for e in [&e1, &e2] {
        data.extend_from_slice(e.data());
        data.extend_from_slice(e.data());
    }
    let dup = Tensor::from_vec(&[2, 2, 4], data);
    let single = Tensor::from_vec(&[2, 1, 4], [e1.data(), e2.data()].concat());
    let g = Tensor::ones(&[4]);
    let b = Tensor::full(&[4], 0.2);
    let a = aggregate(&dup, &g, &b, BnMode::Train, &mut RunningStats::new(4)).unwrap();
    let s = aggregate(&single, &g, &b, BnMode::Train, &mut RunningStats::new(4)).unwrap();
    assert!(a.max_abs_diff(&s.scale(2.0)) < 1e-12);
}

#[test]
fn aggregate_ignores_codeword_order() {
    let mut r = rng(18);
    let e = randn(&[3, 5, 4], &mut r);
    let perm = [3, 0, 4, 1, 2];
    let permuted = Tensor::from_fn(&[3, 5, 4], |i| {
        let (b, k, c) = (i / 20, (i / 4) % 5, i % 4);
        e.at(&[b, perm[k], c])
    });
    let g = Tensor::ones(&[4]);
    let b = Tensor::zeros(&[4]);
    let a = aggregate(&e, &g, &b, BnMode::Train, &mut RunningStats::new(4)).unwrap();
    let p = aggregate(&permuted, &g, &b, BnMode::Train, &mut RunningStats::new(4)).unwrap();
    assert!(a.max_abs_diff(&p) < 1e-12);
}

#[test]
fn stochastic_draw_mean_is_half() {
    let n = 100_000;
    let draws: Vec<f64> = stochastic_smoothing_draw(n, Mode::Train, 2024);
    let mean = draws.iter().sum::<f64>() / n as f64;
    assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
}

#[test]
fn concat_normalize_unit_norm() {
    let mut r = rng(19);
    for _ in 0..20 {
        let (y, _) = concat_normalize(&randn(&[4, 3], &mut r)).unwrap();
        assert!((y.norm() - 1.0).abs() < 1e-9);
    }
}

proptest! {
    #[test]
    fn orderless_over_features(seed in 0u64..1000, n in 1usize..8, k in 1usize..4, c in 1usize..5) {
        let mut r = rng(seed);
        let x = randn(&[n, c], &mut r);
        let d = Codebook::new(randn(&[k, c], &mut r)).unwrap();
        let s = Tensor::from_fn(&[k], |_| r.random_range(0.1..2.0));
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, r.random_range(0..=i));
        }
        let xp = Tensor::from_fn(&[n, c], |i| x.at(&[order[i / c], i % c]));
        let a = encode(&x, &d, &s).unwrap();
        let b = encode(&xp, &d, &s).unwrap();
        prop_assert!(a.per_codeword_encoders.max_abs_diff(&b.per_codeword_encoders) < 1e-12);
        for row in a.assignment_weights.data().chunks(k) {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
        }
    }

    #[test]
    fn codeword_permutation_permutes_encoders(seed in 0u64..1000) {
        let mut r = rng(seed);
        let x = randn(&[6, 3], &mut r);
        let d = randn(&[3, 3], &mut r);
        let s = [0.4, 1.1, 2.3];
        let perm = [2, 0, 1];
        let dp = Tensor::from_fn(&[3, 3], |i| d.at(&[perm[i / 3], i % 3]));
        let sp: Vec<f64> = perm.iter().map(|&p| s[p]).collect();
        let a = encode(&x, &Codebook::new(d).unwrap(), &Tensor::from_vec(&[3], s.to_vec())).unwrap();
        let b = encode(&x, &Codebook::new(dp).unwrap(), &Tensor::from_vec(&[3], sp)).unwrap();
        for k in 0..3 {
            for j in 0..3 {
                prop_assert!((b.per_codeword_encoders.at(&[k, j]) - a.per_codeword_encoders.at(&[perm[k], j])).abs() < 1e-12);
            }
        }
    }
}
