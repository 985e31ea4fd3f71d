//! Sharded batch norm against single-batch references.

mod common;

use common::{randn, rng};
use encnet::checks::{reference_batchnorm, shard_patterns, syncbn_shard_check};
use encnet::ops::batchnorm::{batch_moments, BnOptions, RunningStats};
use encnet::syncbn::{all_reduce, fold_reduce, gather, local_sums, shard_batch, split_sizes, syncbn_forward, Execution};
use encnet::tape::SyncCounter;
use encnet::{Tape, Tensor};
use proptest::prelude::*;

#[test]
fn every_device_count_matches_single_batch_f64() {
    let reports = syncbn_shard_check::<f64>(8, 3, 4, 8, 1).unwrap();
    assert!(reports.len() > 8);
    for r in &reports {
        assert!(r.passed(1e-10), "{r:?}");
    }
}

#[test]
fn every_device_count_matches_single_batch_f32() {
    for r in syncbn_shard_check::<f32>(7, 2, 5, 7, 2).unwrap() {
        assert!(r.passed(1e-5), "{r:?}");
    }
}

#[test]
fn shard_patterns_cover_even_and_skewed() {
    assert_eq!(shard_patterns(7, 1), vec![vec![7]]);
    assert_eq!(shard_patterns(7, 3), vec![vec![3, 2, 2], vec![5, 1, 1]]);
    assert_eq!(shard_patterns(4, 4), vec![vec![1, 1, 1, 1]]);
    assert!(shard_patterns(3, 4).is_empty());
}

#[test]
fn reference_gradients_match_the_tape() {
    let mut r = rng(3);
    let x = randn(&[4, 2, 3, 3], &mut r);
    let dy = randn(&[4, 2, 3, 3], &mut r);
    let (g, b) = (vec![1.3, 0.7], vec![0.1, -0.4]);
    let (y_ref, dx_ref, dg_ref, db_ref) = reference_batchnorm(&x, &g, &b, &dy, 1e-5);
    let mut t = Tape::new();
    let xv = t.param(x);
    let gv = t.param(Tensor::from_vec(&[2], g));
    let bv = t.param(Tensor::from_vec(&[2], b));
    let y = t.batchnorm(xv, gv, bv, &mut RunningStats::new(2), BnOptions::train()).unwrap();
    assert!(t.value(y).max_abs_diff(&y_ref) < 1e-12);
    let grads = t.backward_with(y, dy).unwrap();
    assert!(grads.get(xv).unwrap().max_abs_diff(&dx_ref) < 1e-12);
    assert!(grads.get(gv).unwrap().max_abs_diff(&Tensor::from_vec(&[2], dg_ref)) < 1e-12);
    assert!(grads.get(bv).unwrap().max_abs_diff(&Tensor::from_vec(&[2], db_ref)) < 1e-12);
}

#[test]
fn tape_path_with_devices_matches_single_device() {
    let mut r = rng(4);
    let x = randn(&[6, 3, 2, 2], &mut r);
    let dy = randn(&[6, 3, 2, 2], &mut r);
    let run = |devices: usize| {
        let counter = std::sync::Arc::new(SyncCounter::new());
        let mut t = Tape::with_sync_counter(counter.clone());
        let xv = t.param(x.clone());
        let gv = t.param(Tensor::from_vec(&[3], vec![0.9, 1.1, 1.0]));
        let bv = t.param(Tensor::zeros(&[3]));
        let mut rs = RunningStats::new(3);
        let y = t.batchnorm(xv, gv, bv, &mut rs, BnOptions { devices, ..BnOptions::train() }).unwrap();
        let out = t.value(y).clone();
        let dx = t.backward_with(y, dy.clone()).unwrap().get(xv).unwrap().clone();
        (out, dx, rs, counter.get())
    };
    let (y1, dx1, rs1, syncs1) = run(1);
    assert_eq!(syncs1, 0);
    for devices in [2, 3, 6] {
        let (y, dx, rs, syncs) = run(devices);
        assert!(y.max_abs_diff(&y1) < 1e-12);
        assert!(dx.max_abs_diff(&dx1) < 1e-12);
        for (a, b) in rs.var.iter().zip(&rs1.var) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(syncs, 2, "one forward and one backward synchronization");
    }
}

#[test]
fn running_stats_follow_global_statistics() {
    let mut r = rng(5);
    let x = randn(&[5, 2, 3, 1], &mut r);
    let (mean, var, count) = batch_moments(&x);
    let mut expected = RunningStats::new(2);
    expected.update(&mean, &var, count, 0.1);
    let shards = shard_batch(&x, 3).unwrap();
    let mut got = RunningStats::new(2);
    let counter = SyncCounter::new();
    syncbn_forward(&shards, &[1.0, 1.0], &[0.0, 0.0], 1e-5, Some((&mut got, 0.1)), &counter, Execution::Threaded).unwrap();
    for (a, b) in got.mean.iter().zip(&expected.mean).chain(got.var.iter().zip(&expected.var)) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn threaded_and_serial_agree() {
    let mut r = rng(6);
    let x = randn(&[9, 4, 3, 3], &mut r);
    let shards = shard_batch(&x, 4).unwrap();
    let counter = SyncCounter::new();
    let g = vec![1.0; 4];
    let b = vec![0.0; 4];
    let (a, _) = syncbn_forward(&shards, &g, &b, 1e-5, None, &counter, Execution::Serial).unwrap();
    let (t, _) = syncbn_forward(&shards, &g, &b, 1e-5, None, &counter, Execution::Threaded).unwrap();
    assert_eq!(gather(&a).unwrap(), gather(&t).unwrap());
}

/// Per-channel sums computed with one flat pass over the raw buffer.
fn flat_sums(x: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let (n, c) = (x.dim(0), x.dim(1));
    let plane = x.len() / (n * c);
    let mut s1 = vec![0.0; c];
    let mut s2 = vec![0.0; c];
    for (i, &v) in x.data().iter().enumerate() {
        let ch = (i / plane) % c;
        s1[ch] += v;
        s2[ch] += v * v;
    }
    (s1, s2)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn any_partition_matches_single_batch(
        sizes in prop::collection::vec(1usize..4, 1..6),
        channels in 1usize..4,
        seed in any::<u64>(),
    ) {
        let n: usize = sizes.iter().sum();
        prop_assume!(n >= 2);
        let mut r = rng(seed);
        let x = randn(&[n, channels, 2, 3], &mut r);
        let shards = split_sizes(&x, &sizes).unwrap();
        let g: Vec<f64> = (0..channels).map(|c| 0.5 + c as f64).collect();
        let b = vec![0.25; channels];
        let counter = SyncCounter::new();
        let (ys, _) = syncbn_forward(&shards, &g, &b, 1e-5, None, &counter, Execution::Serial).unwrap();
        prop_assert_eq!(counter.get(), 1);
        let (y_ref, ..) = reference_batchnorm(&x, &g, &b, &x, 1e-5);
        prop_assert!(gather(&ys).unwrap().max_abs_diff(&y_ref) < 1e-10);
    }

    #[test]
    fn local_sums_and_reductions_agree(sizes in prop::collection::vec(1usize..4, 1..9), seed in any::<u64>()) {
        let n: usize = sizes.iter().sum();
        let mut r = rng(seed);
        let x = randn(&[n, 3, 2, 2], &mut r);
        let shards = split_sizes(&x, &sizes).unwrap();
        let partials: Vec<_> = shards.iter().map(|s| local_sums(s).unwrap()).collect();
        let tree = all_reduce(&partials, &SyncCounter::new()).unwrap();
        let folded = fold_reduce(&partials);
        let (s1, s2) = flat_sums(&x);
        prop_assert_eq!(tree.count, n * 4);
        for c in 0..3 {
            prop_assert!((tree.sum_x[c] - s1[c]).abs() < 1e-10);
            prop_assert!((tree.sum_x2[c] - s2[c]).abs() < 1e-10);
            prop_assert!((folded.sum_x[c] - s1[c]).abs() < 1e-10);
        }
    }
}
