//! Network assembly: shape contracts, dilation introspection, parameter
//! budgets, and constructed equivalences.

mod common;

use common::{randn, rng};
use encnet::nn::backbone::BackboneConfig;
use encnet::nn::cifar::{build_cifar_net, CifarConfig, CifarVariant};
use encnet::nn::seg::{build_encnet, build_fcn, multi_scale_eval, SegConfig};
use encnet::nn::{Forward, Mode, ParamStore};
use encnet::ops::softmax;
use encnet::Tensor;

fn tiny_seg(num_classes: usize) -> SegConfig {
    let mut cfg = SegConfig::new(BackboneConfig::basic([4, 8, 8, 8], 4), num_classes);
    cfg.k = 4;
    cfg
}

#[test]
fn fcn_shapes_and_dilations() {
    let cfg = SegConfig::new(BackboneConfig::basic([8, 8, 16, 16], 8), 6);
    let mut store = ParamStore::<f32>::new();
    let net = build_fcn(&mut store, &cfg, &mut rng(1)).unwrap();
    let mut f = Forward::new(&mut store, Mode::Eval).without_grads();
    let x = f.input(randn(&[1, 3, 64, 64], &mut rng(2)).cast());
    let out = net.forward(&mut f, x).unwrap();
    assert_eq!(f.tape.shape(out.logits), &[1, 6, 64, 64]);
    assert_eq!(f.tape.shape(out.head), &[1, 16, 8, 8]);
    let spatial: Vec<_> = out.stages.iter().map(|&s| f.tape.shape(s)[2..].to_vec()).collect();
    assert_eq!(spatial, vec![vec![16, 16], vec![8, 8], vec![8, 8], vec![8, 8]]);
    let d = net.stage_dilations();
    assert!(d[0].iter().chain(&d[1]).all(|&v| v == 1));
    assert!(d[2].iter().all(|&v| v == 2));
    assert!(d[3].iter().all(|&v| v == 4));
    assert!(out.se_main.is_none() && out.se_aux.is_none());
}

#[test]
fn input_not_divisible_by_eight_is_rejected() {
    let mut store = ParamStore::<f64>::new();
    let net = build_fcn(&mut store, &tiny_seg(3), &mut rng(1)).unwrap();
    let mut f = Forward::new(&mut store, Mode::Eval);
    let x = f.input(Tensor::zeros(&[1, 3, 20, 16]));
    let err = net.forward(&mut f, x).unwrap_err().to_string();
    assert!(err.contains("H: 20"), "{err}");
}

#[test]
fn encnet_returns_three_heads() {
    let mut store = ParamStore::<f64>::new();
    let net = build_encnet(&mut store, &tiny_seg(5), &mut rng(3)).unwrap();
    let mut f = Forward::new(&mut store, Mode::Train);
    let x = f.input(randn(&[2, 3, 16, 16], &mut rng(4)));
    let out = net.forward(&mut f, x).unwrap();
    assert_eq!(f.tape.shape(out.logits), &[2, 5, 16, 16]);
    assert_eq!(f.tape.shape(out.se_main.unwrap()), &[2, 5]);
    assert_eq!(f.tape.shape(out.se_aux.unwrap()), &[2, 5]);
}

#[test]
fn zero_codeword_encnet_matches_fcn_with_doubled_classifier() {
    let mut cfg = tiny_seg(4);
    cfg.k = 0;
    let mut fcn_store = ParamStore::<f64>::new();
    let fcn = build_fcn(&mut fcn_store, &cfg, &mut rng(5)).unwrap();
    let mut enc_store = ParamStore::<f64>::new();
    let enc = build_encnet(&mut enc_store, &cfg, &mut rng(5)).unwrap();
    for p in fcn_store.params() {
        let id = enc_store.find(&p.name).unwrap();
        let v = if p.name == "head.classifier.weight" { p.value.scale(2.0) } else { p.value.clone() };
        *enc_store.get_mut(id) = v;
    }
    for name in ["head.context.attention.weight", "head.context.attention.bias"] {
        let id = enc_store.find(name).unwrap();
        let shape = enc_store.get(id).shape().to_vec();
        *enc_store.get_mut(id) = Tensor::zeros(&shape);
    }
    let x = randn(&[2, 3, 16, 16], &mut rng(6));
    let a = fcn.predict(&mut fcn_store, &x).unwrap();
    let b = enc.predict(&mut enc_store, &x).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn encnet_head_budget_desk_and_resnet50() {
    for (cfg, budget) in [(SegConfig::new(BackboneConfig::desk(), 7), 0.05), (SegConfig::resnet50(59), 0.05)] {
        let mut a = ParamStore::<f32>::new();
        build_fcn(&mut a, &cfg, &mut rng(7)).unwrap();
        let mut b = ParamStore::<f32>::new();
        build_encnet(&mut b, &cfg, &mut rng(7)).unwrap();
        let ratio = b.num_parameters() as f64 / a.num_parameters() as f64;
        assert!(ratio - 1.0 < budget, "ratio {ratio} ({} vs {})", b.num_parameters(), a.num_parameters());
    }
}

#[test]
fn cifar_depth_and_parameter_counts() {
    let count = |variant| {
        let mut s = ParamStore::<f32>::new();
        let net = build_cifar_net(&mut s, &CifarConfig::new(variant, 64), &mut rng(8)).unwrap();
        (net.weighted_layers(), s.num_parameters())
    };
    let (depth, plain) = count(CifarVariant::Plain);
    assert_eq!(depth, 14);
    assert!((plain as f64 / 2.7e6 - 1.0).abs() < 0.1, "{plain}");
    let (_, enc) = count(CifarVariant::Encoding);
    assert!((enc as f64 / 3.5e6 - 1.0).abs() < 0.1, "{enc}");
    let (_, se) = count(CifarVariant::Se);
    assert!(se > plain && se < enc);
}

#[test]
fn encoding_block_preserves_identity_with_zero_residual() {
    let mut store = ParamStore::<f64>::new();
    let cfg = CifarConfig { stochastic: false, ..CifarConfig::new(CifarVariant::Encoding, 8) };
    let net = build_cifar_net(&mut store, &cfg, &mut rng(9)).unwrap();
    let block = &net.blocks[1];
    for id in [block.conv2.conv.weight, block.conv2.bn.gamma, block.conv2.bn.beta] {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::zeros(&shape);
    }
    let x = randn(&[2, 8, 6, 6], &mut rng(10)).map(|v: f64| v.max(0.0));
    for mode in [Mode::Train, Mode::Eval] {
        let mut f = Forward::new(&mut store, mode).without_grads();
        let xv = f.input(x.clone());
        let y = block.forward(&mut f, xv).unwrap();
        assert_eq!(f.value(y), &x);
    }
}

#[test]
fn forward_paths_stay_finite() {
    let mut r = rng(11);
    let cfg = tiny_seg(4);
    let mut fs = ParamStore::<f64>::new();
    let fcn = build_fcn(&mut fs, &cfg, &mut r).unwrap();
    let mut es = ParamStore::<f64>::new();
    let enc = build_encnet(&mut es, &cfg, &mut r).unwrap();
    let mut cs = ParamStore::<f64>::new();
    let cifar = build_cifar_net(&mut cs, &CifarConfig::new(CifarVariant::Encoding, 4), &mut r).unwrap();
    let mut draw = rng(12);
    for i in 0..100 {
        let scale = [1.0, 10.0, 1e-3][i % 3];
        let x = randn(&[2, 3, 8, 8], &mut r).scale(scale);
        for (net, store) in [(&fcn, &mut fs), (&enc, &mut es)] {
            let mut f = Forward::new(store, Mode::Train).without_grads();
            let xv = f.input(x.clone());
            let out = net.forward(&mut f, xv).unwrap();
            assert!(f.value(out.logits).all_finite());
            for p in out.se_probs() {
                assert!(f.value(p).all_finite());
            }
        }
        let mut f = Forward::new(&mut cs, Mode::Train).with_rng(&mut draw).without_grads();
        let xv = f.input(x);
        let y = cifar.forward(&mut f, xv).unwrap();
        assert!(f.value(y).all_finite());
    }
}

#[test]
fn multi_scale_single_scale_is_plain_forward() {
    let mut store = ParamStore::<f64>::new();
    let net = build_encnet(&mut store, &tiny_seg(3), &mut rng(13)).unwrap();
    let x = randn(&[1, 3, 16, 16], &mut rng(14));
    let plain = net.predict(&mut store, &x).unwrap();
    let one = multi_scale_eval(&net, &mut store, &x, &[1.0], false).unwrap();
    assert_eq!(plain, one);
    let twice = multi_scale_eval(&net, &mut store, &x, &[1.0, 1.0], false).unwrap();
    assert!(twice.max_abs_diff(&one) < 1e-15);
    assert!(multi_scale_eval(&net, &mut store, &x, &[], false).is_err());
}

#[test]
fn multi_scale_of_uniform_field_is_unchanged() {
    let mut store = ParamStore::<f64>::new();
    let net = build_fcn(&mut store, &tiny_seg(3), &mut rng(15)).unwrap();
    let w = store.find("head.classifier.weight").unwrap();
    let shape = store.get(w).shape().to_vec();
    *store.get_mut(w) = Tensor::zeros(&shape);
    let b = store.find("head.classifier.bias").unwrap();
    *store.get_mut(b) = Tensor::from_vec(&[3], vec![0.3, -1.0, 2.0]);
    let x = randn(&[1, 3, 24, 24], &mut rng(16));
    let single = multi_scale_eval(&net, &mut store, &x, &[1.0], false).unwrap();
    let multi = multi_scale_eval(&net, &mut store, &x, &[0.5, 0.75, 1.25, 1.75], true).unwrap();
    assert!(single.max_abs_diff(&multi) < 1e-12);
    let expected = softmax(&Tensor::from_vec(&[3], vec![0.3, -1.0, 2.0]), 0).unwrap();
    assert!((single.at(&[0, 2, 5, 7]) - expected.data()[2]).abs() < 1e-12);
}
