mod common;

use common::checks::*;
use common::*;
use gradalign::attribution::{lrp, AttrOptions, Method};
use gradalign::criteria::{cos_between, cos_criterion, l2_criterion};
use gradalign::data::{make_synthetic_digits, DomainBounds};
use gradalign::metrics::{cossim, gamma_grid, insertion_mask, pcc, ssim_2d};
use gradalign::{Activation, Network, Tensor};
use proptest::prelude::*;

#[test]
fn relu_nets_are_homogeneous_per_layer() {
    let c = homogeneity(6, 21);
    assert!(c.pass, "{}", c.detail);
}

#[test]
fn softplus_nets_are_not() {
    let c = softplus_counterexample(4, 22);
    assert!(c.pass, "{}", c.detail);
}

#[test]
fn downstream_bias_breaks_hidden_layer_homogeneity() {
    let mut rng = rng(23);
    let net = randomize_biases(&Network::mlp(&[4, 6, 3], Activation::Relu, 1).unwrap(), None, &mut rng);
    let x = batch_input(&net, 2, 0.0, 1.0, &mut rng);
    let g = net.logits(&x).unwrap();
    let gt = net.alpha_transform(0, 2.0).unwrap().logits(&x).unwrap();
    let worst = gt.data().iter().zip(g.data()).map(|(a, b)| (a - 2.0 * b).abs()).fold(0.0, f64::max);
    assert!(worst > 1e-3);
}

#[test]
fn last_layer_transform_scales_l2_and_keeps_cos() {
    let c = last_layer_scaling(20, 24);
    assert!(c.pass, "{}", c.detail);
}

#[test]
fn lrp_conserves_relevance() {
    let c = lrp_conservation(20, 25);
    assert!(c.pass, "{}", c.detail);
}

#[test]
fn insertion_curve_endpoints_are_exact() {
    let data = make_synthetic_digits(12, 3, 8, 5).unwrap();
    let net = Network::mini_lenet(3, 8, 3, Activation::softplus(3.0), 5).unwrap();
    let c = insertion_endpoints(&net, &data);
    assert!(c.pass, "{}", c.detail);
}

fn small_net(seed: u64, relu: bool) -> Network {
    let act = if relu { Activation::Relu } else { Activation::softplus(3.0) };
    Network::mlp(&[5, 7, 3], act, seed).unwrap()
}

fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cos_criterion_is_half_one_minus_cossim(a in vec_strategy(6), b in vec_strategy(6)) {
        let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assume!(na > 1e-3 && nb > 1e-3);
        let c = cos_between(&a, &b);
        let dot: f64 = a.iter().zip(&b).map(|(p, q)| p * q).sum();
        prop_assert!(!c.degenerate);
        prop_assert!((c.value - 0.5 * (1.0 - dot / (na * nb))).abs() < 1e-9);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&c.value));
    }

    #[test]
    fn cos_criterion_ignores_positive_scale(a in vec_strategy(6), b in vec_strategy(6), s in 0.01f64..100.0) {
        let scaled: Vec<f64> = a.iter().map(|v| v * s).collect();
        let (c1, c2) = (cos_between(&a, &b), cos_between(&scaled, &b));
        prop_assume!(!c1.degenerate && !c2.degenerate);
        prop_assert!((c1.value - c2.value).abs() < 1e-9);
    }

    #[test]
    fn similarity_measures_are_symmetric_and_bounded(a in vec_strategy(16), b in vec_strategy(16)) {
        if let (Ok(x), Ok(y)) = (cossim(&a, &b), cossim(&b, &a)) {
            prop_assert!((x - y).abs() < 1e-12 && x.abs() <= 1.0 + 1e-12);
        }
        if let (Ok(x), Ok(y)) = (pcc(&a, &b), pcc(&b, &a)) {
            prop_assert!((x - y).abs() < 1e-12 && x.abs() <= 1.0 + 1e-12);
        }
        if let Ok(s) = ssim_2d(&a, &a, 4, 4) {
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn insertion_masks_nest(scores in vec_strategy(30)) {
        let grid = gamma_grid();
        let masks: Vec<Vec<bool>> = grid.iter().map(|&g| insertion_mask(&scores, g)).collect();
        for (k, m) in masks.iter().enumerate() {
            prop_assert_eq!(m.iter().filter(|&&v| v).count(), (grid[k] * 30.0 + 0.5).floor() as usize);
        }
        for w in masks.windows(2) {
            prop_assert!(w[0].iter().zip(&w[1]).all(|(&a, &b)| !a || b));
        }
    }

    #[test]
    fn relu_alpha_transform_scales_logits(seed in 0u64..1000, layer in 0usize..2, alpha in 0.1f64..10.0) {
        let net = small_net(seed, true);
        let mut rng = rng(seed);
        let x = batch_input(&net, 3, 0.0, 1.0, &mut rng);
        let g = net.logits(&x).unwrap();
        let gt = net.alpha_transform(layer, alpha).unwrap().logits(&x).unwrap();
        for (a, b) in gt.data().iter().zip(g.data()) {
            prop_assert!((a - alpha * b).abs() < 1e-9 * (1.0 + (alpha * b).abs()));
        }
    }

    #[test]
    fn last_layer_alpha_is_exact_for_criteria(seed in 0u64..1000, relu in any::<bool>(), alpha in 0.1f64..10.0) {
        let net = randomize_biases(&small_net(seed, relu), None, &mut rng(seed));
        let mut r = rng(seed + 1);
        let x = rand_tensor(&[5], 0.0, 1.0, &mut r);
        let d = rand_tensor(&[5], -0.05, 0.05, &mut r);
        let t = net.alpha_transform(1, alpha).unwrap();
        let (l, lt) = (l2_criterion(&net, &x, 0, &d).unwrap(), l2_criterion(&t, &x, 0, &d).unwrap());
        prop_assert!((lt - alpha * l).abs() <= 1e-9 * (alpha * l).abs().max(1e-300));
        let (c, ct) = (cos_criterion(&net, &x, 0, &d).unwrap(), cos_criterion(&t, &x, 0, &d).unwrap());
        prop_assert!((c.value - ct.value).abs() < 1e-9);
    }

    #[test]
    fn lrp_sums_to_one_without_stabilizer(seed in 0u64..1000, relu in any::<bool>(), y in 0usize..3) {
        let net = small_net(seed, relu);
        let x = rand_tensor(&[5], 0.0, 1.0, &mut rng(seed));
        let res = lrp(&net, &x, y, &DomainBounds::uniform(5, 0.0, 1.0)).unwrap();
        prop_assume!(res.min_denominator >= gradalign::attribution::LRP_STABILIZE_BELOW);
        prop_assert!((res.map.sum() - 1.0).abs() < 1e-9);
        for w in res.layer_sums.windows(2) {
            prop_assert!((w[0] - w[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_maps_of_linear_nets_ignore_the_input(seed in 0u64..1000) {
        let net = Network::mlp(&[4, 3], Activation::Identity, seed).unwrap();
        let mut r = rng(seed);
        let a = rand_tensor(&[4], 0.0, 1.0, &mut r);
        let b = rand_tensor(&[4], 0.0, 1.0, &mut r);
        let opts = AttrOptions::default();
        let ha = gradalign::attribution::attribute(&net, &a, 1, Method::Grad, &opts).unwrap();
        let hb = gradalign::attribution::attribute(&net, &b, 1, Method::Grad, &opts).unwrap();
        prop_assert_eq!(ha.scores, hb.scores);
    }
}

#[test]
fn frame_target_has_a_ring() {
    let t = gradalign::attack::make_frame_target(&[1, 6, 6], 1).unwrap();
    let s: &Tensor = &t.scores;
    assert_eq!(s.sum(), 20.0);
}
