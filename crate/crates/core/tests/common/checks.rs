//! Property checks shared by the integration tests and the acceptance suite.

use super::*;
use gradalign::attribution::lrp;
use gradalign::autodiff::GradOptions;
use gradalign::criteria::{cos_criterion, cos_criterion_batch, cos_rows, input_grad, l2_criterion, l2_criterion_batch, l2_rows};
use gradalign::data::{Dataset, DomainBounds};
use gradalign::metrics::{gamma_grid, insertion_curve, insertion_mask};
use std::rc::Rc;

pub struct Check {
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

pub const FD_STEP: f64 = 1e-5;

fn constant<'g>(x: Var<'g>, t: &Tensor) -> Var<'g> {
    x.graph().constant(t.clone())
}

/// `sum(y * r)` for a fixed random `r`.
fn contract<'g>(y: Var<'g>, r: &Tensor) -> Result<Var<'g>> {
    Ok(y.mul(constant(y, r))?.sum())
}

/// `sum(y^2 * r)`.
fn contract_sq<'g>(y: Var<'g>, r: &Tensor) -> Result<Var<'g>> {
    contract(y.mul(y)?, r)
}

pub const OP_CASES: usize = 39;

/// Scalar test function exercising one op, and an input where it is smooth.
pub fn op_case(op: usize, rng: &mut ChaCha8Rng) -> (&'static str, Tensor, ScalarFn) {
    let t = |shape: &[usize], rng: &mut ChaCha8Rng| rand_tensor(shape, -1.0, 1.0, rng);
    let x34 = t(&[3, 4], rng);
    let c34 = t(&[3, 4], rng);
    let r34 = t(&[3, 4], rng);
    match op {
        0 => ("add", x34, Box::new(move |x| contract_sq(x.add(constant(x, &c34))?, &r34))),
        1 => ("sub", x34, Box::new(move |x| contract(constant(x, &c34).sub(x)?.mul(x)?, &r34))),
        2 => ("mul", x34, Box::new(move |x| contract(x.mul(constant(x, &c34))?.mul(x)?, &r34))),
        3 => ("div numerator", x34, {
            let d = rand_away_from_zero(&[3, 4], 0.5, 2.0, rng);
            Box::new(move |x| contract(x.mul(x)?.div(constant(x, &d))?, &r34))
        }),
        4 => ("div denominator", x34, Box::new(move |x| contract(constant(x, &c34).div(x.mul(x)?.add_scalar(1.0))?, &r34))),
        5 => ("neg scale add_scalar", x34, Box::new(move |x| contract_sq(x.neg().scale(2.5).add_scalar(0.3), &r34))),
        6 => ("exp", x34, Box::new(move |x| contract(x.exp(), &r34))),
        7 => ("ln", x34, Box::new(move |x| contract(x.mul(x)?.add_scalar(0.5).ln(), &r34))),
        8 => ("sqrt", x34, Box::new(move |x| contract(x.mul(x)?.add_scalar(0.5).sqrt(), &r34))),
        9 => ("safe_recip", x34, Box::new(move |x| contract(x.mul(x)?.add_scalar(0.5).safe_recip(), &r34))),
        10 => {
            let x = rand_away_from_zero(&[3, 4], 0.05, 1.0, rng);
            ("relu", x, Box::new(move |x| contract(x.relu().mul(x)?, &r34)))
        }
        11 => {
            let beta = rng.gen_range(0.5..5.0);
            ("softplus", x34, Box::new(move |x| contract(x.softplus(beta), &r34)))
        }
        12 => {
            let beta = rng.gen_range(0.5..5.0);
            ("sigmoid", x34, Box::new(move |x| contract(x.sigmoid(beta), &r34)))
        }
        13 => ("mean", x34, Box::new(move |x| Ok(x.mul(x)?.mul(x)?.mean()))),
        14 => {
            let r23 = t(&[2, 3], rng);
            ("expand", x34, Box::new(move |x| contract(x.mul(constant(x, &c34))?.sum().expand(&[2, 3])?.exp(), &r23)))
        }
        15 => {
            let r3 = t(&[3], rng);
            ("sum_rows", t(&[3, 2, 2], rng), Box::new(move |x| contract(x.mul(x)?.sum_rows(), &r3)))
        }
        16 => ("expand_rows", t(&[3], rng), Box::new(move |x| contract_sq(x.expand_rows(&[3, 4])?, &r34))),
        17 => ("mul_rows", x34, Box::new(move |x| contract(x.mul_rows(x.sum_rows())?, &r34))),
        18 => {
            let r3 = t(&[3], rng);
            ("channel_sum", t(&[2, 3, 2, 2], rng), Box::new(move |x| contract_sq(x.channel_sum()?, &r3)))
        }
        19 => {
            let r = t(&[2, 3, 2, 2], rng);
            ("channel_expand", t(&[3], rng), Box::new(move |x| contract_sq(x.channel_expand(&[2, 3, 2, 2])?, &r)))
        }
        20 => {
            let (c, r) = (t(&[4, 2], rng), t(&[3, 2], rng));
            ("matmul left", x34, Box::new(move |x| contract_sq(x.matmul(constant(x, &c))?, &r)))
        }
        21 => {
            let (c, r) = (t(&[2, 3], rng), t(&[2, 4], rng));
            ("matmul right", x34, Box::new(move |x| contract_sq(constant(x, &c).matmul(x)?, &r)))
        }
        22 => {
            let r = t(&[3, 3], rng);
            ("matmul transpose", x34, Box::new(move |x| contract(x.matmul(x.t()?)?, &r)))
        }
        23 => {
            let (c, r) = (t(&[2, 6], rng), t(&[3, 4], rng));
            ("reshape flatten", t(&[2, 3, 2], rng), Box::new(move |x| {
                let flat = x.flatten()?.mul(constant(x, &c))?;
                contract_sq(flat.reshape(&[3, 4])?, &r)
            }))
        }
        24 => {
            let (w, r) = (t(&[3, 2, 3, 3], rng), t(&[2, 3, 5, 5], rng));
            ("conv2d input", t(&[2, 2, 5, 5], rng), Box::new(move |x| contract_sq(x.conv2d(constant(x, &w), 1)?, &r)))
        }
        25 => {
            let (inp, r) = (t(&[2, 2, 5, 5], rng), t(&[2, 3, 3, 3], rng));
            ("conv2d weight", t(&[3, 2, 3, 3], rng), Box::new(move |w| contract_sq(constant(w, &inp).conv2d(w, 0)?, &r)))
        }
        26 => {
            let (w, r) = (t(&[2, 1, 3, 3], rng), t(&[1, 2, 6, 6], rng));
            ("conv2d wide padding", t(&[1, 1, 4, 4], rng), Box::new(move |x| contract_sq(x.conv2d(constant(x, &w), 2)?, &r)))
        }
        27 => {
            let r = t(&[1, 2, 2, 2], rng);
            ("maxpool2d", distinct_values(&[1, 2, 4, 4], rng), Box::new(move |x| contract_sq(x.maxpool2d(2)?, &r)))
        }
        28 => {
            let r = t(&[3, 5], rng);
            ("log_softmax", t(&[3, 5], rng), Box::new(move |x| contract(x.log_softmax()?, &r)))
        }
        29 => {
            let r = t(&[3, 5], rng);
            ("softmax", t(&[3, 5], rng), Box::new(move |x| contract(x.softmax()?, &r)))
        }
        30 => ("dot", x34, Box::new(move |x| x.dot(constant(x, &c34))?.mul(x.dot(x)?))),
        31 => ("l2norm", x34, Box::new(move |x| Ok(x.l2norm()))),
        32 => {
            let r3 = t(&[3], rng);
            ("row_dot", x34, Box::new(move |x| contract(x.row_dot(constant(x, &c34))?.mul(x.row_dot(x)?)?, &r3)))
        }
        33 => {
            let r3 = t(&[3], rng);
            ("row_norm", x34, Box::new(move |x| contract(x.row_norm(), &r3)))
        }
        34 => ("pick", t(&[3, 5], rng), Box::new(move |x| Ok(x.log_softmax()?.pick(&[1, 4, 0])?.sum()))),
        35 => {
            let idx = Rc::new(vec![0, 2, 2, 5, 1, 1]);
            let r = t(&[2, 3], rng);
            ("gather", t(&[6], rng), Box::new(move |x| contract_sq(x.gather(idx.clone(), &[2, 3])?, &r)))
        }
        36 => {
            let idx = Rc::new(vec![0, 1, 1, 3, 3, 3]);
            let r = t(&[4], rng);
            ("scatter_add", t(&[6], rng), Box::new(move |x| contract_sq(x.scatter_add(idx.clone(), &[4])?, &r)))
        }
        37 => {
            let r3 = t(&[3], rng);
            ("cosine rows", x34, Box::new(move |x| contract(cos_rows(x, constant(x, &c34))?.values, &r3)))
        }
        38 => {
            let r3 = t(&[3], rng);
            ("l2 rows", x34, Box::new(move |x| contract(l2_rows(x, constant(x, &c34))?, &r3)))
        }
        _ => panic!("no op case {op}"),
    }
}

/// Values on a grid with spacing 0.05 in random order, so max pooling has a
/// clear winner in every window.
fn distinct_values(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| -1.0 + 0.05 * i as f64).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).unwrap()
}

pub struct GradCase {
    pub name: String,
    pub rel_err: f64,
}

fn ad_vs_fd(f: &ScalarFn, x: &Tensor) -> f64 {
    let ad = gradalign::autodiff::gradient(f, x).unwrap();
    let fd = central_diff(|p| eval_scalar(f, p), x, FD_STEP);
    rel_err(&ad, &fd)
}

fn ce_of<'g>(net: &Network, g: &'g Graph, x: Var<'g>, y: &[usize], trainable: bool) -> Result<(Var<'g>, Vec<Var<'g>>)> {
    let b = net.bind(g, trainable);
    let loss = b.logits(x)?.log_softmax()?.pick(y)?.sum().neg();
    Ok((loss, b.params().to_vec()))
}

fn ce_value(net: &Network, x: &Tensor, y: &[usize]) -> f64 {
    let g = Graph::new();
    ce_of(net, &g, g.constant(x.clone()), y, false).unwrap().0.item()
}

/// Input or parameter gradient of the cross-entropy of a random net.
pub fn net_case(k: usize, rng: &mut ChaCha8Rng) -> GradCase {
    let act = match k % 3 {
        0 => Activation::Relu,
        1 => Activation::softplus(rng.gen_range(0.5..5.0)),
        _ => Activation::Identity,
    };
    let cnn = (k / 3) % 2 == 1;
    let wrt_params = (k / 6) % 2 == 1;
    let net = randomize_biases(&random_net(act, cnn, rng), None, rng);
    let name = format!("{} {:?} {} gradient", if cnn { "cnn" } else { "mlp" }, act, if wrt_params { "parameter" } else { "input" });
    for _ in 0..50 {
        let x = batch_input(&net, 2, 0.0, 1.0, rng);
        let y = random_labels(&net, 2, rng);
        let rel = if wrt_params {
            let theta = flat_params(&net);
            let f = |p: &Tensor| ce_value(&with_flat_params(&net, p), &x, &y);
            if straddles_kink(f, &theta, FD_STEP) {
                continue;
            }
            let g = Graph::new();
            let (loss, params) = ce_of(&net, &g, g.constant(x.clone()), &y, true).unwrap();
            let grads = g.backward(loss, &params).unwrap();
            let flat: Vec<f64> = grads.iter().flat_map(|t| t.data().to_vec()).collect();
            let ad = Tensor::new(theta.shape().to_vec(), flat).unwrap();
            rel_err(&ad, &central_diff(f, &theta, FD_STEP))
        } else {
            let f = |p: &Tensor| ce_value(&net, p, &y);
            if straddles_kink(f, &x, FD_STEP) {
                continue;
            }
            let g = Graph::new();
            let xv = g.leaf(x.clone());
            let (loss, _) = ce_of(&net, &g, xv, &y, false).unwrap();
            let ad = g.backward(loss, &[xv]).unwrap().remove(0);
            rel_err(&ad, &central_diff(f, &x, FD_STEP))
        };
        return GradCase { name, rel_err: rel };
    }
    panic!("could not find a kink-free input for {name}");
}

/// `cases` gradient checks: three in four exercise single ops, the rest
/// whole networks.
pub fn gradient_oracle(cases: usize, seed: u64, tol: f64) -> Check {
    let mut rng = rng(seed);
    let mut worst = GradCase { name: String::new(), rel_err: 0.0 };
    let mut failures = Vec::new();
    for k in 0..cases {
        let case = if k % 4 == 3 {
            net_case(k / 4, &mut rng)
        } else {
            let (name, x, f) = op_case((k - k / 4) % OP_CASES, &mut rng);
            GradCase { name: name.to_string(), rel_err: ad_vs_fd(&f, &x) }
        };
        if !(case.rel_err < tol) {
            failures.push(format!("{} ({:.2e})", case.name, case.rel_err));
        }
        if case.rel_err > worst.rel_err || case.rel_err.is_nan() {
            worst = case;
        }
    }
    Check::new(
        failures.is_empty(),
        format!("{cases} cases, worst rel err {:.2e} ({}), failures: {:?}", worst.rel_err, worst.name, failures),
    )
}

/// Parameter gradients of summed Γℓ2 and Γcos through double backprop
/// against finite differences of the criteria themselves.
pub fn double_backprop_oracle(nets: usize, seed: u64, tol: f64) -> Check {
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for k in 0..nets {
        let act = Activation::softplus(rng.gen_range(1.0..5.0));
        let net = randomize_biases(&random_net(act, k % 2 == 1, &mut rng), None, &mut rng);
        let x = batch_input(&net, 3, 0.0, 1.0, &mut rng);
        let delta = rand_tensor(x.shape(), -0.1, 0.1, &mut rng);
        let y = random_labels(&net, 3, &mut rng);
        let xd = x.zip_map(&delta, |a, b| a + b).unwrap();

        let g = Graph::new();
        let b = net.bind(&g, true);
        let ga = input_grad(&b, g.leaf(x.clone()), &y, true).unwrap();
        let gd = input_grad(&b, g.leaf(xd.clone()), &y, true).unwrap();
        let l2 = l2_rows(gd, ga).unwrap().sum();
        let cos = cos_rows(gd, ga).unwrap().values.sum();
        let opts = GradOptions { create_graph: false, allow_unused: true };
        let flat = |vs: Vec<Var<'_>>| {
            let d: Vec<f64> = vs.iter().flat_map(|v| v.value().data().to_vec()).collect();
            Tensor::new(vec![d.len()], d).unwrap()
        };
        let ad_l2 = flat(g.grad(l2, b.params(), opts).unwrap());
        let ad_cos = flat(g.grad(cos, b.params(), opts).unwrap());

        let theta = flat_params(&net);
        let fd_l2 = central_diff(|p| l2_criterion_batch(&with_flat_params(&net, p), &x, &y, &delta).unwrap().iter().sum(), &theta, FD_STEP);
        let fd_cos = central_diff(
            |p| cos_criterion_batch(&with_flat_params(&net, p), &x, &y, &delta).unwrap().iter().map(|c| c.value).sum(),
            &theta,
            FD_STEP,
        );
        for (name, ad, fd) in [("l2", &ad_l2, &fd_l2), ("cos", &ad_cos, &fd_cos)] {
            let e = rel_err(ad, fd);
            worst = worst.max(e);
            if !(e < tol) {
                failures.push(format!("net {k} {name} ({e:.2e})"));
            }
        }
    }
    Check::new(failures.is_empty(), format!("{nets} nets, worst rel err {worst:.2e}, failures: {failures:?}"))
}

/// ReLU nets scale their logits by α under every single-layer α-transform
/// as long as the layers after it carry no bias.
pub fn homogeneity(nets: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for k in 0..nets {
        let base = random_net(Activation::Relu, k % 2 == 1, &mut rng);
        let x = batch_input(&base, 4, 0.0, 1.0, &mut rng);
        for i in 0..base.param_layer_count() {
            let net = randomize_biases(&base, Some(i), &mut rng);
            let g = net.logits(&x).unwrap();
            for alpha in [0.5, 2.0, 10.0] {
                let gt = net.alpha_transform(i, alpha).unwrap().logits(&x).unwrap();
                for (a, b) in gt.data().iter().zip(g.data()) {
                    worst = worst.max((a - alpha * b).abs() / (1.0 + (alpha * b).abs()));
                }
                checked += 1;
            }
        }
    }
    Check::new(worst < 1e-9, format!("{checked} (net, layer, alpha) cases, worst scaled error {worst:.2e}"))
}

/// Largest deviation from homogeneity of a Softplus net under a first-layer
/// α-transform, over `nets` random nets.
pub fn softplus_counterexample(nets: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    let mut best = 0.0f64;
    for k in 0..nets {
        let net = random_net(Activation::softplus(3.0), k % 2 == 1, &mut rng);
        let x = batch_input(&net, 4, 0.0, 1.0, &mut rng);
        let g = net.logits(&x).unwrap();
        let gt = net.alpha_transform(0, 2.0).unwrap().logits(&x).unwrap();
        for (a, b) in gt.data().iter().zip(g.data()) {
            best = best.max((a - 2.0 * b).abs());
        }
    }
    Check::new(best > 1e-3, format!("largest softplus deviation {best:.3e} over {nets} nets"))
}

/// Last-layer α-transform: Γℓ2 scales by α, Γcos does not move.
pub fn last_layer_scaling(triples: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    let (mut worst_l2, mut worst_cos) = (0.0f64, 0.0f64);
    let alphas = [0.5, 2.0, 10.0, 0.1, 3.7];
    for k in 0..triples {
        let act = if k % 2 == 0 { Activation::Relu } else { Activation::softplus(rng.gen_range(1.0..5.0)) };
        let net = randomize_biases(&random_net(act, k % 4 >= 2, &mut rng), None, &mut rng);
        let x = rand_tensor(net.input_shape(), 0.0, 1.0, &mut rng);
        let delta = rand_tensor(net.input_shape(), -0.05, 0.05, &mut rng);
        let y = rng.gen_range(0..net.class_count());
        let alpha = alphas[k % alphas.len()];
        let scaled = net.alpha_transform(net.param_layer_count() - 1, alpha).unwrap();
        let (l2, l2t) = (l2_criterion(&net, &x, y, &delta).unwrap(), l2_criterion(&scaled, &x, y, &delta).unwrap());
        let (c, ct) = (cos_criterion(&net, &x, y, &delta).unwrap(), cos_criterion(&scaled, &x, y, &delta).unwrap());
        let denom = (alpha * l2).abs().max(l2t.abs());
        if denom > 0.0 {
            worst_l2 = worst_l2.max((l2t - alpha * l2).abs() / denom);
        }
        worst_cos = worst_cos.max((ct.value - c.value).abs());
    }
    Check::new(
        worst_l2 < 1e-9 && worst_cos < 1e-9,
        format!("{triples} triples, worst l2 rel err {worst_l2:.2e}, worst cos change {worst_cos:.2e}"),
    )
}

fn bounds_for(net: &Network) -> DomainBounds {
    DomainBounds::uniform(net.input_shape()[0], 0.0, 1.0)
}

/// LRP relevance is conserved layer to layer on every net whose relevant
/// denominators never needed the stabilizer, and an all-negative output
/// layer gives an all-zero map.
pub fn lrp_conservation(nets: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    let mut worst = 0.0f64;
    let mut stabilized = 0;
    for k in 0..nets {
        let act = if k % 3 == 2 { Activation::softplus(3.0) } else { Activation::Relu };
        let net = random_net(act, k % 2 == 1, &mut rng);
        let x = rand_tensor(net.input_shape(), 0.0, 1.0, &mut rng);
        let y = rng.gen_range(0..net.class_count());
        let res = lrp(&net, &x, y, &bounds_for(&net)).unwrap();
        if res.min_denominator < gradalign::attribution::LRP_STABILIZE_BELOW {
            stabilized += 1;
            continue;
        }
        let mut sums = res.layer_sums.clone();
        sums.push(res.map.sum());
        for w in sums.windows(2) {
            worst = worst.max((w[0] - w[1]).abs() / w[0].abs().max(w[1].abs()).max(f64::MIN_POSITIVE));
        }
    }

    let mut zero_maps = true;
    for k in 0..10 {
        let net = random_net(Activation::Relu, k % 2 == 1, &mut rng);
        let mut params: Vec<Tensor> = net.parameters().into_iter().cloned().collect();
        let last_w = params.len() - 2;
        params[last_w] = params[last_w].map(|v| -v.abs() - 1e-3);
        let mut neg = net.clone();
        neg.set_parameters(params).unwrap();
        let x = rand_tensor(net.input_shape(), 0.0, 1.0, &mut rng);
        let res = lrp(&neg, &x, 0, &bounds_for(&neg)).unwrap();
        zero_maps &= res.map.data().iter().all(|&v| v == 0.0);
    }
    Check::new(
        worst < 1e-9 && stabilized * 5 <= nets && zero_maps,
        format!("{nets} nets ({stabilized} hit the stabilizer), worst relative leak {worst:.2e}, all-negative output layer gives zero maps: {zero_maps}"),
    )
}

/// Insertion curve endpoints are exact and masks grow with gamma.
pub fn insertion_endpoints(net: &Network, data: &Dataset) -> Check {
    use gradalign::attribution::{attribute_batch, AttrOptions, Method};
    let grid = gamma_grid();
    let opts = AttrOptions::default();
    let curve = insertion_curve(net, data, Method::Grad, &grid, &opts).unwrap();
    let n = data.len() as f64;
    let probs = net.probs(data.inputs()).unwrap();
    let full: f64 = (0..data.len()).map(|i| probs.row(i)[data.labels()[i]]).sum::<f64>() / n;
    let zeros = Tensor::zeros(data.inputs().shape());
    let zp = net.probs(&zeros).unwrap();
    let empty: f64 = (0..data.len()).map(|i| zp.row(i)[data.labels()[i]]).sum::<f64>() / n;
    let last = *curve.probabilities.last().unwrap();
    let first = curve.probabilities[0];

    let maps = attribute_batch(net, data.inputs(), data.labels(), Method::Grad, &opts).unwrap();
    let mut nested = true;
    for i in 0..data.len() {
        let masks: Vec<Vec<bool>> = grid.iter().map(|&g| insertion_mask(maps.row(i), g)).collect();
        for w in masks.windows(2) {
            nested &= w[0].iter().zip(&w[1]).all(|(&a, &b)| !a || b);
        }
        nested &= masks[0].iter().all(|&m| !m) && masks[grid.len() - 1].iter().all(|&m| m);
    }
    Check::new(
        last == full && first == empty && nested,
        format!("curve(1) {last} vs {full}, curve(0) {first} vs {empty}, nested masks: {nested}"),
    )
}
