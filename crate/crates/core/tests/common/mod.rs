#![allow(dead_code)]

pub mod checks;

use gradalign::autodiff::{Graph, Var};
use gradalign::{Activation, LayerSpec, Network, Result, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type ScalarFn = Box<dyn for<'g> Fn(Var<'g>) -> Result<Var<'g>>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values in `[lo, hi]` with random sign, kept away from zero.
pub fn rand_away_from_zero(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(lo..hi);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn eval_scalar(f: &ScalarFn, x: &Tensor) -> f64 {
    let g = Graph::new();
    let v = g.leaf(x.clone());
    f(v).unwrap().item()
}

pub fn central_diff(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut out = Vec::with_capacity(x.len());
    let mut p = x.clone();
    for i in 0..x.len() {
        let orig = p.data()[i];
        p.data_mut()[i] = orig + h;
        let up = f(&p);
        p.data_mut()[i] = orig - h;
        let down = f(&p);
        p.data_mut()[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

/// True when some coordinate's one-sided differences disagree, i.e. the
/// finite-difference stencil straddles a kink.
pub fn straddles_kink(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> bool {
    let f0 = f(x);
    let mut p = x.clone();
    for i in 0..x.len() {
        let orig = p.data()[i];
        p.data_mut()[i] = orig + h;
        let fwd = (f(&p) - f0) / h;
        p.data_mut()[i] = orig - h;
        let bwd = (f0 - f(&p)) / h;
        p.data_mut()[i] = orig;
        if (fwd - bwd).abs() > 1e-4 * (1.0 + fwd.abs().max(bwd.abs())) {
            return true;
        }
    }
    false
}

/// `|a - b| / max(|a|, |b|)`, zero when both vanish.
pub fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a.zip_map(b, |p, q| p - q).unwrap().norm();
    let scale = a.norm().max(b.norm());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn flat_params(net: &Network) -> Tensor {
    let data: Vec<f64> = net.parameters().iter().flat_map(|t| t.data().to_vec()).collect();
    let n = data.len();
    Tensor::new(vec![n], data).unwrap()
}

pub fn with_flat_params(net: &Network, flat: &Tensor) -> Network {
    let mut out = net.clone();
    let mut off = 0;
    let params = net
        .parameters()
        .iter()
        .map(|t| {
            let n = t.len();
            let p = Tensor::new(t.shape().to_vec(), flat.data()[off..off + n].to_vec()).unwrap();
            off += n;
            p
        })
        .collect();
    out.set_parameters(params).unwrap();
    out
}

/// Small dense net with random hidden widths.
pub fn random_mlp(act: Activation, rng: &mut impl Rng) -> Network {
    let depth = rng.gen_range(1..=3);
    let mut widths = vec![rng.gen_range(3..=7)];
    for _ in 0..depth {
        widths.push(rng.gen_range(3..=8));
    }
    widths.push(rng.gen_range(2..=4));
    Network::mlp(&widths, act, rng.gen()).unwrap()
}

/// conv, conv, pool, flatten, dense, dense on `c x 4 x 4` inputs.
pub fn random_cnn(act: Activation, rng: &mut impl Rng) -> Network {
    let c = rng.gen_range(1..=2);
    let (h1, h2) = (rng.gen_range(2..=3), rng.gen_range(2..=3));
    let classes = rng.gen_range(2..=3);
    let specs = [
        LayerSpec::Conv2d { in_ch: c, out_ch: h1, kernel: 3, pad: 1, bias: true },
        LayerSpec::Conv2d { in_ch: h1, out_ch: h2, kernel: 3, pad: 1, bias: true },
        LayerSpec::MaxPool2d { size: 2 },
        LayerSpec::Flatten,
        LayerSpec::Dense { inputs: h2 * 4, outputs: 5, bias: true },
        LayerSpec::Dense { inputs: 5, outputs: classes, bias: true },
    ];
    Network::init(&specs, &[c, 4, 4], act, rng.gen()).unwrap()
}

pub fn random_net(act: Activation, cnn: bool, rng: &mut impl Rng) -> Network {
    if cnn {
        random_cnn(act, rng)
    } else {
        random_mlp(act, rng)
    }
}

/// Replaces every bias with random values, but only in the first
/// `through + 1` parameterized layers (all of them when `None`).
pub fn randomize_biases(net: &Network, through: Option<usize>, rng: &mut impl Rng) -> Network {
    let mut out = net.clone();
    let mut params = Vec::new();
    let mut layer = 0;
    for l in net.layers() {
        if !l.spec.is_parameterized() {
            continue;
        }
        params.push(l.weight.clone().unwrap());
        if let Some(b) = &l.bias {
            let keep_zero = through.is_some_and(|t| layer > t);
            params.push(if keep_zero { Tensor::zeros(b.shape()) } else { rand_tensor(b.shape(), -0.5, 0.5, rng) });
        }
        layer += 1;
    }
    out.set_parameters(params).unwrap();
    out
}

/// One sample plus a leading batch axis.
pub fn batch_input(net: &Network, count: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let mut shape = vec![count];
    shape.extend_from_slice(net.input_shape());
    rand_tensor(&shape, lo, hi, rng)
}

pub fn random_labels(net: &Network, count: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..count).map(|_| rng.gen_range(0..net.class_count())).collect()
}
