//! Saliency maps: gradient, input x gradient, guided backprop, LRP with the
//! z+ / zB rules, and SmoothGrad; normalization and export.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::kernels::{self, ConvGeom};
use crate::autodiff::{Graph, Var};
use crate::criteria::{input_grad, logit_input_grad};
use crate::data::DomainBounds;
use crate::error::{invalid, Error, Result};
use crate::nn::{BoundNetwork, ForwardMode, LayerSpec, Network};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Grad,
    InputXGrad,
    GuidedBackprop,
    Lrp,
    SmoothGrad,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Grad, Method::InputXGrad, Method::GuidedBackprop, Method::Lrp, Method::SmoothGrad];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Grad => "grad",
            Method::InputXGrad => "xgrad",
            Method::GuidedBackprop => "gbp",
            Method::Lrp => "lrp",
            Method::SmoothGrad => "smoothgrad",
        }
    }

    /// Whether the map can be differentiated with respect to the input.
    pub fn is_differentiable(&self) -> bool {
        matches!(self, Method::Grad | Method::InputXGrad | Method::GuidedBackprop)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown attribution method '{s}' (grad, xgrad, gbp, lrp, smoothgrad)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Normalization {
    L2Unit,
    MinMax255,
    AbsSum1,
}

impl Normalization {
    pub fn name(&self) -> &'static str {
        match self {
            Normalization::L2Unit => "l2_unit",
            Normalization::MinMax255 => "minmax_255",
            Normalization::AbsSum1 => "abs_sum_1",
        }
    }
}

impl FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2_unit" => Ok(Normalization::L2Unit),
            "minmax_255" => Ok(Normalization::MinMax255),
            "abs_sum_1" => Ok(Normalization::AbsSum1),
            _ => Err(invalid(format!("unknown normalization '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap {
    pub scores: Tensor,
    pub method: Method,
    pub class: usize,
    pub normalized: Option<Normalization>,
}

/// Settings that only some methods use.
#[derive(Clone, Debug, PartialEq)]
pub struct AttrOptions {
    /// Input-domain bounds for the zB rule; defaults to `[0, 1]` per channel.
    pub bounds: Option<DomainBounds>,
    pub smooth_sigma: f64,
    pub smooth_samples: usize,
    pub seed: u64,
}

impl Default for AttrOptions {
    fn default() -> Self {
        Self { bounds: None, smooth_sigma: 0.1, smooth_samples: 16, seed: 0 }
    }
}

/// Taped attribution maps for a batch, differentiable with respect to `x`
/// when `create_graph` is set. Only grad, xgrad and gbp are supported.
pub fn attribution_var<'g>(
    net: &BoundNetwork<'_, 'g>,
    x: Var<'g>,
    y: &[usize],
    method: Method,
    create_graph: bool,
) -> Result<Var<'g>> {
    match method {
        Method::Grad => input_grad(net, x, y, create_graph),
        Method::InputXGrad => x.mul(input_grad(net, x, y, create_graph)?),
        Method::GuidedBackprop => logit_input_grad(net.forward(x, ForwardMode::Guided)?, x, y, create_graph),
        Method::Lrp | Method::SmoothGrad => Err(invalid(format!("{method} maps are not differentiable"))),
    }
}

fn gradient_family(net: &Network, xb: &Tensor, y: &[usize], method: Method) -> Result<Tensor> {
    let g = Graph::new();
    let b = net.bind(&g, false);
    let xv = g.leaf(xb.clone());
    let out = attribution_var(&b, xv, y, method, false)?;
    let v = (*out.value()).clone();
    Ok(v)
}

/// Attribution maps for a batch `[B, ...]`, one row per sample.
pub fn attribute_batch(net: &Network, xb: &Tensor, y: &[usize], method: Method, opts: &AttrOptions) -> Result<Tensor> {
    if xb.rows() != y.len() {
        return Err(invalid(format!("{} inputs but {} labels", xb.rows(), y.len())));
    }
    match method {
        Method::Grad | Method::InputXGrad | Method::GuidedBackprop => gradient_family(net, xb, y, method),
        Method::SmoothGrad => smoothgrad_batch(net, xb, y, opts.smooth_sigma, opts.smooth_samples, opts.seed),
        Method::Lrp => {
            let bounds = match &opts.bounds {
                Some(b) => b.clone(),
                None => DomainBounds::uniform(net.input_shape()[0], 0.0, 1.0),
            };
            let mut data = Vec::with_capacity(xb.len());
            for r in 0..xb.rows() {
                data.extend(lrp(net, &xb.row_tensor(r), y[r], &bounds)?.map.into_data());
            }
            Tensor::new(xb.shape().to_vec(), data)
        }
    }
}

pub fn attribute(net: &Network, x: &Tensor, y: usize, method: Method, opts: &AttrOptions) -> Result<AttributionMap> {
    let xb = Tensor::stack(&[x])?;
    let scores = attribute_batch(net, &xb, &[y], method, opts)?.row_tensor(0);
    Ok(AttributionMap { scores, method, class: y, normalized: None })
}

pub fn grad_attr(net: &Network, x: &Tensor, y: usize) -> Result<AttributionMap> {
    attribute(net, x, y, Method::Grad, &AttrOptions::default())
}

pub fn input_x_grad_attr(net: &Network, x: &Tensor, y: usize) -> Result<AttributionMap> {
    attribute(net, x, y, Method::InputXGrad, &AttrOptions::default())
}

pub fn guided_backprop_attr(net: &Network, x: &Tensor, y: usize) -> Result<AttributionMap> {
    attribute(net, x, y, Method::GuidedBackprop, &AttrOptions::default())
}

pub fn smoothgrad_attr(net: &Network, x: &Tensor, y: usize, sigma: f64, n: usize, seed: u64) -> Result<AttributionMap> {
    let opts = AttrOptions { smooth_sigma: sigma, smooth_samples: n, seed, ..Default::default() };
    attribute(net, x, y, Method::SmoothGrad, &opts)
}

pub fn lrp_attr(net: &Network, x: &Tensor, y: usize, bounds: &DomainBounds) -> Result<AttributionMap> {
    Ok(AttributionMap { scores: lrp(net, x, y, bounds)?.map, method: Method::Lrp, class: y, normalized: None })
}

/// Mean input gradient over `n` Gaussian-perturbed copies of each sample.
/// Sample `r` of the batch draws its noise from stream `r` of `seed`, so a
/// row's map does not depend on the rest of the batch.
pub fn smoothgrad_batch(net: &Network, xb: &Tensor, y: &[usize], sigma: f64, n: usize, seed: u64) -> Result<Tensor> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(invalid(format!("smoothgrad sigma must be finite and >= 0, got {sigma}")));
    }
    if n == 0 {
        return Err(invalid("smoothgrad needs at least one sample"));
    }
    if sigma == 0.0 {
        return gradient_family(net, xb, y, Method::Grad);
    }
    let normal = Normal::new(0.0, sigma).expect("sigma checked above");
    let per = xb.row_len();
    let rows = xb.rows();
    let mut noisy = Vec::with_capacity(rows * n * per);
    let mut labels = Vec::with_capacity(rows * n);
    for r in 0..rows {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(r as u64);
        for _ in 0..n {
            noisy.extend(xb.row(r).iter().map(|&v| v + normal.sample(&mut rng)));
            labels.push(y[r]);
        }
    }
    let mut shape = xb.shape().to_vec();
    shape[0] = rows * n;
    let grads = gradient_family(net, &Tensor::new(shape, noisy)?, &labels, Method::Grad)?;
    let mut out = vec![0.0; rows * per];
    for r in 0..rows {
        let acc = &mut out[r * per..(r + 1) * per];
        for k in 0..n {
            // running mean: exact when every sample agrees
            let row = grads.row(r * n + k);
            for (a, &g) in acc.iter_mut().zip(row) {
                *a += (g - *a) / (k + 1) as f64;
            }
        }
    }
    Tensor::new(xb.shape().to_vec(), out)
}

/// Denominators below this magnitude receive the stabilizer.
pub const LRP_STABILIZE_BELOW: f64 = 1e-6;
pub const LRP_STABILIZER: f64 = 1e-9;

fn stabilize(z: f64) -> f64 {
    if z.abs() < LRP_STABILIZE_BELOW {
        z + if z >= 0.0 { LRP_STABILIZER } else { -LRP_STABILIZER }
    } else {
        z
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LrpResult {
    pub map: Tensor,
    /// Total relevance entering each layer from the top, starting with the
    /// output (`layer_sums[0] == 1`) and ending with the input map.
    pub layer_sums: Vec<f64>,
    /// Smallest stabilized denominator magnitude among neurons that carry
    /// relevance.
    pub min_denominator: f64,
}

/// LRP for one sample: z+ rule on every parameterized layer except the one
/// reading the input, which uses the zB rule; winner-take-all through max
/// pooling; biases ignored.
pub fn lrp(net: &Network, x: &Tensor, y: usize, bounds: &DomainBounds) -> Result<LrpResult> {
    if x.shape() != net.input_shape() {
        return Err(Error::ShapeMismatch { op: "lrp", lhs: x.shape().to_vec(), rhs: net.input_shape().to_vec() });
    }
    if y >= net.class_count() {
        return Err(invalid(format!("class {y} out of range")));
    }
    let (lo, hi) = bounds.expand(net.input_shape())?;
    let layers = net.layers();
    let act = net.activation();
    let last = layers.len() - 1;

    // forward trace: inputs[i] is the input of layer i (activation already applied)
    let mut inputs: Vec<Tensor> = Vec::with_capacity(layers.len());
    let mut h = x.clone();
    for (i, l) in layers.iter().enumerate() {
        inputs.push(h.clone());
        let mut z = match l.spec {
            LayerSpec::Dense { inputs: k, outputs: m, .. } => {
                let w = l.weight.as_ref().expect("dense weight");
                let wt = kernels::transpose(w.data(), m, k);
                Tensor::from_parts(vec![m], kernels::matmul(h.data(), &wt, 1, k, m))
            }
            LayerSpec::Conv2d { pad, .. } => {
                let w = l.weight.as_ref().expect("conv weight");
                let geom = conv_geom(&l.spec, h.shape(), pad);
                let out = kernels::conv2d(h.data(), w.data(), &geom);
                Tensor::from_parts(vec![geom.out_ch, geom.out_h(), geom.out_w()], out)
            }
            LayerSpec::MaxPool2d { size } => {
                let s = h.shape();
                let idx = kernels::maxpool_argmax(h.data(), s[0], s[1], s[2], size);
                Tensor::from_parts(vec![s[0], s[1] / size, s[2] / size], idx.iter().map(|&k| h.data()[k]).collect())
            }
            LayerSpec::Flatten => h.reshape(&[h.len()])?,
        };
        if let Some(b) = &l.bias {
            let per = z.len() / b.len();
            for (k, v) in z.data_mut().iter_mut().enumerate() {
                *v += b.data()[k / per];
            }
        }
        if l.spec.is_parameterized() && i != last {
            z = z.map(|v| act.apply_scalar(v));
        }
        h = z;
    }

    let first_param = layers.iter().position(|l| l.spec.is_parameterized()).expect("network has a dense layer");
    let mut r = Tensor::zeros(&[net.class_count()]);
    r.data_mut()[y] = 1.0;
    let mut sums = vec![r.sum()];
    let mut min_den = f64::INFINITY;

    for i in (0..layers.len()).rev() {
        let l = &layers[i];
        let a = &inputs[i];
        r = match l.spec {
            LayerSpec::Flatten => r.reshape(a.shape())?,
            LayerSpec::MaxPool2d { size } => {
                let s = a.shape();
                let idx = kernels::maxpool_argmax(a.data(), s[0], s[1], s[2], size);
                let mut out = Tensor::zeros(s);
                for (&k, &v) in idx.iter().zip(r.data()) {
                    out.data_mut()[k] += v;
                }
                out
            }
            LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } => {
                let w = l.weight.as_ref().expect("parameterized layer");
                let wp = w.map(|v| v.max(0.0));
                let lin = LinearMap::new(&l.spec, a.shape());
                if i == first_param {
                    let wn = w.map(|v| v.min(0.0));
                    let z = lin
                        .forward(a.data(), w.data())
                        .iter()
                        .zip(lin.forward(lo.data(), wp.data()))
                        .zip(lin.forward(hi.data(), wn.data()))
                        .map(|((p, q), s)| p - q - s)
                        .collect::<Vec<_>>();
                    let s = ratio(r.data(), &z, &mut min_den);
                    let cx = lin.backward(&s, w.data());
                    let cl = lin.backward(&s, wp.data());
                    let ch = lin.backward(&s, wn.data());
                    let data = (0..a.len())
                        .map(|k| a.data()[k] * cx[k] - lo.data()[k] * cl[k] - hi.data()[k] * ch[k])
                        .collect();
                    Tensor::from_parts(a.shape().to_vec(), data)
                } else {
                    let z = lin.forward(a.data(), wp.data());
                    let s = ratio(r.data(), &z, &mut min_den);
                    let c = lin.backward(&s, wp.data());
                    Tensor::from_parts(a.shape().to_vec(), a.data().iter().zip(&c).map(|(p, q)| p * q).collect())
                }
            }
        };
        if l.spec.is_parameterized() {
            sums.push(r.sum());
        }
    }
    Ok(LrpResult { map: r, layer_sums: sums, min_denominator: min_den })
}

fn ratio(r: &[f64], z: &[f64], min_den: &mut f64) -> Vec<f64> {
    r.iter()
        .zip(z)
        .map(|(&rv, &zv)| {
            let d = stabilize(zv);
            if rv != 0.0 {
                *min_den = min_den.min(d.abs());
            }
            rv / d
        })
        .collect()
}

fn conv_geom(spec: &LayerSpec, in_shape: &[usize], pad: usize) -> ConvGeom {
    let LayerSpec::Conv2d { in_ch, out_ch, kernel, .. } = *spec else { unreachable!("conv spec") };
    ConvGeom { batch: 1, in_ch, out_ch, in_h: in_shape[1], in_w: in_shape[2], kernel, pad }
}

/// A dense or convolutional layer as a linear map without bias.
enum LinearMap {
    Dense { k: usize, m: usize },
    Conv(ConvGeom),
}

impl LinearMap {
    fn new(spec: &LayerSpec, in_shape: &[usize]) -> Self {
        match *spec {
            LayerSpec::Dense { inputs, outputs, .. } => LinearMap::Dense { k: inputs, m: outputs },
            LayerSpec::Conv2d { pad, .. } => LinearMap::Conv(conv_geom(spec, in_shape, pad)),
            _ => unreachable!("linear layers only"),
        }
    }

    fn forward(&self, a: &[f64], w: &[f64]) -> Vec<f64> {
        match self {
            LinearMap::Dense { k, m } => kernels::matmul(w, a, *m, *k, 1),
            LinearMap::Conv(g) => kernels::conv2d(a, w, g),
        }
    }

    /// Transposed map applied to an output-shaped vector.
    fn backward(&self, s: &[f64], w: &[f64]) -> Vec<f64> {
        match self {
            LinearMap::Dense { k, m } => kernels::matmul(s, w, 1, *m, *k),
            LinearMap::Conv(g) => kernels::conv2d_dx(s, w, g),
        }
    }
}

/// Normalizes scores under the given scheme.
pub fn normalize_scores(scores: &Tensor, scheme: Normalization) -> Result<Tensor> {
    match scheme {
        Normalization::L2Unit => {
            let n = scores.norm();
            if !(n > 1e-12) {
                return Err(Error::Degenerate(format!("map norm {n:e} too small for l2_unit")));
            }
            Ok(scores.scale(1.0 / n))
        }
        Normalization::MinMax255 => {
            let (lo, hi) = min_max(scores.data());
            if hi - lo <= 0.0 {
                return Ok(Tensor::zeros(scores.shape()));
            }
            let span = hi - lo;
            Ok(scores.map(|v| (v - lo) / span * 255.0))
        }
        Normalization::AbsSum1 => {
            let s: f64 = scores.data().iter().map(|v| v.abs()).sum();
            if !(s > 0.0) {
                return Err(Error::Degenerate("all-zero map cannot be normalized to unit absolute sum".into()));
            }
            Ok(scores.scale(1.0 / s))
        }
    }
}

pub fn normalize_map(map: &AttributionMap, scheme: Normalization) -> Result<AttributionMap> {
    Ok(AttributionMap { scores: normalize_scores(&map.scores, scheme)?, normalized: Some(scheme), ..map.clone() })
}

pub(crate) fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)))
}

/// Sums a `[C, H, W]` map over channels; other shapes pass through as a
/// single row.
pub fn spatial_map(scores: &Tensor) -> (usize, usize, Vec<f64>) {
    let s = scores.shape();
    match s.len() {
        3 => {
            let (c, h, w) = (s[0], s[1], s[2]);
            let mut out = vec![0.0; h * w];
            for ch in 0..c {
                for (o, v) in out.iter_mut().zip(&scores.data()[ch * h * w..(ch + 1) * h * w]) {
                    *o += v;
                }
            }
            (h, w, out)
        }
        2 => (s[0], s[1], scores.data().to_vec()),
        _ => (1, scores.len(), scores.data().to_vec()),
    }
}

/// Binary PGM (P5) of the channel-summed, min-max scaled map.
pub fn heatmap_pgm(map: &AttributionMap) -> Vec<u8> {
    let (h, w, data) = spatial_map(&map.scores);
    let scaled = normalize_scores(&Tensor::from_parts(vec![data.len()], data), Normalization::MinMax255)
        .expect("minmax never fails");
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(scaled.data().iter().map(|v| v.round().clamp(0.0, 255.0) as u8));
    out
}

pub fn write_heatmap(map: &AttributionMap, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, heatmap_pgm(map))?;
    Ok(())
}

/// Raw little-endian f64 dump at `path` plus a `<path>.txt` sidecar.
pub fn write_raw(map: &AttributionMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = map.scores.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes)?;
    let dims: Vec<String> = map.scores.shape().iter().map(|d| d.to_string()).collect();
    let sidecar = format!(
        "shape {}\nmethod {}\nclass {}\nnormalization {}\n",
        dims.join(" "),
        map.method,
        map.class,
        map.normalized.map_or("none", |n| n.name()),
    );
    let mut side = path.as_os_str().to_owned();
    side.push(".txt");
    fs::write(side, sidecar)?;
    Ok(())
}

/// Reads a dump written by [`write_raw`].
pub fn read_raw(path: impl AsRef<Path>) -> Result<AttributionMap> {
    let path = path.as_ref();
    let mut side = path.as_os_str().to_owned();
    side.push(".txt");
    let text = fs::read_to_string(side)?;
    let mut shape = None;
    let mut method = None;
    let mut class = None;
    let mut normalized = None;
    for line in text.lines() {
        let (k, v) = line.split_once(' ').unwrap_or((line, ""));
        match k {
            "shape" => {
                shape = Some(
                    v.split_whitespace()
                        .map(|d| d.parse().map_err(|_| Error::Format(format!("bad dim '{d}'"))))
                        .collect::<Result<Vec<usize>>>()?,
                )
            }
            "method" => method = Some(v.parse::<Method>()?),
            "class" => class = Some(v.parse().map_err(|_| Error::Format(format!("bad class '{v}'")))?),
            "normalization" => normalized = if v == "none" { None } else { Some(v.parse()?) },
            _ => return Err(Error::Format(format!("unknown sidecar key '{k}'"))),
        }
    }
    let bytes = fs::read(path)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format("raw dump length is not a multiple of 8".into()));
    }
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(AttributionMap {
        scores: Tensor::new(shape.ok_or_else(|| Error::Format("sidecar lacks shape".into()))?, data)?,
        method: method.ok_or_else(|| Error::Format("sidecar lacks method".into()))?,
        class: class.ok_or_else(|| Error::Format("sidecar lacks class".into()))?,
        normalized,
    })
}
