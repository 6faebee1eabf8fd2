//! Feed-forward networks: layer specs, parameters, forward passes and the
//! per-layer parameter scaling used by the homogeneity checks.

mod checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, GuidedAct, Var};
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Nonlinearity applied after every parameterized layer except the last.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    Softplus { beta: f64 },
    Identity,
}

impl Activation {
    pub const DEFAULT_BETA: f64 = 3.0;

    pub fn softplus(beta: f64) -> Self {
        Activation::Softplus { beta }
    }

    pub fn is_twice_differentiable(&self) -> bool {
        !matches!(self, Activation::Relu)
    }

    fn guided(&self) -> GuidedAct {
        match *self {
            Activation::Relu => GuidedAct::Relu,
            Activation::Softplus { beta } => GuidedAct::Softplus(beta),
            Activation::Identity => GuidedAct::Identity,
        }
    }

    pub fn apply<'g>(&self, z: Var<'g>) -> Var<'g> {
        match *self {
            Activation::Relu => z.relu(),
            Activation::Softplus { beta } => z.softplus(beta),
            Activation::Identity => z,
        }
    }

    pub fn apply_scalar(&self, z: f64) -> f64 {
        match *self {
            Activation::Relu => z.max(0.0),
            Activation::Softplus { beta } => crate::autodiff::kernels::softplus(z, beta),
            Activation::Identity => z,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize, bias: bool },
    Conv2d { in_ch: usize, out_ch: usize, kernel: usize, pad: usize, bias: bool },
    MaxPool2d { size: usize },
    Flatten,
}

impl LayerSpec {
    pub fn is_parameterized(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. })
    }

    fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerSpec::Dense { inputs, outputs, .. } => Some(vec![outputs, inputs]),
            LayerSpec::Conv2d { in_ch, out_ch, kernel, .. } => Some(vec![out_ch, in_ch, kernel, kernel]),
            _ => None,
        }
    }

    fn bias_len(&self) -> Option<usize> {
        match *self {
            LayerSpec::Dense { outputs, bias: true, .. } => Some(outputs),
            LayerSpec::Conv2d { out_ch, bias: true, .. } => Some(out_ch),
            _ => None,
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, .. } => inputs,
            LayerSpec::Conv2d { in_ch, kernel, .. } => in_ch * kernel * kernel,
            _ => 0,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |why: &str| Error::InvalidShape { op: "layer", shape: input.to_vec(), reason: format!("{self:?}: {why}") };
        match *self {
            LayerSpec::Dense { inputs, outputs, .. } => {
                if input != [inputs] {
                    return Err(bad("dense input width"));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv2d { in_ch, out_ch, kernel, pad, .. } => {
                if input.len() != 3 || input[0] != in_ch || input[1] + 2 * pad < kernel || input[2] + 2 * pad < kernel {
                    return Err(bad("conv input geometry"));
                }
                Ok(vec![out_ch, input[1] + 2 * pad + 1 - kernel, input[2] + 2 * pad + 1 - kernel])
            }
            LayerSpec::MaxPool2d { size } => {
                if input.len() != 3 || size == 0 || input[1] < size || input[2] < size {
                    return Err(bad("pool input geometry"));
                }
                Ok(vec![input[0], input[1] / size, input[2] / size])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
    activation: Activation,
    class_count: usize,
    input_shape: Vec<usize>,
    seed: u64,
}

/// How activations behave on the backward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForwardMode {
    Standard,
    /// Guided-backprop gating at every activation site.
    Guided,
}

impl Network {
    /// Builds a network with Kaiming-uniform weights and zero biases.
    pub fn init(
        specs: &[LayerSpec],
        input_shape: &[usize],
        activation: Activation,
        seed: u64,
    ) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        for s in specs {
            shape = s.output_shape(&shape)?;
        }
        if shape.len() != 1 {
            return Err(invalid(format!("network output must be a vector, got {shape:?}")));
        }
        let last_param = specs.iter().rposition(|s| s.is_parameterized());
        if last_param != Some(specs.len() - 1) {
            return Err(invalid("the final layer must be dense"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = specs
            .iter()
            .map(|spec| {
                let weight = spec.weight_shape().map(|ws| {
                    let bound = (6.0 / spec.fan_in() as f64).sqrt();
                    let n = ws.iter().product();
                    Tensor::from_parts(ws, (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
                });
                let bias = spec.bias_len().map(|n| Tensor::zeros(&[n]));
                Layer { spec: *spec, weight, bias }
            })
            .collect();
        Ok(Self { layers, activation, class_count: shape[0], input_shape: input_shape.to_vec(), seed })
    }

    /// Dense stack `widths[0] -> ... -> widths[last]`.
    pub fn mlp(widths: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if widths.len() < 2 {
            return Err(invalid("mlp needs at least input and output widths"));
        }
        let specs: Vec<LayerSpec> = widths
            .windows(2)
            .map(|w| LayerSpec::Dense { inputs: w[0], outputs: w[1], bias: true })
            .collect();
        Self::init(&specs, &widths[..1], activation, seed)
    }

    /// The CIFAR-10 LeNet: four 3x3 convolutions in two pooled blocks and two
    /// dense layers, for `3 x 32 x 32` inputs.
    pub fn lenet(classes: usize, activation: Activation, seed: u64) -> Result<Self> {
        let conv = |i, o| LayerSpec::Conv2d { in_ch: i, out_ch: o, kernel: 3, pad: 1, bias: true };
        let specs = [
            conv(3, 32),
            conv(32, 32),
            LayerSpec::MaxPool2d { size: 2 },
            conv(32, 64),
            conv(64, 64),
            LayerSpec::MaxPool2d { size: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: 4096, outputs: 256, bias: true },
            LayerSpec::Dense { inputs: 256, outputs: classes, bias: true },
        ];
        Self::init(&specs, &[3, 32, 32], activation, seed)
    }

    /// Same layout as [`Network::lenet`] with 8-channel convolutions, sized
    /// for `channels x side x side` inputs (`side` divisible by 4).
    pub fn mini_lenet(channels: usize, side: usize, classes: usize, activation: Activation, seed: u64) -> Result<Self> {
        if side < 4 || side % 4 != 0 {
            return Err(invalid(format!("mini_lenet side must be a positive multiple of 4, got {side}")));
        }
        let conv = |i, o| LayerSpec::Conv2d { in_ch: i, out_ch: o, kernel: 3, pad: 1, bias: true };
        let q = side / 4;
        let specs = [
            conv(channels, 8),
            conv(8, 8),
            LayerSpec::MaxPool2d { size: 2 },
            conv(8, 8),
            conv(8, 8),
            LayerSpec::MaxPool2d { size: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense { inputs: 8 * q * q, outputs: 32, bias: true },
            LayerSpec::Dense { inputs: 32, outputs: classes, bias: true },
        ];
        Self::init(&specs, &[channels, side, side], activation, seed)
    }

    pub(crate) fn from_layers(
        layers: Vec<Layer>,
        activation: Activation,
        input_shape: Vec<usize>,
        seed: u64,
    ) -> Result<Self> {
        let mut shape = input_shape.clone();
        for l in &layers {
            shape = l.spec.output_shape(&shape)?;
            if l.weight.as_ref().map(|w| w.shape().to_vec()) != l.spec.weight_shape()
                || l.bias.as_ref().map(|b| b.len()) != l.spec.bias_len()
            {
                return Err(Error::Format(format!("parameter shapes do not match {:?}", l.spec)));
            }
        }
        if shape.len() != 1 {
            return Err(Error::Format(format!("network output must be a vector, got {shape:?}")));
        }
        Ok(Self { layers, activation, class_count: shape[0], input_shape, seed })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn with_activation(&self, activation: Activation) -> Self {
        Self { activation, ..self.clone() }
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of parameterized layers (the `θ_i` count).
    pub fn param_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| l.spec.is_parameterized()).count()
    }

    /// Parameter tensors in layer order, weight before bias.
    pub fn parameters(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    /// Replaces all parameters, in [`Network::parameters`] order.
    pub fn set_parameters(&mut self, params: Vec<Tensor>) -> Result<()> {
        let expected = self.parameters().len();
        if params.len() != expected {
            return Err(invalid(format!("expected {expected} parameter tensors, got {}", params.len())));
        }
        let mut it = params.into_iter();
        for l in &mut self.layers {
            for slot in [&mut l.weight, &mut l.bias] {
                if let Some(cur) = slot {
                    let new = it.next().expect("counted above");
                    if new.shape() != cur.shape() {
                        return Err(Error::ShapeMismatch { op: "set_parameters", lhs: cur.shape().to_vec(), rhs: new.shape().to_vec() });
                    }
                    *cur = new;
                }
            }
        }
        Ok(())
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
            .collect()
    }

    /// Scales weight and bias of the `index`-th parameterized layer by `alpha`,
    /// leaving `self` untouched.
    pub fn alpha_transform(&self, index: usize, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(invalid(format!("alpha must be positive and finite, got {alpha}")));
        }
        let pos = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.spec.is_parameterized())
            .map(|(i, _)| i)
            .nth(index)
            .ok_or_else(|| invalid(format!("layer index {index} out of range (have {})", self.param_layer_count())))?;
        let mut out = self.clone();
        let layer = &mut out.layers[pos];
        for t in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
            *t = t.scale(alpha);
        }
        Ok(out)
    }

    /// Puts the parameters on `g`, as differentiable leaves when `trainable`.
    pub fn bind<'n, 'g>(&'n self, g: &'g Graph, trainable: bool) -> BoundNetwork<'n, 'g> {
        let params = self
            .parameters()
            .into_iter()
            .map(|t| if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        BoundNetwork { net: self, graph: g, params }
    }

    /// Logits for a batch `[B, input_shape...]`.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let b = self.bind(&g, false);
        let out = b.logits(g.constant(x.clone()))?;
        Ok((*out.value()).clone())
    }

    /// Logits for a single sample shaped like `input_shape`.
    pub fn logits_one(&self, x: &Tensor) -> Result<Tensor> {
        let batch = Tensor::stack(&[x])?;
        Ok(self.logits(&batch)?.row_tensor(0))
    }

    /// Class probabilities for a batch.
    pub fn probs(&self, x: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let b = self.bind(&g, false);
        let out = b.logits(g.constant(x.clone()))?.softmax()?;
        Ok((*out.value()).clone())
    }

    pub fn probs_one(&self, x: &Tensor) -> Result<Tensor> {
        let batch = Tensor::stack(&[x])?;
        Ok(self.probs(&batch)?.row_tensor(0))
    }

    /// Argmax class per batch row; ties go to the lowest index.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok((0..logits.rows()).map(|r| argmax(logits.row(r))).collect())
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// A network whose parameters live on a particular graph.
pub struct BoundNetwork<'n, 'g> {
    net: &'n Network,
    graph: &'g Graph,
    params: Vec<Var<'g>>,
}

impl<'n, 'g> BoundNetwork<'n, 'g> {
    pub fn network(&self) -> &'n Network {
        self.net
    }

    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn params(&self) -> &[Var<'g>] {
        &self.params
    }

    pub fn logits(&self, x: Var<'g>) -> Result<Var<'g>> {
        self.forward(x, ForwardMode::Standard)
    }

    pub fn forward(&self, x: Var<'g>, mode: ForwardMode) -> Result<Var<'g>> {
        let xs = x.shape();
        if xs.len() != self.net.input_shape.len() + 1 || xs[1..] != self.net.input_shape[..] {
            return Err(Error::ShapeMismatch { op: "forward", lhs: xs, rhs: self.net.input_shape.clone() });
        }
        let last = self.net.layers.len() - 1;
        let act = self.net.activation;
        let mut h = x;
        let mut p = 0;
        for (i, layer) in self.net.layers.iter().enumerate() {
            h = match layer.spec {
                LayerSpec::Dense { .. } => {
                    let w = self.params[p];
                    p += 1;
                    let mut z = h.matmul(w.t()?)?;
                    if layer.bias.is_some() {
                        let b = self.params[p];
                        p += 1;
                        z = z.add(b.channel_expand(&z.shape())?)?;
                    }
                    z
                }
                LayerSpec::Conv2d { pad, .. } => {
                    let w = self.params[p];
                    p += 1;
                    let mut z = h.conv2d(w, pad)?;
                    if layer.bias.is_some() {
                        let b = self.params[p];
                        p += 1;
                        z = z.add(b.channel_expand(&z.shape())?)?;
                    }
                    z
                }
                LayerSpec::MaxPool2d { size } => h.maxpool2d(size)?,
                LayerSpec::Flatten => h.flatten()?,
            };
            if layer.spec.is_parameterized() && i != last {
                h = match mode {
                    ForwardMode::Standard => act.apply(h),
                    ForwardMode::Guided => h.guided(act.guided()),
                };
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_batch(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_dense_layer() {
        let mut net = Network::mlp(&[2, 2], Activation::Identity, 0).unwrap();
        net.set_parameters(vec![Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(), Tensor::zeros(&[2])])
            .unwrap();
        let out = net.logits_one(&Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0]);
    }

    #[test]
    fn lenet_emits_ten_logits() {
        let net = Network::lenet(10, Activation::softplus(3.0), 1).unwrap();
        let x = rand_batch(&[1, 3, 32, 32], 2);
        assert_eq!(net.logits(&x).unwrap().shape(), &[1, 10]);
        assert_eq!(net.param_layer_count(), 6);
    }

    #[test]
    fn zero_network_gives_zero_logits_and_uniform_probs() {
        let mut net = Network::mlp(&[3, 5, 10], Activation::Relu, 0).unwrap();
        let zeros: Vec<Tensor> = net.parameters().iter().map(|t| Tensor::zeros(t.shape())).collect();
        net.set_parameters(zeros).unwrap();
        let x = rand_batch(&[2, 3], 1);
        assert!(net.logits(&x).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(net.probs(&x).unwrap().data().iter().all(|&p| (p - 0.1).abs() < 1e-15));
    }

    #[test]
    fn probs_saturate_without_overflow() {
        let mut net = Network::mlp(&[1, 2], Activation::Identity, 0).unwrap();
        net.set_parameters(vec![Tensor::matrix(2, 1, vec![1000.0, 0.0]).unwrap(), Tensor::zeros(&[2])])
            .unwrap();
        let p = net.probs_one(&Tensor::vector(vec![1.0])).unwrap();
        assert_eq!(p.data(), &[1.0, 0.0]);
    }

    #[test]
    fn input_shape_is_checked() {
        let net = Network::mlp(&[3, 2], Activation::Relu, 0).unwrap();
        assert!(net.logits(&Tensor::zeros(&[1, 4])).is_err());
    }

    #[test]
    fn alpha_transform_validates() {
        let net = Network::mlp(&[3, 4, 2], Activation::Relu, 0).unwrap();
        assert!(net.alpha_transform(0, 0.0).is_err());
        assert!(net.alpha_transform(0, -1.0).is_err());
        assert!(net.alpha_transform(2, 1.0).is_err());
        let same = net.alpha_transform(1, 1.0).unwrap();
        let x = rand_batch(&[4, 3], 9);
        assert_eq!(same.logits(&x).unwrap(), net.logits(&x).unwrap());
    }

    #[test]
    fn relu_every_layer_is_homogeneous() {
        let net = Network::mlp(&[4, 6, 5, 3], Activation::Relu, 11).unwrap();
        let x = rand_batch(&[8, 4], 12);
        let base = net.logits(&x).unwrap();
        for i in 0..3 {
            let t = net.alpha_transform(i, 2.0).unwrap().logits(&x).unwrap();
            for (a, b) in t.data().iter().zip(base.data()) {
                assert!((a - 2.0 * b).abs() < 1e-9 * (1.0 + (2.0 * b).abs()));
            }
        }
    }

    #[test]
    fn softplus_hidden_layer_breaks_homogeneity() {
        let net = Network::mlp(&[4, 6, 3], Activation::softplus(3.0), 5).unwrap();
        let x = rand_batch(&[8, 4], 6);
        let base = net.logits(&x).unwrap();
        let t = net.alpha_transform(0, 2.0).unwrap().logits(&x).unwrap();
        let dev = t.data().iter().zip(base.data()).map(|(a, b)| (a - 2.0 * b).abs()).fold(0.0, f64::max);
        assert!(dev > 1e-3);
    }

    #[test]
    fn init_is_seeded() {
        let a = Network::mlp(&[5, 7, 2], Activation::Relu, 3).unwrap();
        let b = Network::mlp(&[5, 7, 2], Activation::Relu, 3).unwrap();
        let c = Network::mlp(&[5, 7, 2], Activation::Relu, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.parameters()[0], c.parameters()[0]);
        assert!(a.parameters()[1].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kaiming_uniform_spread() {
        let net = Network::mlp(&[100, 400, 2], Activation::Relu, 7).unwrap();
        let w = net.parameters()[0];
        let n = w.len() as f64;
        let mean = w.sum() / n;
        let std = (w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        // uniform(-sqrt(6/fan_in), sqrt(6/fan_in)) has std sqrt(2/fan_in)
        assert!((std - (2.0f64 / 100.0).sqrt()).abs() < 0.05 * (2.0f64 / 100.0).sqrt());
        let loose = (2.0f64 / 100.0).sqrt() / 3f64.sqrt() * 2.0;
        assert!((std - loose).abs() < 0.3 * loose);
    }
}
