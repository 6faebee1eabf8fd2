//! Gradient-alignment criteria: the l2 and cosine robust criteria, a
//! Hutchinson estimate of the input-Hessian Frobenius norm, the cosine bound
//! term, and the output entropy.
//!
//! The `*_rows` functions work on taped batches and return one value per
//! sample so they can be used as regularizers. The remaining functions are
//! plain evaluations on untaped networks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{GradOptions, Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::nn::{Activation, BoundNetwork, Network};
use crate::tensor::Tensor;

/// Added to each gradient norm inside the cosine similarity.
pub const NORM_GUARD: f64 = 1e-12;
/// Gradients with a smaller norm mark the sample degenerate.
pub const DEGENERATE_NORM: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampler {
    /// `delta ~ U([-eps, eps]^d)`
    UniformBall,
    /// `delta / |delta|_2` for a uniform draw, rescaled to norm `eps`.
    UnitDirection,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationSpec {
    pub epsilon: f64,
    pub sampler: Sampler,
    pub sample_count: usize,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn new(epsilon: f64, sampler: Sampler, sample_count: usize, seed: u64) -> Result<Self> {
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(invalid(format!("epsilon must be finite and >= 0, got {epsilon}")));
        }
        if sample_count == 0 {
            return Err(invalid("sample_count must be at least 1"));
        }
        Ok(Self { epsilon, sampler, sample_count, seed })
    }

    pub fn uniform(epsilon: f64) -> Result<Self> {
        Self::new(epsilon, Sampler::UniformBall, 1, 0)
    }

    /// One perturbation for a batch of shape `shape` (leading axis = samples).
    pub fn draw(&self, shape: &[usize], rng: &mut impl Rng) -> Tensor {
        match self.sampler {
            Sampler::UniformBall => uniform_delta(shape, self.epsilon, rng),
            Sampler::UnitDirection => unit_directions(shape, rng).scale(self.epsilon),
        }
    }
}

pub fn uniform_delta(shape: &[usize], eps: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = if eps > 0.0 {
        (0..n).map(|_| rng.gen_range(-eps..=eps)).collect()
    } else {
        vec![0.0; n]
    };
    Tensor::from_parts(shape.to_vec(), data)
}

/// Rows of unit l2 norm, each the normalized form of a uniform cube draw.
pub fn unit_directions(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    loop {
        let mut t = uniform_delta(shape, 1.0, rng);
        let per = t.row_len();
        let mut ok = true;
        for row in t.data_mut().chunks_mut(per.max(1)) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n < 1e-12 {
                ok = false;
                break;
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        if ok {
            return t;
        }
    }
}

/// Rademacher probe vectors with entries +-1.
pub fn rademacher(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect())
}

pub fn require_smooth(net: &Network, op: &'static str) -> Result<()> {
    if net.activation() == Activation::Relu {
        return Err(Error::ZeroSecondDerivative(op));
    }
    Ok(())
}

/// `grad_x sum_n logits[n, y_n]`, i.e. the per-sample logit gradients.
pub fn logit_input_grad<'g>(logits: Var<'g>, x: Var<'g>, y: &[usize], create_graph: bool) -> Result<Var<'g>> {
    let sel = logits.pick(y)?.sum();
    let opts = GradOptions { create_graph, allow_unused: true };
    Ok(x.graph().grad(sel, &[x], opts)?.remove(0))
}

/// Per-sample logit gradients at `x`, computing a fresh forward pass.
pub fn input_grad<'g>(net: &BoundNetwork<'_, 'g>, x: Var<'g>, y: &[usize], create_graph: bool) -> Result<Var<'g>> {
    logit_input_grad(net.logits(x)?, x, y, create_graph)
}

/// `|a_n - b_n|_2` per row.
pub fn l2_rows<'g>(a: Var<'g>, b: Var<'g>) -> Result<Var<'g>> {
    Ok(a.sub(b)?.row_norm())
}

pub struct CosRows<'g> {
    /// `1/2 (1 - cossim)` per row, 0 for degenerate rows.
    pub values: Var<'g>,
    pub degenerate: Vec<bool>,
}

/// Computed as `|a/(|a|+g) - b/(|b|+g)|^2 / 4`, which equals
/// `1/2 (1 - cossim(a, b))` up to the norm guard `g` and is exactly zero for
/// identical gradients.
pub fn cos_rows<'g>(a: Var<'g>, b: Var<'g>) -> Result<CosRows<'g>> {
    let na = a.row_norm();
    let nb = b.row_norm();
    let degenerate: Vec<bool> = na
        .value()
        .data()
        .iter()
        .zip(nb.value().data())
        .map(|(&x, &y)| x < DEGENERATE_NORM || y < DEGENERATE_NORM)
        .collect();
    let ua = a.mul_rows(na.add_scalar(NORM_GUARD).safe_recip())?;
    let ub = b.mul_rows(nb.add_scalar(NORM_GUARD).safe_recip())?;
    let d = ua.sub(ub)?;
    let half = d.mul(d)?.sum_rows().scale(0.25);
    let keep = Tensor::vector(degenerate.iter().map(|&d| if d { 0.0 } else { 1.0 }).collect());
    Ok(CosRows { values: half.mask(keep)?, degenerate })
}

/// Per-row `sqrt(mean_k |H v_k|^2)` with `H` the input Hessian of `g_y`.
/// The first-level gradient is always taped; `create_graph` controls whether
/// the Hessian-vector products are differentiable too.
pub fn hutchinson_rows<'g>(
    net: &BoundNetwork<'_, 'g>,
    x: Var<'g>,
    y: &[usize],
    probes: &[Tensor],
    create_graph: bool,
) -> Result<Var<'g>> {
    require_smooth(net.network(), "hessian_surrogate")?;
    if probes.is_empty() {
        return Err(invalid("at least one probe is required"));
    }
    let g = x.graph();
    let gx = input_grad(net, x, y, true)?;
    let mut acc: Option<Var<'g>> = None;
    for v in probes {
        let inner = gx.dot(g.constant(v.clone()))?;
        let hv = g.grad(inner, &[x], GradOptions { create_graph, allow_unused: true })?.remove(0);
        let sq = hv.mul(hv)?.sum_rows();
        acc = Some(match acc {
            None => sq,
            Some(a) => a.add(sq)?,
        });
    }
    Ok(acc.expect("non-empty").scale(1.0 / probes.len() as f64).sqrt())
}

/// Softmax entropy per row of `[B, C]` logits.
pub fn entropy_rows<'g>(logits: Var<'g>) -> Result<Var<'g>> {
    let lp = logits.log_softmax()?;
    Ok(lp.exp().mul(lp)?.sum_rows().neg())
}

fn batch_of(x: &Tensor, net: &Network) -> Result<Tensor> {
    if x.shape() == net.input_shape() {
        Tensor::stack(&[x])
    } else {
        Ok(x.clone())
    }
}

/// Per-sample logit gradients for a batch (or a single sample).
pub fn logit_gradients(net: &Network, x: &Tensor, y: &[usize]) -> Result<Tensor> {
    let xb = batch_of(x, net)?;
    let g = Graph::new();
    let b = net.bind(&g, false);
    let xv = g.leaf(xb);
    let gx = input_grad(&b, xv, y, false)?;
    let out = (*gx.value()).clone();
    out.reshape(x.shape())
}

/// `|grad g_y(x + delta) - grad g_y(x)|_2` for each sample of a batch.
pub fn l2_criterion_batch(net: &Network, x: &Tensor, y: &[usize], delta: &Tensor) -> Result<Vec<f64>> {
    check_same(x, delta, "l2_criterion")?;
    let a = logit_gradients(net, &x.zip_map(delta, |p, q| p + q)?, y)?;
    let b = logit_gradients(net, x, y)?;
    let xb = batch_of(x, net)?;
    let (a, b) = (a.reshape(xb.shape())?, b.reshape(xb.shape())?);
    Ok((0..xb.rows())
        .map(|r| a.row(r).iter().zip(b.row(r)).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt())
        .collect())
}

pub fn l2_criterion(net: &Network, x: &Tensor, y: usize, delta: &Tensor) -> Result<f64> {
    Ok(l2_criterion_batch(net, x, &[y], delta)?[0])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosValue {
    pub value: f64,
    pub degenerate: bool,
}

/// Cosine criterion between two gradients; same formula as [`cos_rows`].
pub fn cos_between(a: &[f64], b: &[f64]) -> CosValue {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < DEGENERATE_NORM || nb < DEGENERATE_NORM {
        return CosValue { value: 0.0, degenerate: true };
    }
    let (sa, sb) = (1.0 / (na + NORM_GUARD), 1.0 / (nb + NORM_GUARD));
    let sq: f64 = a.iter().zip(b).map(|(p, q)| (p * sa - q * sb).powi(2)).sum();
    CosValue { value: 0.25 * sq, degenerate: false }
}

pub fn cos_criterion_batch(net: &Network, x: &Tensor, y: &[usize], delta: &Tensor) -> Result<Vec<CosValue>> {
    check_same(x, delta, "cos_criterion")?;
    let xb = batch_of(x, net)?;
    let a = logit_gradients(net, x, y)?.reshape(xb.shape())?;
    let b = logit_gradients(net, &x.zip_map(delta, |p, q| p + q)?, y)?.reshape(xb.shape())?;
    Ok((0..xb.rows()).map(|r| cos_between(b.row(r), a.row(r))).collect())
}

pub fn cos_criterion(net: &Network, x: &Tensor, y: usize, delta: &Tensor) -> Result<CosValue> {
    Ok(cos_criterion_batch(net, x, &[y], delta)?[0])
}

fn check_same(x: &Tensor, d: &Tensor, op: &'static str) -> Result<()> {
    if x.shape() != d.shape() {
        return Err(Error::ShapeMismatch { op, lhs: x.shape().to_vec(), rhs: d.shape().to_vec() });
    }
    Ok(())
}

/// Hutchinson estimate of `|H|_F` for a scalar function of `x`.
pub fn hutchinson_frobenius<F>(f: F, x: &Tensor, probes: usize, seed: u64) -> Result<f64>
where
    F: for<'g> Fn(Var<'g>) -> Result<Var<'g>>,
{
    if probes == 0 {
        return Err(invalid("at least one probe is required"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = 0.0;
    for _ in 0..probes {
        let v = rademacher(x.shape(), &mut rng);
        let hv = crate::autodiff::hessian_vector_product(&f, x, &v)?;
        acc += hv.dot(&hv);
    }
    Ok((acc / probes as f64).sqrt())
}

/// Per-sample Hutchinson estimates of the input-Hessian Frobenius norm of
/// `g_y`. Every sample sees the same probes, drawn from `seed`, so a value
/// does not depend on the sample's position in the batch.
pub fn hessian_surrogate_batch(net: &Network, x: &Tensor, y: &[usize], probes: usize, seed: u64) -> Result<Vec<f64>> {
    require_smooth(net, "hessian_surrogate")?;
    let xb = batch_of(x, net)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = xb.rows();
    let probes: Vec<Tensor> = (0..probes)
        .map(|_| {
            let one = rademacher(net.input_shape(), &mut rng);
            let tiled: Vec<&Tensor> = std::iter::repeat(&one).take(rows).collect();
            Tensor::stack(&tiled)
        })
        .collect::<Result<_>>()?;
    let g = Graph::new();
    let b = net.bind(&g, false);
    let xv = g.leaf(xb);
    let out = hutchinson_rows(&b, xv, y, &probes, false)?;
    let v = out.value().data().to_vec();
    Ok(v)
}

pub fn hessian_surrogate(net: &Network, x: &Tensor, y: usize, probes: usize, seed: u64) -> Result<f64> {
    Ok(hessian_surrogate_batch(net, x, &[y], probes, seed)?[0])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundPoint {
    /// Measured cosine criterion between `x` and `x + eps * dir`.
    pub lhs: f64,
    /// `eps |H(x) dir|_2 / |grad g_y(x + eps * dir)|_2`
    pub rhs: f64,
    pub degenerate: bool,
}

/// Cosine criterion and its Hessian bound term for each sample; `dir` rows
/// must have unit l2 norm.
pub fn crc_upper_bound_batch(net: &Network, x: &Tensor, y: &[usize], dir: &Tensor, eps: f64) -> Result<Vec<BoundPoint>> {
    require_smooth(net, "crc_upper_bound")?;
    check_same(x, dir, "crc_upper_bound")?;
    let xb = batch_of(x, net)?;
    let db = dir.reshape(xb.shape())?;
    for r in 0..db.rows() {
        let n = db.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
        if (n - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("direction row {r} has norm {n}, expected 1")));
        }
    }
    let g = Graph::new();
    let b = net.bind(&g, false);
    let xv = g.leaf(xb.clone());
    let gx = input_grad(&b, xv, y, true)?;
    let inner = gx.dot(g.constant(db.clone()))?;
    let hv = g.grad(inner, &[xv], GradOptions { create_graph: false, allow_unused: true })?.remove(0);
    let hv = hv.value();
    let shifted = xb.zip_map(&db, |p, q| p + eps * q)?;
    let gs = logit_gradients(net, &shifted, y)?;
    let base = gx.value();
    Ok((0..xb.rows())
        .map(|r| {
            let c = cos_between(gs.row(r), base.row(r));
            let hn = hv.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            let sn = gs.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            let rhs = if c.degenerate { 0.0 } else { eps * hn / sn };
            BoundPoint { lhs: c.value, rhs, degenerate: c.degenerate }
        })
        .collect())
}

pub fn crc_upper_bound(net: &Network, x: &Tensor, y: usize, dir: &Tensor, eps: f64) -> Result<BoundPoint> {
    Ok(crc_upper_bound_batch(net, x, &[y], dir, eps)?[0])
}

/// Entropy of `p(x)` for each sample.
pub fn maxent_regularizer_batch(net: &Network, x: &Tensor) -> Result<Vec<f64>> {
    let xb = batch_of(x, net)?;
    let g = Graph::new();
    let b = net.bind(&g, false);
    let h = entropy_rows(b.logits(g.constant(xb))?)?;
    let v = h.value().data().to_vec();
    Ok(v)
}

pub fn maxent_regularizer(net: &Network, x: &Tensor) -> Result<f64> {
    Ok(maxent_regularizer_batch(net, x)?[0])
}
