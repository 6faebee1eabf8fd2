//! Training objectives. Every function here builds the loss on a tape so it
//! can be differentiated with respect to the parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::{Regularizer, RunConfig};
use crate::attribution::smoothgrad_batch;
use crate::autodiff::{kernels, Graph, Var};
use crate::criteria::{
    cos_rows, entropy_rows, hutchinson_rows, input_grad, l2_rows, logit_input_grad, rademacher, uniform_delta,
    DEGENERATE_NORM,
};
use crate::data::DomainBounds;
use crate::error::{invalid, Result};
use crate::nn::{argmax, BoundNetwork, Network};
use crate::tensor::Tensor;

/// Weighted loss contributions. `ce` is the data term (the clean-point KL
/// for atex); `reg` holds the Hessian, MaxEnt, ATEX or IGA term.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub ce: f64,
    pub l2: f64,
    pub cos: f64,
    pub reg: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.ce + self.l2 + self.cos + self.reg
    }

    pub(crate) fn named(&self, reg: Regularizer) -> [(&'static str, f64); 4] {
        [("ce", self.ce), ("l2", self.l2), ("cos", self.cos), (reg.name(), self.reg)]
    }
}

/// A taped loss and its parts.
pub struct BatchLoss<'g> {
    pub loss: Var<'g>,
    pub parts: LossParts,
    /// Samples whose ATEX perturbation term was skipped for a degenerate
    /// teacher attribution.
    pub skipped: usize,
}

/// What the ATEX term needs for one batch.
pub struct AtexBatch<'a> {
    pub teacher: &'a Network,
    /// Unit-norm teacher attributions, one row per sample; zero rows are
    /// degenerate and skipped.
    pub directions: &'a Tensor,
}

/// One batch plus the side inputs some regularizers need.
pub struct LossInputs<'a> {
    pub x: &'a Tensor,
    pub y: &'a [usize],
    /// Domain used to clamp the IGA inner maximization.
    pub bounds: Option<&'a DomainBounds>,
    pub atex: Option<AtexBatch<'a>>,
}

impl<'a> LossInputs<'a> {
    pub fn new(x: &'a Tensor, y: &'a [usize]) -> Self {
        Self { x, y, bounds: None, atex: None }
    }
}

fn value(v: Var<'_>) -> f64 {
    v.value().item()
}

/// Mean cross-entropy of `[B, C]` logits.
pub fn ce_term<'g>(logits: Var<'g>, y: &[usize]) -> Result<Var<'g>> {
    Ok(logits.log_softmax()?.pick(y)?.mean().neg())
}

/// Per-row `KL(softmax(student) | teacher)` with the teacher given as
/// log-probabilities.
fn kl_rows<'g>(student_logits: Var<'g>, teacher_log_probs: Tensor) -> Result<Var<'g>> {
    let g = student_logits.graph();
    let ls = student_logits.log_softmax()?;
    let diff = ls.sub(g.constant(teacher_log_probs))?;
    Ok(ls.exp().mul(diff)?.sum_rows())
}

fn log_probs(net: &Network, x: &Tensor) -> Result<Tensor> {
    let logits = net.logits(x)?;
    let (r, c) = (logits.shape()[0], logits.shape()[1]);
    Tensor::new(vec![r, c], kernels::log_softmax(logits.data(), r, c))
}

/// Weighted `Γℓ2` and `Γcos` terms for perturbation `delta`. `logits` must be
/// the forward pass of `xv`, which is reused for the clean-point gradient.
#[allow(clippy::too_many_arguments)]
pub fn alignment_terms<'g>(
    bound: &BoundNetwork<'_, 'g>,
    xv: Var<'g>,
    logits: Var<'g>,
    y: &[usize],
    delta: &Tensor,
    lambda_l2: f64,
    lambda_cos: f64,
    detach_base: bool,
) -> Result<(Option<Var<'g>>, Option<Var<'g>>)> {
    if lambda_l2 == 0.0 && lambda_cos == 0.0 {
        return Ok((None, None));
    }
    let g = bound.graph();
    let base = logit_input_grad(logits, xv, y, !detach_base)?;
    let base = if detach_base { base.detach() } else { base };
    let xp = g.leaf((*xv.value()).zip_map(delta, |a, d| a + d)?);
    let gp = input_grad(bound, xp, y, true)?;
    let l2 = if lambda_l2 > 0.0 { Some(l2_rows(gp, base)?.mean().scale(lambda_l2)) } else { None };
    let cos = if lambda_cos > 0.0 { Some(cos_rows(gp, base)?.values.mean().scale(lambda_cos)) } else { None };
    Ok((l2, cos))
}

/// Soft-margin attribution alignment per row: `softplus(d_y - d_r)` with
/// `d_c = 1 - cossim(grad g_c(x), x)` and `r` the highest other class.
pub fn iga_attr_rows<'g>(bound: &BoundNetwork<'_, 'g>, xv: Var<'g>, y: &[usize]) -> Result<Var<'g>> {
    let logits = bound.logits(xv)?;
    let runner_up = runner_up(&logits.value(), y);
    let gy = logit_input_grad(logits, xv, y, true)?;
    let gr = logit_input_grad(logits, xv, &runner_up, true)?;
    let dy = cos_rows(gy, xv)?.values.scale(2.0);
    let dr = cos_rows(gr, xv)?.values.scale(2.0);
    Ok(dy.sub(dr)?.softplus(1.0))
}

fn runner_up(logits: &Tensor, y: &[usize]) -> Vec<usize> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut masked = row.to_vec();
            masked[y[r]] = f64::NEG_INFINITY;
            argmax(&masked)
        })
        .collect()
}

/// Inner maximization of the IGA term: a random start in the l-infinity
/// ball followed by signed ascent steps, projected to the ball and domain.
pub fn iga_perturb(net: &Network, x: &Tensor, y: &[usize], cfg: &RunConfig, bounds: Option<&DomainBounds>, rng: &mut impl Rng) -> Result<Tensor> {
    let eps = cfg.iga.epsilon;
    let project = |t: &mut Tensor| {
        for (v, &x0) in t.data_mut().iter_mut().zip(x.data()) {
            *v = v.clamp(x0 - eps, x0 + eps);
        }
        if let Some(b) = bounds {
            b.clamp(t, true);
        }
    };
    let mut cur = x.zip_map(&uniform_delta(x.shape(), eps, rng), |a, d| a + d)?;
    project(&mut cur);
    if eps == 0.0 || cfg.iga.steps == 0 {
        return Ok(cur);
    }
    let step = 2.5 * eps / cfg.iga.steps as f64;
    for _ in 0..cfg.iga.steps {
        let g = Graph::new();
        let b = net.bind(&g, false);
        let xv = g.leaf(cur.clone());
        let obj = iga_attr_rows(&b, xv, y)?.sum();
        let grad = g.backward(obj, &[xv])?.remove(0);
        for (v, &d) in cur.data_mut().iter_mut().zip(grad.data()) {
            *v += step * if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 };
        }
        project(&mut cur);
    }
    Ok(cur)
}

/// ATEX distillation terms. Returns the clean-point KL, the weighted
/// perturbation sum and the number of skipped samples.
pub fn atex_terms<'g>(
    bound: &BoundNetwork<'_, 'g>,
    x: &Tensor,
    atex: &AtexBatch<'_>,
    cfg: &RunConfig,
    rng: &mut impl Rng,
) -> Result<(Var<'g>, Option<Var<'g>>, usize)> {
    let g = bound.graph();
    let a = &cfg.atex;
    let rows = x.rows();
    let per = x.row_len();
    if atex.directions.rows() != rows || atex.directions.row_len() != per {
        return Err(invalid("atex: one attribution direction per sample is required"));
    }
    let student = bound.logits(g.constant(x.clone()))?;
    let clean = kl_rows(student, log_probs(atex.teacher, x)?)?.mean();

    let mut xi = Vec::new();
    let mut xip = Vec::new();
    let mut skipped = 0;
    for r in 0..rows {
        let d = atex.directions.row(r);
        if d.iter().all(|&v| v == 0.0) {
            skipped += 1;
            continue;
        }
        let x0 = x.row(r);
        for _ in 0..a.n_i {
            let step: f64 = if a.epsilon > 0.0 { rng.gen_range(-a.epsilon..=a.epsilon) } else { 0.0 };
            let point: Vec<f64> = x0.iter().zip(d).map(|(&v, &h)| v + step * h).collect();
            for _ in 0..a.n_p {
                let u = orthogonal_unit(d, rng);
                let s: f64 = if a.epsilon > 0.0 { rng.gen_range(-a.epsilon..=a.epsilon) } else { 0.0 };
                xi.extend_from_slice(&point);
                xip.extend(point.iter().zip(&u).map(|(&v, &w)| v + s * w));
            }
        }
    }
    if xip.is_empty() || cfg.lambda == 0.0 {
        return Ok((clean, None, skipped));
    }
    let n = xip.len() / per;
    let mut shape = x.shape().to_vec();
    shape[0] = n;
    let xi = Tensor::new(shape.clone(), xi)?;
    let xip = Tensor::new(shape, xip)?;
    let teacher_lp = log_probs(atex.teacher, &xi)?;
    let student_p = bound.logits(g.constant(xip))?;
    let sum = kl_rows(student_p, teacher_lp)?.sum();
    Ok((clean, Some(sum.scale(cfg.lambda / rows as f64)), skipped))
}

/// Isotropic Gaussian direction with its component along the unit vector
/// `d` removed, renormalized.
fn orthogonal_unit(d: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let mut u: Vec<f64> = (0..d.len()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let proj: f64 = u.iter().zip(d).map(|(a, b)| a * b).sum();
        u.iter_mut().zip(d).for_each(|(a, &b)| *a -= proj * b);
        let n = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-12 {
            u.iter_mut().for_each(|v| *v /= n);
            return u;
        }
    }
}

/// Unit-norm SmoothGrad directions of the teacher; rows with a norm below
/// the degeneracy threshold are zeroed.
pub fn atex_directions(teacher: &Network, x: &Tensor, y: &[usize], cfg: &RunConfig, seed: u64) -> Result<Tensor> {
    let mut h = smoothgrad_batch(teacher, x, y, cfg.atex.smooth_sigma, cfg.atex.smooth_samples, seed)?;
    let per = h.row_len();
    for row in h.data_mut().chunks_mut(per.max(1)) {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n < DEGENERATE_NORM {
            row.iter_mut().for_each(|v| *v = 0.0);
        } else {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    Ok(h)
}

/// Builds the configured objective for one batch on `bound`'s graph,
/// drawing its perturbation (one per batch), probes or inner maximization
/// from `rng`.
pub fn batch_loss<'g>(
    bound: &BoundNetwork<'_, 'g>,
    inp: &LossInputs<'_>,
    cfg: &RunConfig,
    rng: &mut impl Rng,
) -> Result<BatchLoss<'g>> {
    let g = bound.graph();
    let reg = cfg.regularizer;
    let mut parts = LossParts::default();
    let mut skipped = 0;

    if reg == Regularizer::Atex {
        let atex = inp.atex.as_ref().ok_or_else(|| invalid("atex training needs a teacher"))?;
        let (clean, pert, s) = atex_terms(bound, inp.x, atex, cfg, rng)?;
        parts.ce = value(clean);
        skipped = s;
        let loss = match pert {
            Some(p) => {
                parts.reg = value(p);
                clean.add(p)?
            }
            None => clean,
        };
        return Ok(BatchLoss { loss, parts, skipped });
    }

    let x = if reg == Regularizer::Iga {
        iga_perturb(bound.network(), inp.x, inp.y, cfg, inp.bounds, rng)?
    } else {
        inp.x.clone()
    };
    let xv = g.leaf(x);
    let logits = bound.logits(xv)?;
    let ce = ce_term(logits, inp.y)?;
    parts.ce = value(ce);
    let mut loss = ce;

    match reg {
        Regularizer::Ce | Regularizer::Atex => {}
        Regularizer::L2 | Regularizer::Cos | Regularizer::L2Cos => {
            let delta = uniform_delta(inp.x.shape(), cfg.epsilon, rng);
            let l2w = if reg.uses_l2() { cfg.lambda_l2 } else { 0.0 };
            let cosw = if reg.uses_cos() { cfg.lambda_cos } else { 0.0 };
            let (l2, cos) = alignment_terms(bound, xv, logits, inp.y, &delta, l2w, cosw, cfg.detach_base_gradient)?;
            if let Some(t) = l2 {
                parts.l2 = value(t);
                loss = loss.add(t)?;
            }
            if let Some(t) = cos {
                parts.cos = value(t);
                loss = loss.add(t)?;
            }
        }
        Regularizer::Hessian => {
            if cfg.lambda > 0.0 {
                let probes: Vec<Tensor> = (0..cfg.hessian_probes).map(|_| rademacher(inp.x.shape(), rng)).collect();
                let t = hutchinson_rows(bound, xv, inp.y, &probes, true)?.mean().scale(cfg.lambda);
                parts.reg = value(t);
                loss = loss.add(t)?;
            } else {
                crate::criteria::require_smooth(bound.network(), "hessian_loss")?;
            }
        }
        Regularizer::MaxEnt => {
            if cfg.lambda > 0.0 {
                let t = entropy_rows(logits)?.mean().scale(-cfg.lambda);
                parts.reg = value(t);
                loss = loss.add(t)?;
            }
        }
        Regularizer::Iga => {
            if cfg.lambda > 0.0 {
                let t = iga_attr_rows(bound, xv, inp.y)?.mean().scale(cfg.lambda);
                parts.reg = value(t);
                loss = loss.add(t)?;
            }
        }
    }
    Ok(BatchLoss { loss, parts, skipped })
}

fn evaluate(net: &Network, inp: &LossInputs<'_>, cfg: &RunConfig, seed: u64) -> Result<LossParts> {
    let g = Graph::new();
    let b = net.bind(&g, false);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(batch_loss(&b, inp, cfg, &mut rng)?.parts)
}

fn with_reg(cfg: &RunConfig, reg: Regularizer) -> RunConfig {
    RunConfig { regularizer: reg, ..cfg.clone() }
}

/// `CE + λ_cos Γcos + λ_ℓ2 Γℓ2` for an explicit batch perturbation `delta`.
pub fn combined_loss(net: &Network, x: &Tensor, y: &[usize], cfg: &RunConfig, delta: &Tensor) -> Result<LossParts> {
    let g = Graph::new();
    let b = net.bind(&g, false);
    let xv = g.leaf(x.clone());
    let logits = b.logits(xv)?;
    let ce = ce_term(logits, y)?;
    let (l2, cos) = alignment_terms(&b, xv, logits, y, delta, cfg.lambda_l2, cfg.lambda_cos, cfg.detach_base_gradient)?;
    Ok(LossParts { ce: value(ce), l2: l2.map_or(0.0, value), cos: cos.map_or(0.0, value), reg: 0.0 })
}

pub fn ce_loss(net: &Network, x: &Tensor, y: &[usize]) -> Result<f64> {
    Ok(evaluate(net, &LossInputs::new(x, y), &with_reg(&RunConfig::default(), Regularizer::Ce), 0)?.total())
}

pub fn l2_loss(net: &Network, x: &Tensor, y: &[usize], cfg: &RunConfig, delta: &Tensor) -> Result<f64> {
    combined_loss(net, x, y, &RunConfig { lambda_cos: 0.0, ..cfg.clone() }, delta).map(|p| p.total())
}

pub fn cos_loss(net: &Network, x: &Tensor, y: &[usize], cfg: &RunConfig, delta: &Tensor) -> Result<f64> {
    combined_loss(net, x, y, &RunConfig { lambda_l2: 0.0, ..cfg.clone() }, delta).map(|p| p.total())
}

/// `CE + λ` times the Hutchinson Hessian-norm estimate with probes from `seed`.
pub fn hessian_loss(net: &Network, x: &Tensor, y: &[usize], cfg: &RunConfig, seed: u64) -> Result<f64> {
    evaluate(net, &LossInputs::new(x, y), &with_reg(cfg, Regularizer::Hessian), seed).map(|p| p.total())
}

/// `CE − λ H(p(x))`.
pub fn maxent_loss(net: &Network, x: &Tensor, y: &[usize], cfg: &RunConfig) -> Result<f64> {
    evaluate(net, &LossInputs::new(x, y), &with_reg(cfg, Regularizer::MaxEnt), 0).map(|p| p.total())
}

/// ATEX objective for one batch, with teacher SmoothGrad and sampling both
/// seeded by `seed`. Also returns the number of skipped samples.
pub fn atex_loss(teacher: &Network, student: &Network, x: &Tensor, y: &[usize], cfg: &RunConfig, seed: u64) -> Result<(LossParts, usize)> {
    let directions = atex_directions(teacher, x, y, cfg, seed)?;
    let g = Graph::new();
    let b = student.bind(&g, false);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inp = LossInputs { x, y, bounds: None, atex: Some(AtexBatch { teacher, directions: &directions }) };
    let out = batch_loss(&b, &inp, &with_reg(cfg, Regularizer::Atex), &mut rng)?;
    Ok((out.parts, out.skipped))
}

/// IGA objective for one batch with the inner maximization seeded by `seed`.
pub fn iga_loss(net: &Network, x: &Tensor, y: &[usize], cfg: &RunConfig, bounds: Option<&DomainBounds>, seed: u64) -> Result<LossParts> {
    let inp = LossInputs { x, y, bounds, atex: None };
    evaluate(net, &inp, &with_reg(cfg, Regularizer::Iga), seed)
}
