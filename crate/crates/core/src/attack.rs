//! Adversarial attribution manipulation: signed-gradient steps on the
//! distance between normalized attribution maps, projected to an
//! l-infinity ball and the input domain, with steps that change the
//! prediction reverted.

use std::fmt;
use std::str::FromStr;

use crate::attribution::{attribute, attribution_var, normalize_scores, AttrOptions, AttributionMap, Method, Normalization};
use crate::autodiff::{GradOptions, Graph, Var};
use crate::criteria::NORM_GUARD;
use crate::data::DomainBounds;
use crate::error::{invalid, Error, Result};
use crate::metrics::{similarity, SimilarityMeasure};
use crate::nn::{argmax, BoundNetwork, Network};
use crate::tensor::Tensor;

pub const ATTACK_CSV_HEADER: &str = "sample,label,prediction,preserved,final_loss,\
ssim_target,pcc_target,cossim_target,ssim_original,pcc_original,cossim_original";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttackMode {
    Targeted,
    Untargeted,
}

impl AttackMode {
    pub fn name(&self) -> &'static str {
        match self {
            AttackMode::Targeted => "targeted",
            AttackMode::Untargeted => "untargeted",
        }
    }
}

impl fmt::Display for AttackMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "targeted" => Ok(AttackMode::Targeted),
            "untargeted" => Ok(AttackMode::Untargeted),
            _ => Err(invalid(format!("unknown attack mode '{s}' (targeted, untargeted)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    pub mode: AttackMode,
    pub epsilon: f64,
    /// Defaults to `epsilon / 10`.
    pub step_size: Option<f64>,
    pub iterations: usize,
    /// Target map `h_t` with the input's shape; required when targeted.
    pub target: Option<Tensor>,
    pub method: Method,
    /// Only `l2_unit` is supported for the objective.
    pub normalization: Normalization,
    /// Reject steps that increase the objective.
    pub revert_on_increase: bool,
    /// Clamp iterates into these bounds; `[0, 1]` per channel when absent.
    pub bounds: Option<DomainBounds>,
    pub seed: u64,
}

impl AttackConfig {
    pub fn targeted(epsilon: f64, target: Tensor) -> Self {
        Self {
            mode: AttackMode::Targeted,
            epsilon,
            step_size: None,
            iterations: 100,
            target: Some(target),
            method: Method::Grad,
            normalization: Normalization::L2Unit,
            revert_on_increase: false,
            bounds: None,
            seed: 0,
        }
    }

    pub fn untargeted(epsilon: f64) -> Self {
        Self { mode: AttackMode::Untargeted, target: None, ..Self::targeted(epsilon, Tensor::zeros(&[0])) }
    }

    pub fn step(&self) -> f64 {
        self.step_size.unwrap_or(self.epsilon / 10.0)
    }

    fn validate(&self, input_shape: &[usize]) -> Result<()> {
        if self.iterations == 0 {
            return Err(invalid("attack needs at least one iteration"));
        }
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(invalid(format!("attack epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        if !(self.step() >= 0.0) {
            return Err(invalid("attack step size must be >= 0"));
        }
        if !self.method.is_differentiable() {
            return Err(invalid(format!("{} maps cannot be attacked directly", self.method)));
        }
        if self.normalization != Normalization::L2Unit {
            return Err(invalid("the attack objective uses l2_unit normalization"));
        }
        if self.mode == AttackMode::Targeted {
            let t = self.target.as_ref().ok_or_else(|| invalid("targeted attack needs a target map"))?;
            if t.shape() != input_shape {
                return Err(Error::ShapeMismatch { op: "targeted_aam", lhs: t.shape().to_vec(), rhs: input_shape.to_vec() });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub x_adv: Tensor,
    /// Objective at the start and after every iteration.
    pub loss_trace: Vec<f64>,
    pub prediction_preserved: bool,
    pub prediction: usize,
    /// Raw attribution at `x_adv`.
    pub map: Tensor,
    /// Raw attribution at `x`.
    pub original_map: Tensor,
    /// Cosine similarity of the final map to the target (targeted only).
    pub similarity_to_target: Option<f64>,
    pub similarity_to_original: f64,
    /// Proposals rejected for flipping the prediction or raising the loss.
    pub reverted: usize,
}

impl AttackResult {
    pub fn final_loss(&self) -> f64 {
        *self.loss_trace.last().expect("trace starts with the initial loss")
    }
}

/// Binary frame: ones on a ring `border_width` wide, zeros inside. Accepts
/// `[H, W]` or `[C, H, W]`; every channel holds the same ring.
pub fn make_frame_target(input_shape: &[usize], border_width: usize) -> Result<AttributionMap> {
    let (c, h, w) = match *input_shape {
        [h, w] => (1, h, w),
        [c, h, w] => (c, h, w),
        _ => return Err(invalid(format!("frame target needs [H, W] or [C, H, W], got {input_shape:?}"))),
    };
    if border_width == 0 || 2 * border_width >= h.min(w) {
        return Err(invalid(format!("border width {border_width} must be in 1..{}", h.min(w).div_ceil(2))));
    }
    let mut data = Vec::with_capacity(c * h * w);
    for _ in 0..c {
        for y in 0..h {
            for x in 0..w {
                let edge = y < border_width || x < border_width || y >= h - border_width || x >= w - border_width;
                data.push(if edge { 1.0 } else { 0.0 });
            }
        }
    }
    Ok(AttributionMap {
        scores: Tensor::new(input_shape.to_vec(), data)?,
        method: Method::Grad,
        class: 0,
        normalized: None,
    })
}

/// `|h(x)/|h(x)| - reference|_2` on the tape, with `reference` unit-norm.
fn objective<'g>(bound: &BoundNetwork<'_, 'g>, xv: Var<'g>, y: usize, method: Method, reference: &Tensor) -> Result<Var<'g>> {
    let h = attribution_var(bound, xv, &[y], method, true)?;
    let unit = h.mul_rows(h.row_norm().add_scalar(NORM_GUARD).safe_recip())?;
    let r = bound.graph().constant(reference.reshape(&h.shape())?);
    Ok(unit.sub(r)?.l2norm())
}

fn loss_and_grad(net: &Network, x: &Tensor, y: usize, method: Method, reference: &Tensor) -> Result<(f64, Tensor)> {
    let g = Graph::new();
    let b = net.bind(&g, false);
    let xv = g.leaf(Tensor::stack(&[x])?);
    let obj = objective(&b, xv, y, method, reference)?;
    let grad = g.grad(obj, &[xv], GradOptions { create_graph: false, allow_unused: true })?.remove(0);
    Ok((obj.value().item(), grad.value().reshape(x.shape())?))
}

/// Runs the configured attack on the attribution of class `y` at `x`.
pub fn run_attack(net: &Network, x: &Tensor, y: usize, cfg: &AttackConfig) -> Result<AttackResult> {
    if x.shape() != net.input_shape() {
        return Err(Error::ShapeMismatch { op: "attack", lhs: x.shape().to_vec(), rhs: net.input_shape().to_vec() });
    }
    cfg.validate(x.shape())?;
    let bounds = cfg.bounds.clone().unwrap_or_else(|| DomainBounds::uniform(net.input_shape()[0], 0.0, 1.0));
    let opts = AttrOptions::default();
    let original = attribute(net, x, y, cfg.method, &opts)?.scores;
    let reference = match cfg.mode {
        AttackMode::Targeted => normalize_scores(cfg.target.as_ref().expect("validated"), Normalization::L2Unit)?,
        AttackMode::Untargeted => normalize_scores(&original, Normalization::L2Unit)?,
    };
    // untargeted attacks ascend the distance
    let sign = match cfg.mode {
        AttackMode::Targeted => -1.0,
        AttackMode::Untargeted => 1.0,
    };
    let label = net.predict(&Tensor::stack(&[x])?)?[0];
    let eps = cfg.epsilon;
    let project = |t: &mut Tensor| {
        for (v, &x0) in t.data_mut().iter_mut().zip(x.data()) {
            *v = v.clamp(x0 - eps, x0 + eps);
        }
        bounds.clamp(t, false);
    };

    let mut cur = x.clone();
    let (mut loss, mut grad) = loss_and_grad(net, &cur, y, cfg.method, &reference)?;
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    trace.push(loss);
    let mut step = cfg.step();
    let mut reverted = 0;
    for _ in 0..cfg.iterations {
        let mut prop = cur.clone();
        for (v, &d) in prop.data_mut().iter_mut().zip(grad.data()) {
            let s = if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 };
            *v += sign * step * s;
        }
        project(&mut prop);
        if prop == cur {
            trace.push(loss);
            continue;
        }
        let pred = argmax(net.logits_one(&prop)?.data());
        if pred != label {
            reverted += 1;
            step *= 0.5;
            trace.push(loss);
            continue;
        }
        let (l, g) = loss_and_grad(net, &prop, y, cfg.method, &reference)?;
        let worse = if sign < 0.0 { l > loss } else { l < loss };
        if cfg.revert_on_increase && worse {
            reverted += 1;
            step *= 0.5;
            trace.push(loss);
            continue;
        }
        cur = prop;
        loss = l;
        grad = g;
        trace.push(loss);
    }

    let map = attribute(net, &cur, y, cfg.method, &opts)?.scores;
    let prediction = argmax(net.logits_one(&cur)?.data());
    let similarity_to_target = match (&cfg.mode, &cfg.target) {
        (AttackMode::Targeted, Some(t)) => Some(similarity(&map, t, SimilarityMeasure::CosSim).unwrap_or(0.0)),
        _ => None,
    };
    let similarity_to_original = similarity(&map, &original, SimilarityMeasure::CosSim).unwrap_or(0.0);
    Ok(AttackResult {
        x_adv: cur,
        loss_trace: trace,
        prediction_preserved: prediction == label,
        prediction,
        map,
        original_map: original,
        similarity_to_target,
        similarity_to_original,
        reverted,
    })
}

/// Pulls the attribution towards `cfg.target`.
pub fn targeted_aam(net: &Network, x: &Tensor, y: usize, cfg: &AttackConfig) -> Result<AttackResult> {
    run_attack(net, x, y, &AttackConfig { mode: AttackMode::Targeted, ..cfg.clone() })
}

/// Pushes the attribution away from the original map.
pub fn untargeted_aam(net: &Network, x: &Tensor, y: usize, cfg: &AttackConfig) -> Result<AttackResult> {
    run_attack(net, x, y, &AttackConfig { mode: AttackMode::Untargeted, target: None, ..cfg.clone() })
}

fn sim_or_nan(a: &Tensor, b: &Tensor, k: SimilarityMeasure) -> f64 {
    similarity(a, b, k).unwrap_or(f64::NAN)
}

/// One summary row per attacked sample.
pub fn attack_summary_csv(results: &[(usize, usize, AttackResult)], target: Option<&Tensor>) -> String {
    let mut s = format!("{ATTACK_CSV_HEADER}\n");
    for (id, label, r) in results {
        let to_t: Vec<String> = SimilarityMeasure::ALL
            .iter()
            .map(|&k| target.map_or(f64::NAN, |t| sim_or_nan(&r.map, t, k)).to_string())
            .collect();
        let to_o: Vec<String> =
            SimilarityMeasure::ALL.iter().map(|&k| sim_or_nan(&r.map, &r.original_map, k).to_string()).collect();
        s += &format!(
            "{id},{label},{},{},{},{},{}\n",
            r.prediction,
            r.prediction_preserved,
            r.final_loss(),
            to_t.join(","),
            to_o.join(",")
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;

    fn net() -> Network {
        Network::mini_lenet(1, 8, 3, Activation::softplus(3.0), 3).unwrap()
    }

    fn input() -> Tensor {
        Tensor::new(vec![1, 8, 8], (0..64).map(|i| ((i * 29) % 17) as f64 / 17.0).collect()).unwrap()
    }

    #[test]
    fn frame_counts() {
        assert_eq!(make_frame_target(&[4, 4], 1).unwrap().scores.sum(), 12.0);
        assert_eq!(make_frame_target(&[32, 32], 2).unwrap().scores.sum(), 240.0);
        assert_eq!(make_frame_target(&[3, 32, 32], 2).unwrap().scores.sum(), 720.0);
        assert!(make_frame_target(&[4, 4], 0).is_err());
        assert!(make_frame_target(&[4, 4], 2).is_err());
    }

    #[test]
    fn zero_epsilon_leaves_input() {
        let (net, x) = (net(), input());
        let t = make_frame_target(&[1, 8, 8], 1).unwrap().scores;
        let r = targeted_aam(&net, &x, 0, &AttackConfig { iterations: 5, ..AttackConfig::targeted(0.0, t) }).unwrap();
        assert_eq!(r.x_adv, x);
        let u = untargeted_aam(&net, &x, 0, &AttackConfig { iterations: 5, ..AttackConfig::untargeted(0.0) }).unwrap();
        assert!((u.similarity_to_original - 1.0).abs() < 1e-12);
    }

    #[test]
    fn linear_net_cannot_be_moved() {
        let net = Network::mlp(&[4, 3], Activation::Identity, 0).unwrap();
        let x = Tensor::vector(vec![0.2, 0.4, 0.6, 0.8]);
        let cfg = AttackConfig { iterations: 10, ..AttackConfig::untargeted(0.1) };
        let r = untargeted_aam(&net, &x, 1, &cfg).unwrap();
        assert!(r.loss_trace.iter().all(|&l| l == r.loss_trace[0]));
        assert!((r.similarity_to_original - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constraints_hold_and_monotone_option() {
        let (net, x) = (net(), input());
        let t = make_frame_target(&[1, 8, 8], 1).unwrap().scores;
        let eps = 8.0 / 255.0;
        let cfg = AttackConfig { iterations: 20, revert_on_increase: true, ..AttackConfig::targeted(eps, t) };
        let r = targeted_aam(&net, &x, 1, &cfg).unwrap();
        assert!(r.prediction_preserved);
        for (&a, &b) in r.x_adv.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= eps + 1e-12 && (0.0..=1.0).contains(&a));
        }
        assert!(r.loss_trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(r.final_loss() < r.loss_trace[0]);
        assert_eq!(r.loss_trace.len(), 21);
    }

    #[test]
    fn deterministic() {
        let (net, x) = (net(), input());
        let cfg = AttackConfig { iterations: 5, ..AttackConfig::untargeted(4.0 / 255.0) };
        assert_eq!(untargeted_aam(&net, &x, 0, &cfg).unwrap(), untargeted_aam(&net, &x, 0, &cfg).unwrap());
    }

    #[test]
    fn bad_configs() {
        let (net, x) = (net(), input());
        let mut cfg = AttackConfig::untargeted(0.1);
        cfg.iterations = 0;
        assert!(untargeted_aam(&net, &x, 0, &cfg).is_err());
        let cfg = AttackConfig { method: Method::Lrp, ..AttackConfig::untargeted(0.1) };
        assert!(untargeted_aam(&net, &x, 0, &cfg).is_err());
        let cfg = AttackConfig::targeted(0.1, Tensor::zeros(&[1, 4, 4]));
        assert!(targeted_aam(&net, &x, 0, &cfg).is_err());
    }
}
