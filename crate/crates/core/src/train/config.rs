use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Regularizer {
    /// Cross-entropy only.
    Ce,
    /// CE + λ_ℓ2 Γℓ2.
    L2,
    /// CE + λ_cos Γcos.
    Cos,
    /// CE + λ_cos Γcos + λ_ℓ2 Γℓ2.
    L2Cos,
    /// CE + λ · Hutchinson estimate of the input-Hessian norm.
    Hessian,
    /// CE − λ · entropy of p(x).
    MaxEnt,
    /// Distillation from a teacher along and across its SmoothGrad direction.
    Atex,
    /// CE and λ · soft-margin gradient/input alignment at an adversarial point.
    Iga,
}

impl Regularizer {
    pub const ALL: [Regularizer; 8] = [
        Regularizer::Ce,
        Regularizer::L2,
        Regularizer::Cos,
        Regularizer::L2Cos,
        Regularizer::Hessian,
        Regularizer::MaxEnt,
        Regularizer::Atex,
        Regularizer::Iga,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Regularizer::Ce => "ce",
            Regularizer::L2 => "l2",
            Regularizer::Cos => "cos",
            Regularizer::L2Cos => "l2cos",
            Regularizer::Hessian => "hessian",
            Regularizer::MaxEnt => "maxent",
            Regularizer::Atex => "atex",
            Regularizer::Iga => "iga",
        }
    }

    pub(crate) fn uses_l2(&self) -> bool {
        matches!(self, Regularizer::L2 | Regularizer::L2Cos)
    }

    pub(crate) fn uses_cos(&self) -> bool {
        matches!(self, Regularizer::Cos | Regularizer::L2Cos)
    }
}

impl fmt::Display for Regularizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regularizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regularizer::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| invalid(format!("unknown regularizer '{s}' (ce, l2, cos, l2cos, hessian, maxent, atex, iga)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    Sgd,
    /// Adam with weight decay added to the gradient.
    Adam,
    /// Adam with decoupled weight decay.
    AdamW,
}

impl OptimizerKind {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
            OptimizerKind::AdamW => "adamw",
        }
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            "adamw" => Ok(OptimizerKind::AdamW),
            _ => Err(invalid(format!("unknown optimizer '{s}' (sgd, adam, adamw)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub weight_decay: f64,
    /// SGD only.
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn adam(lr: f64, weight_decay: f64) -> Self {
        Self { kind: OptimizerKind::Adam, lr, weight_decay, momentum: 0.0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self { kind: OptimizerKind::AdamW, ..Self::adam(lr, weight_decay) }
    }

    pub fn sgd(lr: f64, weight_decay: f64) -> Self {
        Self { kind: OptimizerKind::Sgd, ..Self::adam(lr, weight_decay) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AtexConfig {
    /// Range of the step along and across the teacher's attribution, in l2 units.
    pub epsilon: f64,
    /// Points along the attribution direction per sample.
    pub n_i: usize,
    /// Orthogonal points per along-direction point.
    pub n_p: usize,
    pub smooth_sigma: f64,
    pub smooth_samples: usize,
}

impl Default for AtexConfig {
    fn default() -> Self {
        Self { epsilon: 2.0, n_i: 2, n_p: 2, smooth_sigma: 0.1, smooth_samples: 16 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IgaConfig {
    /// l-infinity radius of the inner maximization.
    pub epsilon: f64,
    pub steps: usize,
}

impl Default for IgaConfig {
    fn default() -> Self {
        Self { epsilon: 8.0 / 255.0, steps: 3 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub regularizer: Regularizer,
    pub lambda_cos: f64,
    pub lambda_l2: f64,
    /// Weight of the Hessian, MaxEnt, ATEX or IGA term.
    pub lambda: f64,
    /// l-infinity radius of the uniform perturbation for Γℓ2 / Γcos.
    pub epsilon: f64,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub milestones: Vec<usize>,
    pub decay_factor: f64,
    pub softplus_beta: f64,
    /// Treat the clean-input gradient as a constant inside Γℓ2 and Γcos.
    pub detach_base_gradient: bool,
    pub hessian_probes: usize,
    pub atex: AtexConfig,
    pub iga: IgaConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    /// The LeNet settings: Adam(1e-3, 4e-5), batch 128, 200 epochs decayed
    /// by 10 at 100 and 150, Softplus β = 3, λ_ℓ2 = 0.1, λ_cos = 1.
    fn default() -> Self {
        Self {
            regularizer: Regularizer::Ce,
            lambda_cos: 1.0,
            lambda_l2: 0.1,
            lambda: 1e-3,
            epsilon: 8.0 / 255.0,
            optimizer: OptimizerConfig::adam(1e-3, 4e-5),
            epochs: 200,
            batch_size: 128,
            milestones: vec![100, 150],
            decay_factor: 0.1,
            softplus_beta: 3.0,
            detach_base_gradient: true,
            hessian_probes: 1,
            atex: AtexConfig::default(),
            iga: IgaConfig::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Defaults with the selected λ of the given regularizer.
    pub fn for_regularizer(regularizer: Regularizer) -> Self {
        let base = Self { regularizer, ..Self::default() };
        match regularizer {
            Regularizer::Hessian => Self { lambda: 1e-3, ..base },
            Regularizer::Atex => Self { lambda: 3.0, ..base },
            Regularizer::Iga => Self {
                lambda: 1.0,
                optimizer: OptimizerConfig::sgd(0.1, 2e-4),
                milestones: vec![50, 80, 150],
                softplus_beta: 50.0,
                ..base
            },
            _ => base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = |name: &str, v: f64| {
            if !(v >= 0.0) || !v.is_finite() {
                Err(invalid(format!("{name} must be finite and >= 0, got {v}")))
            } else {
                Ok(())
            }
        };
        nonneg("lambda_cos", self.lambda_cos)?;
        nonneg("lambda_l2", self.lambda_l2)?;
        nonneg("lambda", self.lambda)?;
        nonneg("epsilon", self.epsilon)?;
        nonneg("weight_decay", self.optimizer.weight_decay)?;
        nonneg("momentum", self.optimizer.momentum)?;
        nonneg("atex.epsilon", self.atex.epsilon)?;
        nonneg("atex.smooth_sigma", self.atex.smooth_sigma)?;
        nonneg("iga.epsilon", self.iga.epsilon)?;
        if !(self.optimizer.lr > 0.0) || !self.optimizer.lr.is_finite() {
            return Err(invalid(format!("lr must be positive, got {}", self.optimizer.lr)));
        }
        if !(0.0..1.0).contains(&self.optimizer.beta1) || !(0.0..1.0).contains(&self.optimizer.beta2) {
            return Err(invalid("adam betas must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be at least 1"));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid(format!("milestones must be strictly increasing, got {:?}", self.milestones)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(invalid(format!("decay_factor must be in (0, 1], got {}", self.decay_factor)));
        }
        if !(self.softplus_beta > 0.0) {
            return Err(invalid(format!("softplus_beta must be positive, got {}", self.softplus_beta)));
        }
        if self.hessian_probes == 0 {
            return Err(invalid("hessian_probes must be at least 1"));
        }
        if self.atex.n_i == 0 || self.atex.n_p == 0 || self.atex.smooth_samples == 0 {
            return Err(invalid("atex sample counts must be at least 1"));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based): the base rate times
    /// `decay_factor` for every milestone `<= epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.optimizer.lr * self.decay_factor.powi(k as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_drops_at_milestones() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.lr_at(0), 1e-3);
        assert_eq!(cfg.lr_at(99), 1e-3);
        assert!((cfg.lr_at(100) - 1e-4).abs() < 1e-18);
        assert!((cfg.lr_at(150) - 1e-5).abs() < 1e-18);
        let mut prev = f64::INFINITY;
        for e in 0..200 {
            assert!(cfg.lr_at(e) <= prev);
            prev = cfg.lr_at(e);
        }
    }

    #[test]
    fn validation() {
        assert!(RunConfig::default().validate().is_ok());
        assert!(RunConfig { lambda_cos: -1.0, ..RunConfig::default() }.validate().is_err());
        assert!(RunConfig { milestones: vec![5, 5], ..RunConfig::default() }.validate().is_err());
        assert!(RunConfig { batch_size: 0, ..RunConfig::default() }.validate().is_err());
    }

    #[test]
    fn names_round_trip() {
        for r in Regularizer::ALL {
            assert_eq!(r.name().parse::<Regularizer>().unwrap(), r);
        }
        assert!("nope".parse::<Regularizer>().is_err());
    }
}
