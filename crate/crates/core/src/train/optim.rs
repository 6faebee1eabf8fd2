use super::config::{OptimizerConfig, OptimizerKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Optimizer state for one parameter list.
#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    step: u64,
    /// First moments (Adam) or momentum buffers (SGD).
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Self { cfg, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr` in place.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer: {} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch { op: "optimizer_step", lhs: p.shape().to_vec(), rhs: g.shape().to_vec() });
            }
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.v = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
        }
        self.step += 1;
        let c = &self.cfg;
        let wd = c.weight_decay;
        match c.kind {
            OptimizerKind::Sgd => {
                for ((p, g), buf) in params.into_iter().zip(grads).zip(&mut self.m) {
                    let (p, buf) = (p.data_mut(), buf.data_mut());
                    for ((w, &gi), b) in p.iter_mut().zip(g.data()).zip(buf.iter_mut()) {
                        let d = gi + wd * *w;
                        let d = if c.momentum > 0.0 {
                            *b = if self.step == 1 { d } else { c.momentum * *b + d };
                            *b
                        } else {
                            d
                        };
                        *w -= lr * d;
                    }
                }
            }
            OptimizerKind::Adam | OptimizerKind::AdamW => {
                let decoupled = c.kind == OptimizerKind::AdamW;
                let bc1 = 1.0 - c.beta1.powf(self.step as f64);
                let bc2 = 1.0 - c.beta2.powf(self.step as f64);
                for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
                    for (((w, &gi), mi), vi) in p.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let d = if decoupled {
                            *w *= 1.0 - lr * wd;
                            gi
                        } else {
                            gi + wd * *w
                        };
                        *mi = c.beta1 * *mi + (1.0 - c.beta1) * d;
                        *vi = c.beta2 * *vi + (1.0 - c.beta2) * d * d;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *w -= lr * mhat / (vhat.sqrt() + c.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(cfg: OptimizerConfig, w0: f64, grads: &[f64], lr: f64) -> f64 {
        let mut opt = Optimizer::new(cfg);
        let mut p = Tensor::scalar(w0);
        for &g in grads {
            opt.step(vec![&mut p], &[Tensor::scalar(g)], lr).unwrap();
        }
        p.item()
    }

    #[test]
    fn sgd_single_step() {
        assert!((run(OptimizerConfig::sgd(0.1, 0.0), 1.0, &[1.0], 0.1) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        for cfg in [OptimizerConfig::sgd(0.1, 0.0), OptimizerConfig::adam(0.1, 0.0), OptimizerConfig::adamw(0.1, 0.0)] {
            assert_eq!(run(cfg, 0.7, &[0.0, 0.0, 0.0], 0.1), 0.7);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // m_hat = g and v_hat = g^2, so the step is lr * g / (|g| + eps)
        let w = run(OptimizerConfig::adam(0.01, 0.0), 1.0, &[0.5], 0.01);
        assert!((w - (1.0 - 0.01 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn adam_two_step_trace() {
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.1);
        let (g1, g2) = (1.0, -2.0);
        let mut w = 3.0;
        let (mut m, mut v) = (0.0, 0.0);
        for (t, g) in [(1, g1), (2, g2)] {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - f64::powi(b1, t));
            let vh = v / (1.0 - f64::powi(b2, t));
            w -= lr * mh / (vh.sqrt() + eps);
        }
        let got = run(OptimizerConfig::adam(lr, 0.0), 3.0, &[g1, g2], lr);
        assert!((got - w).abs() < 1e-14, "{got} vs {w}");
    }

    #[test]
    fn adamw_decay_is_decoupled() {
        // zero gradient: Adam's coupled decay moves by ~lr, AdamW by lr*wd*w
        let adamw = run(OptimizerConfig::adamw(0.1, 0.5), 2.0, &[0.0], 0.1);
        assert!((adamw - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
        let adam = run(OptimizerConfig::adam(0.1, 0.5), 2.0, &[0.0], 0.1);
        assert!((adam - (2.0 - 0.1 * 1.0 / (1.0 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn sgd_momentum() {
        let cfg = OptimizerConfig { momentum: 0.9, ..OptimizerConfig::sgd(1.0, 0.0) };
        // buffers 1, 1.9; w = 0 - 1 - 1.9
        assert!((run(cfg, 0.0, &[1.0, 1.0], 1.0) + 2.9).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1, 0.0));
        let mut p = Tensor::zeros(&[2]);
        assert!(opt.step(vec![&mut p], &[Tensor::zeros(&[3])], 0.1).is_err());
        assert!(opt.step(vec![&mut p], &[], 0.1).is_err());
    }
}
