//! Fixtures for the criterion benches.

use gradalign::autodiff::Graph;
use gradalign::data::{make_synthetic_digits, Dataset};
use gradalign::train::{batch_loss, LossInputs, Regularizer, RunConfig};
use gradalign::{Activation, Network, Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const SIDE: usize = 16;
pub const CLASSES: usize = 10;

/// A Softplus mini LeNet and one batch of synthetic digits.
pub struct Fixture {
    pub net: Network,
    pub data: Dataset,
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl Fixture {
    pub fn new(batch: usize, seed: u64) -> Result<Self> {
        let data = make_synthetic_digits(batch.max(CLASSES), CLASSES, SIDE, seed)?;
        let idx: Vec<usize> = (0..batch).collect();
        let (x, y) = data.batch(&idx);
        let net = Network::mini_lenet(3, SIDE, CLASSES, Activation::softplus(3.0), seed)?;
        Ok(Self { net, data, x, y })
    }
}

/// Settings for one regularizer with the default weights.
pub fn config(reg: Regularizer, detach: bool) -> RunConfig {
    RunConfig { detach_base_gradient: detach, ..RunConfig::for_regularizer(reg) }
}

/// Loss and parameter gradients for one batch; returns the loss so the work
/// cannot be optimized away.
pub fn train_step(f: &Fixture, cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Result<f64> {
    let g = Graph::new();
    let bound = f.net.bind(&g, true);
    let inp = LossInputs::new(&f.x, &f.y);
    let out = batch_loss(&bound, &inp, cfg, rng)?;
    let grads = g.backward(out.loss, bound.params())?;
    Ok(out.loss.item() + grads[0].data()[0])
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_benched_step_runs() {
        let f = Fixture::new(4, 0).unwrap();
        for reg in [Regularizer::Ce, Regularizer::L2Cos, Regularizer::Hessian] {
            for detach in [true, false] {
                let v = train_step(&f, &config(reg, detach), &mut rng(0)).unwrap();
                assert!(v.is_finite());
            }
        }
    }
}
