//! Training loop, objectives and optimizers.

mod config;
mod loss;
mod optim;

pub use config::{AtexConfig, IgaConfig, OptimizerConfig, OptimizerKind, Regularizer, RunConfig};
pub use loss::{
    alignment_terms, atex_directions, atex_loss, atex_terms, batch_loss, ce_loss, ce_term, combined_loss, cos_loss,
    hessian_loss, iga_attr_rows, iga_loss, iga_perturb, l2_loss, maxent_loss, AtexBatch, BatchLoss, LossInputs,
    LossParts,
};
pub use optim::Optimizer;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::nn::Network;
use crate::tensor::Tensor;

pub const LOSSES_CSV_HEADER: &str = "epoch,ce,l2_term,cos_term,reg_term,total,acc,lr";
pub const TIMING_CSV_HEADER: &str = "epoch,seconds,peak_stored_values";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSSES_FILE: &str = "losses.csv";
pub const TIMING_FILE: &str = "timing.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted means over the epoch.
    pub parts: LossParts,
    pub total: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub seconds: f64,
    /// Samples whose ATEX perturbation term was skipped.
    pub skipped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Largest number of `f64` values held by one batch tape.
    pub peak_stored_values: usize,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn peak_memory_bytes(&self) -> usize {
        self.peak_stored_values * std::mem::size_of::<f64>()
    }

    pub fn total_seconds(&self) -> f64 {
        self.epochs.iter().map(|e| e.seconds).sum()
    }

    pub fn mean_epoch_seconds(&self) -> f64 {
        if self.epochs.is_empty() {
            0.0
        } else {
            self.total_seconds() / self.epochs.len() as f64
        }
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.accuracy)
    }

    /// Deterministic loss log: no wall-clock columns.
    pub fn losses_csv(&self) -> String {
        let mut s = format!("{LOSSES_CSV_HEADER}\n");
        for e in &self.epochs {
            let p = &e.parts;
            s += &format!("{},{},{},{},{},{},{},{}\n", e.epoch, p.ce, p.l2, p.cos, p.reg, e.total, e.accuracy, e.lr);
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = format!("{TIMING_CSV_HEADER}\n");
        for e in &self.epochs {
            s += &format!("{},{},{}\n", e.epoch, e.seconds, self.peak_stored_values);
        }
        s
    }
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Accuracy is measured here; the training set is used when absent.
    pub eval: Option<&'a Dataset>,
    /// Required for atex.
    pub teacher: Option<&'a Network>,
    /// Receives the checkpoint and CSV logs.
    pub out_dir: Option<&'a Path>,
    pub on_epoch: Option<&'a dyn Fn(&EpochRecord)>,
}

/// Fraction of correctly classified samples.
pub fn accuracy(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(256) {
        let (x, y) = data.batch(chunk);
        correct += net.predict(&x)?.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

fn check_finite(parts: &LossParts, reg: Regularizer, epoch: usize, step: usize) -> Result<()> {
    for (name, v) in parts.named(reg) {
        if !v.is_finite() {
            return Err(Error::NonFinite { component: name.to_string(), epoch, step });
        }
    }
    Ok(())
}

/// Trains a copy of `net` on `data` and returns it with the report.
/// Shuffling, perturbations and probes all come from one stream seeded by
/// `cfg.seed`, so equal inputs give bit-identical results.
pub fn train(net: &Network, data: &Dataset, cfg: &RunConfig, opts: &TrainOptions<'_>) -> Result<(Network, TrainReport)> {
    cfg.validate()?;
    if data.sample_shape() != net.input_shape() {
        return Err(Error::ShapeMismatch {
            op: "train",
            lhs: data.sample_shape().to_vec(),
            rhs: net.input_shape().to_vec(),
        });
    }
    if data.class_count() > net.class_count() {
        return Err(invalid(format!(
            "dataset has {} classes but the network predicts {}",
            data.class_count(),
            net.class_count()
        )));
    }
    let directions = if cfg.regularizer == Regularizer::Atex && cfg.epochs > 0 {
        let teacher = opts.teacher.ok_or_else(|| invalid("atex training needs a teacher network"))?;
        Some(atex_directions(teacher, data.inputs(), data.labels(), cfg, cfg.seed ^ 0x5eed)?)
    } else {
        None
    };

    let mut net = net.clone();
    let mut opt = Optimizer::new(cfg.optimizer.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut peak = 0usize;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut sums = LossParts::default();
        let mut skipped = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = data.batch(chunk);
            let dirs = match &directions {
                Some(d) => Some(gather_rows(d, chunk)?),
                None => None,
            };
            let g = Graph::new();
            let (parts, grads) = {
                let bound = net.bind(&g, true);
                let inp = LossInputs {
                    x: &x,
                    y: &y,
                    bounds: Some(data.bounds()),
                    atex: match (&dirs, opts.teacher) {
                        (Some(d), Some(t)) => Some(AtexBatch { teacher: t, directions: d }),
                        _ => None,
                    },
                };
                let out = batch_loss(&bound, &inp, cfg, &mut rng)?;
                check_finite(&out.parts, cfg.regularizer, epoch, step)?;
                skipped += out.skipped;
                let grads = g.backward(out.loss, bound.params())?;
                (out.parts, grads)
            };
            peak = peak.max(g.stored_values());
            drop(g);
            opt.step(net.parameters_mut(), &grads, lr)?;
            let w = chunk.len() as f64;
            sums.ce += w * parts.ce;
            sums.l2 += w * parts.l2;
            sums.cos += w * parts.cos;
            sums.reg += w * parts.reg;
            step += 1;
        }
        let n = data.len().max(1) as f64;
        let parts = LossParts { ce: sums.ce / n, l2: sums.l2 / n, cos: sums.cos / n, reg: sums.reg / n };
        let seconds = start.elapsed().as_secs_f64();
        let acc = accuracy(&net, opts.eval.unwrap_or(data))?;
        let rec = EpochRecord { epoch, parts, total: parts.total(), accuracy: acc, lr, seconds, skipped };
        if let Some(cb) = opts.on_epoch {
            cb(&rec);
        }
        records.push(rec);
    }

    let mut report = TrainReport { epochs: records, peak_stored_values: peak, checkpoint: None };
    if let Some(dir) = opts.out_dir {
        report.checkpoint = Some(write_outputs(dir, &net, &report)?);
    }
    Ok((net, report))
}

fn gather_rows(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let per = t.row_len();
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(t.row(i));
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data)
}

/// Writes the checkpoint, `losses.csv` and `timing.csv` into `dir` and
/// returns the checkpoint path.
pub fn write_outputs(dir: &Path, net: &Network, report: &TrainReport) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    net.save(&ckpt)?;
    fs::File::create(dir.join(LOSSES_FILE))?.write_all(report.losses_csv().as_bytes())?;
    fs::File::create(dir.join(TIMING_FILE))?.write_all(report.timing_csv().as_bytes())?;
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_moons_2d;
    use crate::nn::Activation;

    fn quick(reg: Regularizer, epochs: usize) -> RunConfig {
        RunConfig {
            epochs,
            batch_size: 32,
            milestones: vec![],
            optimizer: OptimizerConfig::adam(0.01, 0.0),
            epsilon: 0.1,
            ..RunConfig::for_regularizer(reg)
        }
    }

    #[test]
    fn zero_epochs_return_initial_net() {
        let data = make_moons_2d(40, 0.1, 0).unwrap();
        let net = Network::mlp(&[2, 8, 2], Activation::softplus(3.0), 1).unwrap();
        let (out, rep) = train(&net, &data, &quick(Regularizer::L2Cos, 0), &TrainOptions::default()).unwrap();
        assert_eq!(out.to_bytes(), net.to_bytes());
        assert!(rep.epochs.is_empty());
    }

    #[test]
    fn every_regularizer_runs_and_decomposes() {
        let data = make_moons_2d(48, 0.1, 0).unwrap();
        let net = Network::mlp(&[2, 8, 2], Activation::softplus(3.0), 1).unwrap();
        let teacher = train(&net, &data, &quick(Regularizer::Ce, 3), &TrainOptions::default()).unwrap().0;
        for reg in Regularizer::ALL {
            let opts = TrainOptions { teacher: Some(&teacher), ..Default::default() };
            let (_, rep) = train(&net, &data, &quick(reg, 2), &opts).unwrap();
            for e in &rep.epochs {
                let p = e.parts;
                assert!((e.total - (p.ce + p.l2 + p.cos + p.reg)).abs() < 1e-12, "{reg}");
                assert!(p.ce.is_finite() && e.total.is_finite());
            }
            assert!(rep.peak_stored_values > 0);
        }
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let data = make_moons_2d(40, 0.1, 3).unwrap();
        let net = Network::mlp(&[2, 6, 2], Activation::softplus(3.0), 2).unwrap();
        let cfg = quick(Regularizer::L2Cos, 3);
        let (a, ra) = train(&net, &data, &cfg, &TrainOptions::default()).unwrap();
        let (b, rb) = train(&net, &data, &cfg, &TrainOptions::default()).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(ra.losses_csv(), rb.losses_csv());
    }

    #[test]
    fn atex_without_teacher_fails() {
        let data = make_moons_2d(8, 0.1, 3).unwrap();
        let net = Network::mlp(&[2, 4, 2], Activation::softplus(3.0), 2).unwrap();
        assert!(train(&net, &data, &quick(Regularizer::Atex, 1), &TrainOptions::default()).is_err());
    }

    #[test]
    fn diverging_loss_names_component() {
        let data = make_moons_2d(16, 0.1, 3).unwrap();
        let net = Network::mlp(&[2, 4, 2], Activation::softplus(3.0), 2).unwrap();
        let mut bad = net.clone();
        for p in bad.parameters_mut() {
            p.data_mut().iter_mut().for_each(|v| *v = f64::NAN);
        }
        let err = train(&bad, &data, &quick(Regularizer::Ce, 1), &TrainOptions::default()).unwrap_err();
        match err {
            Error::NonFinite { component, epoch, step } => {
                assert_eq!(component, "ce");
                assert_eq!((epoch, step), (0, 0));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn outputs_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let data = make_moons_2d(16, 0.1, 3).unwrap();
        let net = Network::mlp(&[2, 4, 2], Activation::softplus(3.0), 2).unwrap();
        let opts = TrainOptions { out_dir: Some(dir.path()), ..Default::default() };
        let (out, rep) = train(&net, &data, &quick(Regularizer::Ce, 2), &opts).unwrap();
        let ckpt = rep.checkpoint.unwrap();
        assert_eq!(Network::load(&ckpt).unwrap(), out);
        let csv = fs::read_to_string(dir.path().join(LOSSES_FILE)).unwrap();
        assert_eq!(csv.lines().next().unwrap(), LOSSES_CSV_HEADER);
        assert_eq!(csv.lines().count(), 3);
    }
}
