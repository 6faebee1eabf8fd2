//! Attribution-robustness measurements: map similarities, random
//! perturbation similarity, and the insertion games.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attack::{run_attack, AttackConfig, AttackResult};
use crate::attribution::{attribute_batch, min_max, spatial_map, AttrOptions, Method};
use crate::criteria::uniform_delta;
use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::nn::Network;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 7;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SimilarityMeasure {
    CosSim,
    Pcc,
    Ssim,
}

impl SimilarityMeasure {
    pub const ALL: [SimilarityMeasure; 3] = [SimilarityMeasure::CosSim, SimilarityMeasure::Pcc, SimilarityMeasure::Ssim];

    pub fn name(&self) -> &'static str {
        match self {
            SimilarityMeasure::CosSim => "cossim",
            SimilarityMeasure::Pcc => "pcc",
            SimilarityMeasure::Ssim => "ssim",
        }
    }
}

impl fmt::Display for SimilarityMeasure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SimilarityMeasure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SimilarityMeasure::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown similarity '{s}' (cossim, pcc, ssim)")))
    }
}

/// Cosine similarity of two flattened maps. Fails when either is zero.
pub fn cossim(a: &[f64], b: &[f64]) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if !(na > 0.0 && nb > 0.0) {
        return Err(Error::Degenerate("cosine similarity of an all-zero map".into()));
    }
    // a single square root keeps cossim(a, a) exactly 1
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation. Fails on constant maps.
pub fn pcc(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::Degenerate("correlation of empty maps".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let ca: Vec<f64> = a.iter().map(|v| v - ma).collect();
    let cb: Vec<f64> = b.iter().map(|v| v - mb).collect();
    cossim(&ca, &cb).map_err(|_| Error::Degenerate("correlation of a constant map is undefined".into()))
}

fn min_max_normalized(v: &[f64]) -> Vec<f64> {
    let (lo, hi) = min_max(v);
    if !(hi > lo) {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

/// Mean SSIM over all `k x k` windows (`k = min(7, h, w)`) of two
/// min-max normalized `h x w` maps.
pub fn ssim_2d(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    if a.len() != h * w || b.len() != h * w || a.is_empty() {
        return Err(invalid(format!("ssim expects two {h}x{w} maps")));
    }
    let a = min_max_normalized(a);
    let b = min_max_normalized(b);
    let k = SSIM_WINDOW.min(h).min(w);
    let nk = (k * k) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=h - k {
        for x0 in 0..=w - k {
            let (mut sa, mut sb) = (0.0, 0.0);
            for y in y0..y0 + k {
                for x in x0..x0 + k {
                    sa += a[y * w + x];
                    sb += b[y * w + x];
                }
            }
            let (ma, mb) = (sa / nk, sb / nk);
            let (mut va, mut vb, mut cab) = (0.0, 0.0, 0.0);
            for y in y0..y0 + k {
                for x in x0..x0 + k {
                    let (da, db) = (a[y * w + x] - ma, b[y * w + x] - mb);
                    va += da * da;
                    vb += db * db;
                    cab += da * db;
                }
            }
            let (va, vb, cab) = (va / nk, vb / nk, cab / nk);
            let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cab + SSIM_C2);
            let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Similarity of two maps of equal shape. SSIM works on channel-summed
/// spatial maps; cossim and pcc on the full flattened maps.
pub fn similarity(a: &Tensor, b: &Tensor, kind: SimilarityMeasure) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch { op: "similarity", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
    }
    match kind {
        SimilarityMeasure::CosSim => cossim(a.data(), b.data()),
        SimilarityMeasure::Pcc => pcc(a.data(), b.data()),
        SimilarityMeasure::Ssim => {
            let (h, w, sa) = spatial_map(a);
            let (_, _, sb) = spatial_map(b);
            ssim_2d(&sa, &sb, h, w)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RpsResult {
    pub mean: f64,
    /// Sample/draw pairs that entered the mean.
    pub evaluated: usize,
    /// Samples left out because their clean map is degenerate for the measure.
    pub skipped: usize,
}

/// Random perturbation similarity: the mean of `measure(h(x + delta), h(x))`
/// over the dataset and `n_samples` draws `delta ~ U([-eps, eps]^d)`.
/// Maps are taken for the true class.
#[allow(clippy::too_many_arguments)]
pub fn rps(
    net: &Network,
    data: &Dataset,
    method: Method,
    measure: SimilarityMeasure,
    eps: f64,
    n_samples: usize,
    seed: u64,
    opts: &AttrOptions,
) -> Result<RpsResult> {
    if data.is_empty() {
        return Err(invalid("rps needs a non-empty dataset"));
    }
    if !(eps >= 0.0) || n_samples == 0 {
        return Err(invalid("rps needs eps >= 0 and at least one sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut total, mut evaluated, mut skipped) = (0.0, 0usize, 0usize);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(64) {
        let (x, y) = data.batch(chunk);
        let clean = attribute_batch(net, &x, &y, method, opts)?;
        let draws: Vec<Tensor> = (0..n_samples)
            .map(|_| {
                let d = uniform_delta(x.shape(), eps, &mut rng);
                let xp = x.zip_map(&d, |a, b| a + b).expect("same shape");
                attribute_batch(net, &xp, &y, method, opts)
            })
            .collect::<Result<_>>()?;
        for r in 0..chunk.len() {
            let h = clean.row_tensor(r);
            if similarity(&h, &h, measure).is_err() {
                skipped += 1;
                continue;
            }
            for d in &draws {
                // a degenerate perturbed map shares nothing with the clean one
                total += match similarity(&d.row_tensor(r), &h, measure) {
                    Ok(v) => v,
                    Err(Error::Degenerate(_)) => 0.0,
                    Err(e) => return Err(e),
                };
                evaluated += 1;
            }
        }
    }
    let mean = if evaluated > 0 { total / evaluated as f64 } else { f64::NAN };
    Ok(RpsResult { mean, evaluated, skipped })
}

/// The standard grid `0, 0.05, ..., 1`.
pub fn gamma_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

/// Mask with exactly `round_half_up(gamma * d)` ones on the highest scores,
/// ties broken towards the lower index.
pub fn insertion_mask(scores: &[f64], gamma: f64) -> Vec<bool> {
    let order = insertion_order(scores);
    let k = insertion_count(scores.len(), gamma);
    let mut mask = vec![false; scores.len()];
    for &i in &order[..k] {
        mask[i] = true;
    }
    mask
}

fn insertion_count(d: usize, gamma: f64) -> usize {
    ((gamma.clamp(0.0, 1.0) * d as f64 + 0.5).floor() as usize).min(d)
}

fn insertion_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

#[derive(Clone, Debug, PartialEq)]
pub struct InsertionCurve {
    pub gammas: Vec<f64>,
    /// Mean `p_y(x_gamma)` per gamma.
    pub probabilities: Vec<f64>,
    pub mean_over_gamma: f64,
}

impl InsertionCurve {
    pub fn csv(&self, percent: bool) -> String {
        let scale = if percent { 100.0 } else { 1.0 };
        let mut s = String::from(INSERTION_CSV_HEADER);
        s.push('\n');
        for (g, p) in self.gammas.iter().zip(&self.probabilities) {
            s += &format!("{g},{}\n", p * scale);
        }
        s
    }
}

pub const INSERTION_CSV_HEADER: &str = "gamma,mean_probability";
pub const RPS_CSV_HEADER: &str = "method,measure,epsilon,rps,evaluated,skipped";

/// Per-gamma mean true-class probability of `x * m` (zero baseline) where
/// the masks follow `orders[n]` (a ranking of sample `n`'s features).
fn curve_from_orders(net: &Network, data: &Dataset, orders: &[Vec<f64>], grid: &[f64]) -> Result<InsertionCurve> {
    let n = data.len();
    let per = data.inputs().row_len();
    let mut sums = vec![0.0; grid.len()];
    let mut shape = data.inputs().shape().to_vec();
    shape[0] = grid.len();
    for (i, scores) in orders.iter().enumerate() {
        let x = data.inputs().row(i);
        let y = data.labels()[i];
        let mut recon = Vec::with_capacity(grid.len() * per);
        for &gm in grid {
            let m = insertion_mask(scores, gm);
            for (j, &keep) in m.iter().enumerate() {
                recon.push(if keep { x[j] } else { 0.0 });
            }
        }
        let probs = net.probs(&Tensor::new(shape.clone(), recon)?)?;
        for (k, s) in sums.iter_mut().enumerate() {
            *s += probs.row(k)[y];
        }
    }
    let probabilities: Vec<f64> = sums.iter().map(|s| s / n as f64).collect();
    let mean_over_gamma = probabilities.iter().sum::<f64>() / grid.len().max(1) as f64;
    Ok(InsertionCurve { gammas: grid.to_vec(), probabilities, mean_over_gamma })
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() || grid.iter().any(|g| !(0.0..=1.0).contains(g)) {
        return Err(invalid("gamma grid must be non-empty with values in [0, 1]"));
    }
    Ok(())
}

/// Insertion game from the zero image, ordered by `h(x)` for the true class.
pub fn insertion_curve(net: &Network, data: &Dataset, method: Method, grid: &[f64], opts: &AttrOptions) -> Result<InsertionCurve> {
    if data.is_empty() {
        return Err(invalid("insertion needs a non-empty dataset"));
    }
    validate_grid(grid)?;
    let maps = attribute_batch(net, data.inputs(), data.labels(), method, opts)?;
    let orders: Vec<Vec<f64>> = (0..data.len()).map(|i| maps.row(i).to_vec()).collect();
    curve_from_orders(net, data, &orders, grid)
}

/// Which pixels an adversarial insertion game reconstructs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReconstructionSource {
    Clean,
    Adversarial,
}

/// Insertion game ordered by the attribution of a targeted attack's output.
/// With [`ReconstructionSource::Clean`] the inserted pixels come from the
/// clean input; otherwise from the adversarial one.
pub fn adv_insertion_curve(
    net: &Network,
    data: &Dataset,
    method: Method,
    attack: &AttackConfig,
    grid: &[f64],
    source: ReconstructionSource,
) -> Result<(InsertionCurve, Vec<AttackResult>)> {
    if data.is_empty() {
        return Err(invalid("insertion needs a non-empty dataset"));
    }
    validate_grid(grid)?;
    let mut results = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let cfg = AttackConfig { method, ..attack.clone() };
        results.push(run_attack(net, &data.input(i), data.labels()[i], &cfg)?);
    }
    let orders: Vec<Vec<f64>> = results.iter().map(|r| r.map.data().to_vec()).collect();
    let curve = match source {
        ReconstructionSource::Clean => curve_from_orders(net, data, &orders, grid)?,
        ReconstructionSource::Adversarial => {
            let adv: Vec<&Tensor> = results.iter().map(|r| &r.x_adv).collect();
            let adv_data = Dataset::new(Tensor::stack(&adv)?, data.labels().to_vec(), data.class_count())?;
            curve_from_orders(net, &adv_data, &orders, grid)?
        }
    };
    Ok((curve, results))
}
