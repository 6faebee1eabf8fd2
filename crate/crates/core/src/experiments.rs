//! Decision-surface exports and the cosine-criterion bound sweep.

use crate::criteria::{crc_upper_bound_batch, logit_gradients, require_smooth, unit_directions, DEGENERATE_NORM};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SURFACE_CSV_HEADER: &str = "x0,x1,margin,grad0,grad1";
pub const PAIR_CSV_HEADER: &str = "ax0,ax1,bx0,bx1,l2_distance,cossim";
pub const BOUND_CSV_HEADER: &str = "epsilon,mean_crc,mean_bound,satisfied_fraction,points,degenerate";

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn require_planar(net: &Network) -> Result<()> {
    if net.input_shape() != [2] || net.class_count() != 2 {
        return Err(invalid(format!(
            "surface needs a 2-input, 2-class network, got input {:?} and {} classes",
            net.input_shape(),
            net.class_count()
        )));
    }
    Ok(())
}

/// Regular `n x n` grid over a rectangle, row-major in `x1` then `x0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub x0_range: (f64, f64),
    pub x1_range: (f64, f64),
    pub n: usize,
}

impl GridSpec {
    pub fn new(x0_range: (f64, f64), x1_range: (f64, f64), n: usize) -> Result<Self> {
        if n == 0 {
            return Err(invalid("grid needs n >= 1"));
        }
        for (lo, hi) in [x0_range, x1_range] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(invalid(format!("bad grid range [{lo}, {hi}]")));
            }
        }
        Ok(Self { x0_range, x1_range, n })
    }

    /// Bounding box of a 2D dataset widened by `pad` on each side.
    pub fn around(data: &Dataset, pad: f64, n: usize) -> Result<Self> {
        if data.sample_shape() != [2] || data.is_empty() {
            return Err(invalid("grid needs a non-empty 2D dataset"));
        }
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in data.inputs().data().chunks(2) {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        Self::new((lo[0] - pad, hi[0] + pad), (lo[1] - pad, hi[1] + pad), n)
    }

    fn coord(range: (f64, f64), i: usize, n: usize) -> f64 {
        if n == 1 {
            return 0.5 * (range.0 + range.1);
        }
        range.0 + (range.1 - range.0) * i as f64 / (n - 1) as f64
    }

    pub fn points(&self) -> Vec<[f64; 2]> {
        let mut out = Vec::with_capacity(self.n * self.n);
        for j in 0..self.n {
            for i in 0..self.n {
                out.push([Self::coord(self.x0_range, i, self.n), Self::coord(self.x1_range, j, self.n)]);
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfacePoint {
    pub x: [f64; 2],
    /// `g_1(x) - g_0(x)`
    pub margin: f64,
    /// Gradient of the margin.
    pub grad: [f64; 2],
}

/// Margin and margin gradient at each point.
pub fn margin_field(net: &Network, points: &[[f64; 2]]) -> Result<Vec<SurfacePoint>> {
    require_planar(net)?;
    if points.is_empty() {
        return Ok(Vec::new());
    }
    let n = points.len();
    let x = Tensor::new(vec![n, 2], points.iter().flat_map(|p| p.iter().copied()).collect())?;
    let logits = net.logits(&x)?;
    let g0 = logit_gradients(net, &x, &vec![0; n])?;
    let g1 = logit_gradients(net, &x, &vec![1; n])?;
    Ok((0..n)
        .map(|r| {
            let (a, b) = (g0.row(r), g1.row(r));
            let l = logits.row(r);
            SurfacePoint { x: points[r], margin: l[1] - l[0], grad: [b[0] - a[0], b[1] - a[1]] }
        })
        .collect())
}

pub fn surface_grid(net: &Network, spec: &GridSpec) -> Result<Vec<SurfacePoint>> {
    margin_field(net, &spec.points())
}

pub fn surface_csv(points: &[SurfacePoint]) -> String {
    let mut s = format!("{SURFACE_CSV_HEADER}\n");
    for p in points {
        s.push_str(&format!("{},{},{},{},{}\n", p.x[0], p.x[1], p.margin, p.grad[0], p.grad[1]));
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairStats {
    pub a: [f64; 2],
    pub b: [f64; 2],
    /// l2 distance between the two margin gradients.
    pub l2_distance: f64,
    /// Cosine similarity of the two margin gradients (0 when either vanishes).
    pub cossim: f64,
}

pub fn pair_stats(net: &Network, a: [f64; 2], b: [f64; 2]) -> Result<PairStats> {
    let f = margin_field(net, &[a, b])?;
    let (ga, gb) = (f[0].grad, f[1].grad);
    let l2_distance = (ga[0] - gb[0]).hypot(ga[1] - gb[1]);
    let (na, nb) = (ga[0].hypot(ga[1]), gb[0].hypot(gb[1]));
    let cossim = if na < DEGENERATE_NORM || nb < DEGENERATE_NORM {
        0.0
    } else {
        ((ga[0] * gb[0] + ga[1] * gb[1]) / (na * nb)).clamp(-1.0, 1.0)
    };
    Ok(PairStats { a, b, l2_distance, cossim })
}

pub fn pair_csv(pairs: &[PairStats]) -> String {
    let mut s = format!("{PAIR_CSV_HEADER}\n");
    for p in pairs {
        s.push_str(&format!("{},{},{},{},{},{}\n", p.a[0], p.a[1], p.b[0], p.b[1], p.l2_distance, p.cossim));
    }
    s
}

/// Nearby point pairs straddling the decision boundary.
///
/// Each pair is built from a random opposite-label data pair whose segment
/// crosses the boundary: the crossing is located by bisection and the pair is
/// `z +- radius * u` for a random unit `u`.
pub fn near_boundary_pairs(net: &Network, data: &Dataset, count: usize, radius: f64, seed: u64) -> Result<Vec<PairStats>> {
    require_planar(net)?;
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(invalid(format!("radius must be positive, got {radius}")));
    }
    let labels = data.labels();
    let class0: Vec<usize> = (0..data.len()).filter(|&i| labels[i] == 0).collect();
    let class1: Vec<usize> = (0..data.len()).filter(|&i| labels[i] == 1).collect();
    if class0.is_empty() || class1.is_empty() {
        return Err(invalid("near_boundary_pairs needs both classes present"));
    }
    let margin = |p: [f64; 2]| -> Result<f64> {
        let l = net.logits_one(&Tensor::new(vec![2], p.to_vec())?)?;
        Ok(l.data()[1] - l.data()[0])
    };
    let point = |i: usize| -> [f64; 2] {
        let r = data.inputs().row(i);
        [r[0], r[1]]
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    let mut tries = 0usize;
    while out.len() < count {
        tries += 1;
        if tries > 100 * count.max(1) {
            return Err(Error::Degenerate(format!("found only {} of {count} boundary crossings", out.len())));
        }
        let (mut lo, mut hi) = (point(*class0.choose(&mut rng).unwrap()), point(*class1.choose(&mut rng).unwrap()));
        let (m_lo, m_hi) = (margin(lo)?, margin(hi)?);
        if m_lo.signum() == m_hi.signum() {
            continue;
        }
        for _ in 0..60 {
            let mid = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])];
            if margin(mid)?.signum() == m_lo.signum() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let z = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])];
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        let u = [theta.cos() * radius, theta.sin() * radius];
        out.push(pair_stats(net, [z[0] + u[0], z[1] + u[1]], [z[0] - u[0], z[1] - u[1]])?);
    }
    Ok(out)
}

/// Means of the pair statistics: `(l2_distance, cossim)`.
pub fn mean_pair_stats(pairs: &[PairStats]) -> (f64, f64) {
    if pairs.is_empty() {
        return (0.0, 0.0);
    }
    let n = pairs.len() as f64;
    (pairs.iter().map(|p| p.l2_distance).sum::<f64>() / n, pairs.iter().map(|p| p.cossim).sum::<f64>() / n)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundSweepRow {
    pub epsilon: f64,
    pub mean_crc: f64,
    pub mean_bound: f64,
    /// Fraction of non-degenerate points with `crc <= bound * (1 + rel_tol) + abs_tol`.
    pub satisfied_fraction: f64,
    pub points: usize,
    pub degenerate: usize,
}

pub const BOUND_REL_TOL: f64 = 1e-2;
pub const BOUND_ABS_TOL: f64 = 1e-8;

/// Cosine criterion against its Hessian bound term over `n_points` draws of
/// `(x, unit direction)`; samples cycle through `data` in order. Max pooling
/// makes the gradient jump where a pooling winner switches, so on pooled nets
/// a small fraction of points exceeds the bound at any epsilon.
pub fn bound_sweep(net: &Network, data: &Dataset, eps_list: &[f64], n_points: usize, seed: u64) -> Result<Vec<BoundSweepRow>> {
    require_smooth(net, "bound_sweep")?;
    if data.is_empty() {
        return Err(invalid("bound_sweep needs a non-empty dataset"));
    }
    for &e in eps_list {
        if !(e > 0.0 && e.is_finite()) {
            return Err(invalid(format!("epsilon must be positive, got {e}")));
        }
    }
    let mut rows = Vec::with_capacity(eps_list.len());
    for (k, &eps) in eps_list.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        let (mut lhs, mut rhs, mut ok, mut used, mut degenerate) = (0.0, 0.0, 0usize, 0usize, 0usize);
        let mut start = 0;
        while start < n_points {
            let len = (n_points - start).min(64);
            let idx: Vec<usize> = (start..start + len).map(|i| i % data.len()).collect();
            let (x, y) = data.batch(&idx);
            let dir = unit_directions(x.shape(), &mut rng);
            for p in crc_upper_bound_batch(net, &x, &y, &dir, eps)? {
                if p.degenerate {
                    degenerate += 1;
                    continue;
                }
                used += 1;
                lhs += p.lhs;
                rhs += p.rhs;
                if p.lhs <= p.rhs * (1.0 + BOUND_REL_TOL) + BOUND_ABS_TOL {
                    ok += 1;
                }
            }
            start += len;
        }
        let denom = used.max(1) as f64;
        rows.push(BoundSweepRow {
            epsilon: eps,
            mean_crc: lhs / denom,
            mean_bound: rhs / denom,
            satisfied_fraction: if used == 0 { 1.0 } else { ok as f64 / used as f64 },
            points: used,
            degenerate,
        });
    }
    Ok(rows)
}

pub fn bound_csv(rows: &[BoundSweepRow]) -> String {
    let mut s = format!("{BOUND_CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epsilon, r.mean_crc, r.mean_bound, r.satisfied_fraction, r.points, r.degenerate
        ));
    }
    s
}
