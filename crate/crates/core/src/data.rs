//! Datasets: two interleaved half-circles, synthetic glyph images, and the
//! small-image binary batch format (one label byte plus a 3x32x32 byte image
//! per row).

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Per-channel input-domain bounds; the channel axis is the first axis of a
/// single sample.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainBounds {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl DomainBounds {
    pub fn uniform(channels: usize, low: f64, high: f64) -> Self {
        Self { low: vec![low; channels], high: vec![high; channels] }
    }

    /// Actual per-channel min/max of a `[N, C, ...]` batch.
    pub fn of_batch(inputs: &Tensor) -> Self {
        let shape = inputs.shape();
        let c = shape.get(1).copied().unwrap_or(1);
        let inner: usize = shape.get(2..).map(|s| s.iter().product()).unwrap_or(1);
        let mut low = vec![f64::INFINITY; c];
        let mut high = vec![f64::NEG_INFINITY; c];
        for (i, &v) in inputs.data().iter().enumerate() {
            let ch = (i / inner) % c;
            low[ch] = low[ch].min(v);
            high[ch] = high[ch].max(v);
        }
        if inputs.is_empty() {
            low.iter_mut().for_each(|v| *v = 0.0);
            high.iter_mut().for_each(|v| *v = 0.0);
        }
        Self { low, high }
    }

    pub fn channels(&self) -> usize {
        self.low.len()
    }

    /// Bounds broadcast to full sample tensors `(l, h)`.
    pub fn expand(&self, sample_shape: &[usize]) -> Result<(Tensor, Tensor)> {
        if sample_shape.first() != Some(&self.channels()) {
            return Err(Error::ShapeMismatch { op: "bounds", lhs: vec![self.channels()], rhs: sample_shape.to_vec() });
        }
        let inner: usize = sample_shape[1..].iter().product();
        let spread = |v: &[f64]| v.iter().flat_map(|&x| std::iter::repeat(x).take(inner)).collect::<Vec<_>>();
        Ok((
            Tensor::new(sample_shape.to_vec(), spread(&self.low))?,
            Tensor::new(sample_shape.to_vec(), spread(&self.high))?,
        ))
    }

    /// Clamps every element of a `[N, C, ...]` or `[C, ...]` tensor into the
    /// bounds of its channel.
    pub fn clamp(&self, t: &mut Tensor, batched: bool) {
        let shape = t.shape().to_vec();
        let c = self.channels();
        let skip = usize::from(batched);
        let inner: usize = shape.get(skip + 1..).map(|s| s.iter().product()).unwrap_or(1);
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            let ch = (i / inner) % c;
            *v = v.clamp(self.low[ch], self.high[ch]);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Full,
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    class_count: usize,
    bounds: DomainBounds,
    split: Split,
    /// Original label id for each class index (identity unless subset).
    class_ids: Vec<usize>,
}

impl Dataset {
    /// `inputs` is `[N, ...sample shape]`.
    pub fn new(inputs: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if inputs.ndim() < 2 {
            return Err(invalid("dataset inputs must be [N, ...sample shape]"));
        }
        if inputs.rows() != labels.len() {
            return Err(invalid(format!("{} inputs but {} labels", inputs.rows(), labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(invalid(format!("label {bad} out of range for {class_count} classes")));
        }
        let bounds = DomainBounds::of_batch(&inputs);
        Ok(Self { inputs, labels, class_count, bounds, split: Split::Full, class_ids: (0..class_count).collect() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn bounds(&self) -> &DomainBounds {
        &self.bounds
    }

    pub fn split_tag(&self) -> Split {
        self.split
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn input(&self, i: usize) -> Tensor {
        self.inputs.row_tensor(i)
    }

    /// Inputs and labels for the given rows.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let per = self.inputs.row_len();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend_from_slice(self.inputs.row(i));
        }
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = idx.len();
        (Tensor::from_parts(shape, data), idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let (inputs, labels) = self.batch(idx);
        let bounds = DomainBounds::of_batch(&inputs);
        Dataset { inputs, labels, bounds, ..self.clone() }
    }

    /// First `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Random train/test partition, a pure function of `seed`.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..=1.0).contains(&test_fraction) {
            return Err(invalid(format!("test fraction {test_fraction} outside [0, 1]")));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = (test_fraction * self.len() as f64).round() as usize;
        let (test, train) = idx.split_at(n_test);
        let mut tr = self.subset(train);
        tr.split = Split::Train;
        let mut te = self.subset(test);
        te.split = Split::Test;
        Ok((tr, te))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.class_count];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

/// Two interleaved half-circles: class 0 on the unit circle's upper half,
/// class 1 on a unit circle centred at `(1, 0.5)`'s lower half, both with
/// isotropic Gaussian jitter of scale `noise`.
pub fn make_moons_2d(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(invalid("make_moons_2d needs n >= 2"));
    }
    if !(noise >= 0.0) {
        return Err(invalid(format!("noise must be >= 0, got {noise}")));
    }
    let n_out = n / 2;
    let n_in = n - n_out;
    let lin = |k: usize, i: usize| if k > 1 { std::f64::consts::PI * i as f64 / (k - 1) as f64 } else { 0.0 };
    let mut pts: Vec<([f64; 2], usize)> = Vec::with_capacity(n);
    for i in 0..n_out {
        let t = lin(n_out, i);
        pts.push(([t.cos(), t.sin()], 0));
    }
    for i in 0..n_in {
        let t = lin(n_in, i);
        pts.push(([1.0 - t.cos(), 0.5 - t.sin()], 1));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pts.shuffle(&mut rng);
    if noise > 0.0 {
        let normal = Normal::new(0.0, noise).expect("noise checked above");
        for (p, _) in &mut pts {
            p[0] += normal.sample(&mut rng);
            p[1] += normal.sample(&mut rng);
        }
    }
    let data = pts.iter().flat_map(|(p, _)| p.iter().copied()).collect();
    let labels = pts.iter().map(|&(_, l)| l).collect();
    Dataset::new(Tensor::new(vec![n, 2], data)?, labels, 2)
}

const GLYPHS: usize = 10;

fn glyph(k: usize, u: f64, v: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    match k {
        0 => v.abs() < 0.25,
        1 => u.abs() < 0.25,
        2 => (u - v).abs() < 0.35,
        3 => (u + v).abs() < 0.35,
        4 => u.abs() < 0.2 || v.abs() < 0.2,
        5 => u.abs().max(v.abs()) > 0.65,
        6 => (r - 0.7).abs() < 0.22,
        7 => r < 0.6,
        8 => (u - v).abs() < 0.3 || (u + v).abs() < 0.3,
        _ => v.abs() > 0.55,
    }
}

/// Three-channel `side x side` images in `[0, 1]`, each holding one
/// class-specific glyph with random position, size and tint over a noisy
/// background of random brightness, plus one or two distractor strokes.
/// Labels cycle through the classes, so counts differ by at most one.
pub fn make_synthetic_digits(n: usize, classes: usize, side: usize, seed: u64) -> Result<Dataset> {
    if side < 8 {
        return Err(invalid(format!("side must be >= 8, got {side}")));
    }
    if !(2..=GLYPHS).contains(&classes) {
        return Err(invalid(format!("classes must be in 2..={GLYPHS}, got {classes}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = side * side;
    let mut data = Vec::with_capacity(n * 3 * plane);
    let mut labels = Vec::with_capacity(n);
    let s = side as f64;
    for i in 0..n {
        let label = i % classes;
        let half = s * rng.gen_range(0.28..0.36);
        let jitter = s * 0.1;
        let cx = s / 2.0 - 0.5 + rng.gen_range(-jitter..=jitter);
        let cy = s / 2.0 - 0.5 + rng.gen_range(-jitter..=jitter);
        let tint: [f64; 3] = [rng.gen_range(0.45..1.0), rng.gen_range(0.45..1.0), rng.gen_range(0.45..1.0)];
        let mut img = vec![0.0; 3 * plane];
        for v in img.iter_mut() {
            *v = rng.gen_range(0.0..0.25);
        }
        for py in 0..side {
            for px in 0..side {
                let u = (px as f64 - cx) / half;
                let v = (py as f64 - cy) / half;
                if u.abs() <= 1.0 && v.abs() <= 1.0 && glyph(label, u, v) {
                    for (c, t) in tint.iter().enumerate() {
                        img[c * plane + py * side + px] = t * rng.gen_range(0.8..1.0);
                    }
                }
            }
        }
        img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        data.extend(img);
        labels.push(label);
    }
    let inputs = Tensor::new(vec![n, 3, side, side], data)?;
    if n == 0 {
        let mut ds = Dataset::new(inputs, labels, classes)?;
        ds.bounds = DomainBounds::uniform(3, 0.0, 1.0);
        return Ok(ds);
    }
    Dataset::new(inputs, labels, classes)
}

pub const CIFAR_ROW_BYTES: usize = 1 + 3 * 32 * 32;
pub const CIFAR_ROWS_PER_BATCH: usize = 10_000;

#[derive(Clone, Debug, Default)]
pub struct CifarOptions {
    /// Keep only these original labels, remapped to `0..len` in this order.
    pub class_subset: Option<Vec<usize>>,
    /// At most this many samples per kept class, in file order.
    pub per_class_limit: Option<usize>,
    /// Standardize each channel to zero mean and unit variance.
    pub standardize: bool,
    /// Require exactly this many rows (10000 for an original batch file).
    pub expected_rows: Option<usize>,
}

pub fn parse_cifar_binary(bytes: &[u8], opts: &CifarOptions) -> Result<Dataset> {
    if bytes.len() % CIFAR_ROW_BYTES != 0 {
        return Err(Error::Format(format!(
            "truncated batch: {} bytes is not a multiple of the {CIFAR_ROW_BYTES}-byte row",
            bytes.len()
        )));
    }
    let rows = bytes.len() / CIFAR_ROW_BYTES;
    if let Some(expected) = opts.expected_rows {
        if rows != expected {
            return Err(Error::Format(format!("expected {expected} rows, found {rows}")));
        }
    }
    let classes: Vec<usize> = match &opts.class_subset {
        Some(s) => {
            if s.is_empty() || s.iter().any(|&c| c >= 10) {
                return Err(invalid(format!("class subset {s:?} must be non-empty labels below 10")));
            }
            s.clone()
        }
        None => (0..10).collect(),
    };
    let mut taken = vec![0usize; classes.len()];
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for row in bytes.chunks_exact(CIFAR_ROW_BYTES) {
        let original = row[0] as usize;
        if original >= 10 {
            return Err(Error::Format(format!("label byte {original} out of range")));
        }
        let Some(k) = classes.iter().position(|&c| c == original) else { continue };
        if opts.per_class_limit.is_some_and(|lim| taken[k] >= lim) {
            continue;
        }
        taken[k] += 1;
        labels.push(k);
        data.extend(row[1..].iter().map(|&b| b as f64 / 255.0));
    }
    let n = labels.len();
    let mut inputs = Tensor::new(vec![n, 3, 32, 32], data)?;
    if opts.standardize && n > 0 {
        standardize_channels(&mut inputs);
    }
    let mut ds = Dataset::new(inputs, labels, classes.len())?;
    ds.class_ids = classes;
    if n == 0 {
        ds.bounds = DomainBounds::uniform(3, 0.0, 1.0);
    }
    Ok(ds)
}

fn standardize_channels(inputs: &mut Tensor) {
    let c = inputs.shape()[1];
    let inner: usize = inputs.shape()[2..].iter().product();
    let mut sum = vec![0.0; c];
    let mut sq = vec![0.0; c];
    let mut cnt = vec![0.0; c];
    for (i, &v) in inputs.data().iter().enumerate() {
        let ch = (i / inner) % c;
        sum[ch] += v;
        sq[ch] += v * v;
        cnt[ch] += 1.0;
    }
    let stats: Vec<(f64, f64)> = (0..c)
        .map(|k| {
            let m = sum[k] / cnt[k];
            let var = (sq[k] / cnt[k] - m * m).max(0.0);
            (m, var.sqrt().max(1e-12))
        })
        .collect();
    for (i, v) in inputs.data_mut().iter_mut().enumerate() {
        let (m, s) = stats[(i / inner) % c];
        *v = (*v - m) / s;
    }
}

pub fn load_cifar_binary(path: impl AsRef<Path>, opts: &CifarOptions) -> Result<Dataset> {
    parse_cifar_binary(&fs::read(path)?, opts)
}

/// Encodes `[N, 3, 32, 32]` inputs in `[0, 1]` back to the binary row layout,
/// writing original label ids.
pub fn encode_cifar_binary(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.sample_shape() != [3, 32, 32] {
        return Err(invalid(format!("binary layout needs 3x32x32 samples, got {:?}", ds.sample_shape())));
    }
    let mut out = Vec::with_capacity(ds.len() * CIFAR_ROW_BYTES);
    for i in 0..ds.len() {
        let id = ds.class_ids[ds.labels[i]];
        if id > 255 {
            return Err(invalid(format!("label id {id} does not fit in a byte")));
        }
        out.push(id as u8);
        for &v in ds.inputs.row(i) {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid("binary layout needs pixel values in [0, 1]"));
            }
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// Writes the binary batch plus a `<path>.txt` manifest.
pub fn export_cifar_binary(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_cifar_binary(ds)?)?;
    let counts: Vec<String> = ds.class_counts().iter().map(|c| c.to_string()).collect();
    let ids: Vec<String> = ds.class_ids.iter().map(|c| c.to_string()).collect();
    let manifest = format!(
        "rows {}\nrow_bytes {CIFAR_ROW_BYTES}\nshape 3 32 32\nclasses {}\nclass_ids {}\nclass_counts {}\n",
        ds.len(),
        ds.class_count,
        ids.join(" "),
        counts.join(" "),
    );
    let mut side = path.as_os_str().to_owned();
    side.push(".txt");
    fs::write(side, manifest)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moons_without_noise_lie_on_circles() {
        let ds = make_moons_2d(101, 0.0, 3).unwrap();
        for i in 0..ds.len() {
            let p = ds.input(i);
            let (x, y) = (p.data()[0], p.data()[1]);
            let r = if ds.labels()[i] == 0 { x.hypot(y) } else { (x - 1.0).hypot(y - 0.5) };
            assert!((r - 1.0).abs() < 1e-12);
        }
        let c = ds.class_counts();
        assert!(c[0].abs_diff(c[1]) <= 1);
        assert_eq!(ds, make_moons_2d(101, 0.0, 3).unwrap());
    }

    #[test]
    fn bounds_are_actual_extremes() {
        let ds = make_moons_2d(50, 0.1, 1).unwrap();
        let xs: Vec<f64> = (0..ds.len()).map(|i| ds.input(i).data()[0]).collect();
        let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(ds.bounds().low[0], lo);
    }

    #[test]
    fn digits_are_seeded_and_in_range() {
        let a = make_synthetic_digits(20, 10, 16, 5).unwrap();
        assert_eq!(a, make_synthetic_digits(20, 10, 16, 5).unwrap());
        assert!(a.inputs().data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(make_synthetic_digits(0, 10, 16, 5).unwrap().is_empty());
        assert!(make_synthetic_digits(5, 10, 7, 5).is_err());
    }

    #[test]
    fn split_is_a_partition() {
        let ds = make_moons_2d(40, 0.1, 1).unwrap();
        let (tr, te) = ds.split(0.25, 9).unwrap();
        assert_eq!((tr.len(), te.len()), (30, 10));
        assert_eq!(tr.split_tag(), Split::Train);
        let (tr2, _) = ds.split(0.25, 9).unwrap();
        assert_eq!(tr, tr2);
    }

    fn fake_rows(labels: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        for (i, &l) in labels.iter().enumerate() {
            out.push(l);
            out.extend((0..3072).map(|k| ((k * 7 + i * 13) % 256) as u8));
        }
        out
    }

    #[test]
    fn cifar_subset_round_trip() {
        let bytes = fake_rows(&[3, 5, 3, 1, 5, 3]);
        let opts = CifarOptions { class_subset: Some(vec![3, 5]), per_class_limit: Some(2), ..Default::default() };
        let ds = parse_cifar_binary(&bytes, &opts).unwrap();
        assert_eq!(ds.labels(), &[0, 1, 0, 1]);
        let enc = encode_cifar_binary(&ds).unwrap();
        let keep = [0usize, 1, 2, 4];
        let expect: Vec<u8> = keep.iter().flat_map(|&r| bytes[r * CIFAR_ROW_BYTES..(r + 1) * CIFAR_ROW_BYTES].to_vec()).collect();
        assert_eq!(enc, expect);
    }

    #[test]
    fn cifar_errors() {
        let bytes = fake_rows(&[1, 2]);
        assert!(parse_cifar_binary(&bytes[..100], &CifarOptions::default()).is_err());
        let strict = CifarOptions { expected_rows: Some(CIFAR_ROWS_PER_BATCH), ..Default::default() };
        assert!(parse_cifar_binary(&bytes, &strict).is_err());
        let none = CifarOptions { per_class_limit: Some(0), ..Default::default() };
        assert!(parse_cifar_binary(&bytes, &none).unwrap().is_empty());
        let mut bad = bytes.clone();
        bad[0] = 42;
        assert!(parse_cifar_binary(&bad, &CifarOptions::default()).is_err());
    }
}
