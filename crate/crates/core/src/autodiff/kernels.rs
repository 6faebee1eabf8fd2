//! Raw numeric kernels on flat slices. Shapes are validated by the caller.

/// `out[n,m] = a[n,k] * b[k,m]`
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Geometry of a stride-1, zero-padded, square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.in_h + 2 * self.pad + 1 - self.kernel
    }

    pub fn out_w(&self) -> usize {
        self.in_w + 2 * self.pad + 1 - self.kernel
    }

    pub fn x_len(&self) -> usize {
        self.batch * self.in_ch * self.in_h * self.in_w
    }

    pub fn y_len(&self) -> usize {
        self.batch * self.out_ch * self.out_h() * self.out_w()
    }

    pub fn w_len(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel
    }

    /// Output rows `i` whose input row `i + k - pad` is in range.
    #[inline]
    fn valid(&self, k: usize, out_len: usize, in_len: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(k);
        let hi = (in_len + self.pad).saturating_sub(k).min(out_len);
        (lo, hi.max(lo))
    }
}

/// Visits every (output slice, input slice, weight) triple of the convolution,
/// where the slices are aligned rows of length `j1 - j0`.
#[inline]
fn for_each_tap(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize, usize)) {
    // f(b*O+o plane index offset into y, offset into x, weight index, run length)
    let (oh, ow) = (g.out_h(), g.out_w());
    for b in 0..g.batch {
        for o in 0..g.out_ch {
            let ybase = (b * g.out_ch + o) * oh * ow;
            for c in 0..g.in_ch {
                let xbase = (b * g.in_ch + c) * g.in_h * g.in_w;
                for kh in 0..g.kernel {
                    let (i0, i1) = g.valid(kh, oh, g.in_h);
                    for kw in 0..g.kernel {
                        let (j0, j1) = g.valid(kw, ow, g.in_w);
                        if j1 <= j0 {
                            continue;
                        }
                        let widx = ((o * g.in_ch + c) * g.kernel + kh) * g.kernel + kw;
                        for i in i0..i1 {
                            let ih = i + kh - g.pad;
                            let yoff = ybase + i * ow + j0;
                            let xoff = xbase + ih * g.in_w + j0 + kw - g.pad;
                            f(yoff, xoff, widx, j1 - j0);
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d(x: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut y = vec![0.0; g.y_len()];
    for_each_tap(g, |yo, xo, wi, n| {
        let wv = w[wi];
        if wv == 0.0 {
            return;
        }
        for (yv, xv) in y[yo..yo + n].iter_mut().zip(&x[xo..xo + n]) {
            *yv += wv * xv;
        }
    });
    y
}

/// Adjoint of `conv2d` with respect to its input.
pub fn conv2d_dx(gy: &[f64], w: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut gx = vec![0.0; g.x_len()];
    for_each_tap(g, |yo, xo, wi, n| {
        let wv = w[wi];
        if wv == 0.0 {
            return;
        }
        for (xv, yv) in gx[xo..xo + n].iter_mut().zip(&gy[yo..yo + n]) {
            *xv += wv * yv;
        }
    });
    gx
}

/// Adjoint of `conv2d` with respect to its weight.
pub fn conv2d_dw(x: &[f64], gy: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut gw = vec![0.0; g.w_len()];
    for_each_tap(g, |yo, xo, wi, n| {
        let s: f64 = gy[yo..yo + n].iter().zip(&x[xo..xo + n]).map(|(a, b)| a * b).sum();
        gw[wi] += s;
    });
    gw
}

/// Flat input index of the maximum in each non-overlapping `size x size`
/// window of `planes` stacked `h x w` planes; ties go to the first element in
/// row-major order.
pub fn maxpool_argmax(a: &[f64], planes: usize, h: usize, w: usize, size: usize) -> Vec<usize> {
    let (oh, ow) = (h / size, w / size);
    let mut idx = Vec::with_capacity(planes * oh * ow);
    for plane in 0..planes {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + (i * size) * w + j * size;
                for di in 0..size {
                    for dj in 0..size {
                        let k = base + (i * size + di) * w + j * size + dj;
                        if a[k] > a[best] {
                            best = k;
                        }
                    }
                }
                idx.push(best);
            }
        }
    }
    idx
}

/// Overflow-safe `(1/beta) * ln(1 + exp(beta * v))`.
#[inline]
pub fn softplus(v: f64, beta: f64) -> f64 {
    let z = beta * v;
    (z.max(0.0) + (-z.abs()).exp().ln_1p()) / beta
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Row-wise log-softmax of a `[rows, cols]` block.
pub fn log_softmax(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &a[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    out
}
