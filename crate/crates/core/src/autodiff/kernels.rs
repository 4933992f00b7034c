//! Forward and backward kernels on raw row-major buffers.
//!
//! Convolutions lower to a single batch-wide im2col matrix multiplied with
//! `matrixmultiply::sgemm`. Reductions accumulate in `f64`.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn ckk(&self) -> usize {
        self.c * self.k * self.k
    }

    /// Columns of the im2col matrix: one per output position across the batch.
    pub fn cols(&self) -> usize {
        self.n * self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// `c[m×n] = alpha · a[m×k] · b[k×n] + beta · c`, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (isize, isize),
    b: &[f32],
    (rsb, csb): (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // SAFETY: every index touched by sgemm is bounded by the strides and
    // extents above, which callers derive from the slice lengths.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let cols = g.cols();
    let ohw = g.oh * g.ow;
    let mut col = vec![0.0f32; g.ckk() * cols];
    if g.is_pointwise() {
        for n in 0..g.n {
            for c in 0..g.c {
                let src = &x[(n * g.c + c) * ohw..][..ohw];
                col[c * cols + n * ohw..][..ohw].copy_from_slice(src);
            }
        }
        return col;
    }
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst_row = &mut col[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let plane = &x[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * g.w..][..g.w];
                        let dst = &mut dst_row[n * ohw + oy * g.ow..][..g.ow];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

pub fn col2im(col: &[f32], g: &ConvGeom) -> Vec<f32> {
    let cols = g.cols();
    let ohw = g.oh * g.ow;
    let mut x = vec![0.0f32; g.n * g.c * g.h * g.w];
    if g.is_pointwise() {
        for n in 0..g.n {
            for c in 0..g.c {
                x[(n * g.c + c) * ohw..][..ohw].copy_from_slice(&col[c * cols + n * ohw..][..ohw]);
            }
        }
        return x;
    }
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src_row = &col[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let plane = &mut x[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut plane[iy as usize * g.w..][..g.w];
                        let src = &src_row[n * ohw + oy * g.ow..][..g.ow];
                        for (ox, s) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[ix as usize] += *s;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// NCHW output of a convolution.
pub fn conv2d_forward(x: &[f32], weight: &[f32], bias: Option<&[f32]>, g: &ConvGeom) -> Vec<f32> {
    let col = im2col(x, g);
    let cols = g.cols();
    let ckk = g.ckk();
    let mut ym = vec![0.0f32; g.o * cols];
    gemm(g.o, ckk, cols, weight, (ckk as isize, 1), &col, (cols as isize, 1), 0.0, &mut ym);
    let ohw = g.oh * g.ow;
    let mut out = vec![0.0f32; g.n * g.o * ohw];
    for o in 0..g.o {
        let b = bias.map_or(0.0, |b| b[o]);
        for n in 0..g.n {
            let src = &ym[o * cols + n * ohw..][..ohw];
            let dst = &mut out[(n * g.o + o) * ohw..][..ohw];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = *s + b;
            }
        }
    }
    out
}

pub struct ConvGrads {
    pub input: Option<Vec<f32>>,
    pub weight: Option<Vec<f32>>,
    pub bias: Option<Vec<f32>>,
}

pub fn conv2d_backward(
    x: &[f32],
    weight: &[f32],
    dy: &[f32],
    g: &ConvGeom,
    need: (bool, bool, bool),
) -> ConvGrads {
    let (need_x, need_w, need_b) = need;
    let cols = g.cols();
    let ckk = g.ckk();
    let ohw = g.oh * g.ow;
    // dY as an [O, N·OH·OW] matrix.
    let mut dym = vec![0.0f32; g.o * cols];
    for o in 0..g.o {
        for n in 0..g.n {
            dym[o * cols + n * ohw..][..ohw].copy_from_slice(&dy[(n * g.o + o) * ohw..][..ohw]);
        }
    }
    let bias = need_b.then(|| {
        (0..g.o)
            .map(|o| dym[o * cols..(o + 1) * cols].iter().map(|&v| v as f64).sum::<f64>() as f32)
            .collect()
    });
    let weight_grad = need_w.then(|| {
        let col = im2col(x, g);
        let mut dw = vec![0.0f32; g.o * ckk];
        // dW = dY · colᵀ
        gemm(g.o, cols, ckk, &dym, (cols as isize, 1), &col, (1, cols as isize), 0.0, &mut dw);
        dw
    });
    let input = need_x.then(|| {
        let mut dcol = vec![0.0f32; ckk * cols];
        // dcol = Wᵀ · dY
        gemm(ckk, g.o, cols, weight, (1, ckk as isize), &dym, (cols as isize, 1), 0.0, &mut dcol);
        col2im(&dcol, g)
    });
    ConvGrads {
        input,
        weight: weight_grad,
        bias,
    }
}

/// `y[n×m] = x[n×k] · wᵀ + b`, with `w` stored `[m×k]`.
pub fn linear_forward(x: &[f32], w: &[f32], b: Option<&[f32]>, n: usize, k: usize, m: usize) -> Vec<f32> {
    let mut y = vec![0.0f32; n * m];
    if let Some(b) = b {
        for row in y.chunks_mut(m) {
            row.copy_from_slice(b);
        }
    }
    gemm(n, k, m, x, (k as isize, 1), w, (1, k as isize), if b.is_some() { 1.0 } else { 0.0 }, &mut y);
    y
}

/// Returns `(dx, dw, db)`.
pub fn linear_backward(
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    n: usize,
    k: usize,
    m: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut dx = vec![0.0f32; n * k];
    gemm(n, m, k, dy, (m as isize, 1), w, (k as isize, 1), 0.0, &mut dx);
    let mut dw = vec![0.0f32; m * k];
    gemm(m, n, k, dy, (1, m as isize), x, (k as isize, 1), 0.0, &mut dw);
    let db = (0..m)
        .map(|j| (0..n).map(|i| dy[i * m + j] as f64).sum::<f64>() as f32)
        .collect();
    (dx, dw, db)
}

/// Per-channel statistics of an NCHW buffer: `(mean, biased variance)` in f64.
pub fn channel_moments(x: &[f32], n: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (n * hw) as f64;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for ch in 0..c {
        let mut s = 0.0f64;
        for b in 0..n {
            s += x[(b * c + ch) * hw..][..hw].iter().map(|&v| v as f64).sum::<f64>();
        }
        let m = s / count;
        let mut q = 0.0f64;
        for b in 0..n {
            q += x[(b * c + ch) * hw..][..hw]
                .iter()
                .map(|&v| {
                    let d = v as f64 - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = q / count;
    }
    (mean, var)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
