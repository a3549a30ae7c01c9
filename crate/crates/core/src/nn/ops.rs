//! Tensor kernels: forward passes and input gradients.

use rayon::prelude::*;

use super::spec::{Activation, Padding};
use crate::error::{Error, Result};

/// Dense feature map in HWC layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self {
            h,
            w,
            c,
            data: vec![0.0; h * w * c],
        }
    }

    pub fn new(h: usize, w: usize, c: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(Error::Shape {
                expected: format!("{h}x{w}x{c}"),
                actual: format!("{} values", data.len()),
            });
        }
        Ok(Self { h, w, c, data })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn spatial(&self) -> usize {
        self.h * self.w
    }
}

/// Sliding-window geometry shared by convolutions and pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub dh: usize,
    pub dw: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn new(
        in_h: usize,
        in_w: usize,
        kernel: [usize; 2],
        strides: [usize; 2],
        dilation: [usize; 2],
        padding: Padding,
    ) -> Result<Self> {
        let axis = |n: usize, k: usize, s: usize, d: usize| -> Result<(usize, usize)> {
            if k == 0 || s == 0 || d == 0 {
                return Err(Error::Graph("zero kernel, stride or dilation".into()));
            }
            let eff = (k - 1) * d + 1;
            match padding {
                Padding::Same => {
                    let out = n.div_ceil(s);
                    let total = ((out - 1) * s + eff).saturating_sub(n);
                    Ok((out, total / 2))
                }
                Padding::Valid => {
                    if n < eff {
                        return Err(Error::Graph(format!("input extent {n} smaller than window {eff}")));
                    }
                    Ok(((n - eff) / s + 1, 0))
                }
            }
        };
        let (out_h, pad_top) = axis(in_h, kernel[0], strides[0], dilation[0])?;
        let (out_w, pad_left) = axis(in_w, kernel[1], strides[1], dilation[1])?;
        Ok(Self {
            kh: kernel[0],
            kw: kernel[1],
            sh: strides[0],
            sw: strides[1],
            dh: dilation[0],
            dw: dilation[1],
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    /// Input coordinate of kernel tap `k` for output position `o`.
    #[inline]
    fn tap(o: usize, k: usize, s: usize, d: usize, pad: usize, n: usize) -> Option<usize> {
        let i = (o * s + k * d) as isize - pad as isize;
        (i >= 0 && (i as usize) < n).then_some(i as usize)
    }

    #[inline]
    fn row(&self, oy: usize, ky: usize, h: usize) -> Option<usize> {
        Self::tap(oy, ky, self.sh, self.dh, self.pad_top, h)
    }

    #[inline]
    fn col(&self, ox: usize, kx: usize, w: usize) -> Option<usize> {
        Self::tap(ox, kx, self.sw, self.dw, self.pad_left, w)
    }
}

/// Row-major `C = A * B` with `A: m x k`, `B: k x n`.
fn gemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths checked above; strides describe dense row-major
    // storage of exactly those extents.
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, 0.0, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// Row-major `C = A * B^T` with `A: m x k` and `B` stored as `n x k`.
fn gemm_bt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: as in `gemm`; B^T is addressed through swapped strides.
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), 1, k as isize, 0.0, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `C = A * B` (or `C += A * B`) for arbitrary element strides, given as
/// `(row_stride, col_stride)` pairs.
#[allow(clippy::too_many_arguments)]
pub fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    c: &mut [f32],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols.max(1) - 1) * cs;
    assert!(c.len() > last(m, n, n, 1), "gemm output too small");
    if k > 0 {
        assert!(a.len() > last(m, k, rsa, csa) && b.len() > last(k, n, rsb, csb), "gemm operand too small");
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: every addressed element was bounds-checked above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const COL_BUDGET: usize = 1 << 21;

fn rows_per_chunk(out_h: usize, row_cost: usize) -> usize {
    let by_memory = (COL_BUDGET / row_cost.max(1)).max(1);
    let by_parallelism = out_h.div_ceil(2 * rayon::current_num_threads()).max(1);
    by_memory.min(by_parallelism).min(out_h).max(1)
}

/// Standard convolution. `kernel` is `[kh, kw, cin, cout]`.
pub fn conv2d(x: &Tensor, kernel: &[f32], bias: Option<&[f32]>, win: &Window, cout: usize) -> Tensor {
    let cin = x.c;
    let kdim = win.kh * win.kw * cin;
    let mut out = Tensor::zeros(win.out_h, win.out_w, cout);
    let pointwise = win.kh == 1 && win.kw == 1 && win.sh == 1 && win.sw == 1 && win.pad_top == 0 && win.pad_left == 0;
    if pointwise && win.out_h == x.h && win.out_w == x.w {
        let rows = rows_per_chunk(x.h, x.w * cin);
        out.data
            .par_chunks_mut(rows * x.w * cout)
            .zip(x.data.par_chunks(rows * x.w * cin))
            .for_each(|(o, i)| gemm(i.len() / cin, cin, cout, i, kernel, o));
    } else {
        let rows = rows_per_chunk(win.out_h, win.out_w * kdim);
        out.data
            .par_chunks_mut(rows * win.out_w * cout)
            .enumerate()
            .for_each(|(chunk, o)| {
                let oy0 = chunk * rows;
                let n_rows = o.len() / (win.out_w * cout);
                let mut col = vec![0.0f32; n_rows * win.out_w * kdim];
                for r in 0..n_rows {
                    let oy = oy0 + r;
                    for ox in 0..win.out_w {
                        let dst = &mut col[(r * win.out_w + ox) * kdim..][..kdim];
                        for ky in 0..win.kh {
                            let Some(iy) = win.row(oy, ky, x.h) else { continue };
                            for kx in 0..win.kw {
                                let Some(ix) = win.col(ox, kx, x.w) else { continue };
                                let src = &x.data[(iy * x.w + ix) * cin..][..cin];
                                dst[(ky * win.kw + kx) * cin..][..cin].copy_from_slice(src);
                            }
                        }
                    }
                }
                gemm(n_rows * win.out_w, kdim, cout, &col, kernel, o);
            });
    }
    if let Some(b) = bias {
        add_bias(&mut out.data, b);
    }
    out
}

fn add_bias(data: &mut [f32], bias: &[f32]) {
    for px in data.chunks_exact_mut(bias.len()) {
        for (v, b) in px.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Gradient of `conv2d` with respect to its input.
pub fn conv2d_backward(grad: &Tensor, kernel: &[f32], win: &Window, in_shape: (usize, usize, usize)) -> Tensor {
    let (h, w, cin) = in_shape;
    let cout = grad.c;
    let kdim = win.kh * win.kw * cin;
    let mut dx = Tensor::zeros(h, w, cin);
    let rows = rows_per_chunk(win.out_h, win.out_w * kdim).max(1);
    let mut col = Vec::new();
    for oy0 in (0..win.out_h).step_by(rows) {
        let n_rows = rows.min(win.out_h - oy0);
        let m = n_rows * win.out_w;
        col.clear();
        col.resize(m * kdim, 0.0);
        // kernel is (kdim x cout); we need grad (m x cout) * kernel^T
        gemm_bt(m, cout, kdim, &grad.data[oy0 * win.out_w * cout..][..m * cout], kernel, &mut col);
        for r in 0..n_rows {
            let oy = oy0 + r;
            for ox in 0..win.out_w {
                let src = &col[(r * win.out_w + ox) * kdim..][..kdim];
                for ky in 0..win.kh {
                    let Some(iy) = win.row(oy, ky, h) else { continue };
                    for kx in 0..win.kw {
                        let Some(ix) = win.col(ox, kx, w) else { continue };
                        let dst = &mut dx.data[(iy * w + ix) * cin..][..cin];
                        for (d, s) in dst.iter_mut().zip(&src[(ky * win.kw + kx) * cin..][..cin]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Depthwise convolution. `kernel` is `[kh, kw, cin, multiplier]`; output
/// channel `ci * multiplier + m`.
pub fn depthwise_conv2d(x: &Tensor, kernel: &[f32], bias: Option<&[f32]>, win: &Window, multiplier: usize) -> Tensor {
    let cin = x.c;
    let cout = cin * multiplier;
    let mut out = Tensor::zeros(win.out_h, win.out_w, cout);
    out.data.par_chunks_mut(win.out_w * cout).enumerate().for_each(|(oy, row)| {
        for ox in 0..win.out_w {
            let acc = &mut row[ox * cout..][..cout];
            for ky in 0..win.kh {
                let Some(iy) = win.row(oy, ky, x.h) else { continue };
                for kx in 0..win.kw {
                    let Some(ix) = win.col(ox, kx, x.w) else { continue };
                    let xin = &x.data[(iy * x.w + ix) * cin..][..cin];
                    let kk = &kernel[(ky * win.kw + kx) * cout..][..cout];
                    if multiplier == 1 {
                        for ((a, &xv), &kv) in acc.iter_mut().zip(xin).zip(kk) {
                            *a += xv * kv;
                        }
                    } else {
                        for (ci, &xv) in xin.iter().enumerate() {
                            for m in 0..multiplier {
                                acc[ci * multiplier + m] += xv * kk[ci * multiplier + m];
                            }
                        }
                    }
                }
            }
        }
    });
    if let Some(b) = bias {
        add_bias(&mut out.data, b);
    }
    out
}

pub fn depthwise_conv2d_backward(
    grad: &Tensor,
    kernel: &[f32],
    win: &Window,
    in_shape: (usize, usize, usize),
    multiplier: usize,
) -> Tensor {
    let (h, w, cin) = in_shape;
    let cout = cin * multiplier;
    let mut dx = Tensor::zeros(h, w, cin);
    for oy in 0..win.out_h {
        for ox in 0..win.out_w {
            let g = &grad.data[(oy * win.out_w + ox) * cout..][..cout];
            for ky in 0..win.kh {
                let Some(iy) = win.row(oy, ky, h) else { continue };
                for kx in 0..win.kw {
                    let Some(ix) = win.col(ox, kx, w) else { continue };
                    let kk = &kernel[(ky * win.kw + kx) * cout..][..cout];
                    let d = &mut dx.data[(iy * w + ix) * cin..][..cin];
                    for ci in 0..cin {
                        let mut s = 0.0;
                        for m in 0..multiplier {
                            s += g[ci * multiplier + m] * kk[ci * multiplier + m];
                        }
                        d[ci] += s;
                    }
                }
            }
        }
    }
    dx
}

pub fn max_pool(x: &Tensor, win: &Window) -> Tensor {
    let c = x.c;
    let mut out = Tensor::zeros(win.out_h, win.out_w, c);
    out.data.par_chunks_mut(win.out_w * c).enumerate().for_each(|(oy, row)| {
        for ox in 0..win.out_w {
            let acc = &mut row[ox * c..][..c];
            acc.fill(f32::NEG_INFINITY);
            for ky in 0..win.kh {
                let Some(iy) = win.row(oy, ky, x.h) else { continue };
                for kx in 0..win.kw {
                    let Some(ix) = win.col(ox, kx, x.w) else { continue };
                    for (a, &v) in acc.iter_mut().zip(&x.data[(iy * x.w + ix) * c..][..c]) {
                        if v > *a {
                            *a = v;
                        }
                    }
                }
            }
        }
    });
    out
}

/// Routes each output gradient to the first maximal input of its window.
pub fn max_pool_backward(grad: &Tensor, x: &Tensor, win: &Window) -> Tensor {
    let c = x.c;
    let mut dx = Tensor::zeros(x.h, x.w, c);
    for oy in 0..win.out_h {
        for ox in 0..win.out_w {
            for ch in 0..c {
                let mut best = f32::NEG_INFINITY;
                let mut at = None;
                for ky in 0..win.kh {
                    let Some(iy) = win.row(oy, ky, x.h) else { continue };
                    for kx in 0..win.kw {
                        let Some(ix) = win.col(ox, kx, x.w) else { continue };
                        let v = x.data[(iy * x.w + ix) * c + ch];
                        if v > best {
                            best = v;
                            at = Some((iy * x.w + ix) * c + ch);
                        }
                    }
                }
                if let Some(i) = at {
                    dx.data[i] += grad.data[(oy * win.out_w + ox) * c + ch];
                }
            }
        }
    }
    dx
}

fn window_count(win: &Window, oy: usize, ox: usize, h: usize, w: usize) -> usize {
    let rows = (0..win.kh).filter(|&ky| win.row(oy, ky, h).is_some()).count();
    let cols = (0..win.kw).filter(|&kx| win.col(ox, kx, w).is_some()).count();
    rows * cols
}

/// Average pooling; padded positions are excluded from the count.
pub fn avg_pool(x: &Tensor, win: &Window) -> Tensor {
    let c = x.c;
    let mut out = Tensor::zeros(win.out_h, win.out_w, c);
    out.data.par_chunks_mut(win.out_w * c).enumerate().for_each(|(oy, row)| {
        for ox in 0..win.out_w {
            let acc = &mut row[ox * c..][..c];
            for ky in 0..win.kh {
                let Some(iy) = win.row(oy, ky, x.h) else { continue };
                for kx in 0..win.kw {
                    let Some(ix) = win.col(ox, kx, x.w) else { continue };
                    for (a, &v) in acc.iter_mut().zip(&x.data[(iy * x.w + ix) * c..][..c]) {
                        *a += v;
                    }
                }
            }
            let n = window_count(win, oy, ox, x.h, x.w) as f32;
            acc.iter_mut().for_each(|a| *a /= n);
        }
    });
    out
}

pub fn avg_pool_backward(grad: &Tensor, in_shape: (usize, usize, usize), win: &Window) -> Tensor {
    let (h, w, c) = in_shape;
    let mut dx = Tensor::zeros(h, w, c);
    for oy in 0..win.out_h {
        for ox in 0..win.out_w {
            let n = window_count(win, oy, ox, h, w) as f32;
            let g = &grad.data[(oy * win.out_w + ox) * c..][..c];
            for ky in 0..win.kh {
                let Some(iy) = win.row(oy, ky, h) else { continue };
                for kx in 0..win.kw {
                    let Some(ix) = win.col(ox, kx, w) else { continue };
                    for (d, &gv) in dx.data[(iy * w + ix) * c..][..c].iter_mut().zip(g) {
                        *d += gv / n;
                    }
                }
            }
        }
    }
    dx
}

pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let mut sums = vec![0.0f64; x.c];
    for px in x.data.chunks_exact(x.c) {
        for (s, &v) in sums.iter_mut().zip(px) {
            *s += f64::from(v);
        }
    }
    let n = x.spatial() as f64;
    Tensor {
        h: 1,
        w: 1,
        c: x.c,
        data: sums.into_iter().map(|s| (s / n) as f32).collect(),
    }
}

pub fn global_avg_pool_backward(grad: &Tensor, in_shape: (usize, usize, usize)) -> Tensor {
    let (h, w, c) = in_shape;
    let n = (h * w) as f32;
    let mut dx = Tensor::zeros(h, w, c);
    for px in dx.data.chunks_exact_mut(c) {
        for (d, &g) in px.iter_mut().zip(&grad.data) {
            *d = g / n;
        }
    }
    dx
}

#[inline]
fn hard_sigmoid(x: f32) -> f32 {
    (x + 3.0).clamp(0.0, 6.0) / 6.0
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn activation(kind: Activation, x: f32) -> f32 {
    match kind {
        Activation::Linear => x,
        Activation::Relu => x.max(0.0),
        Activation::HardSigmoid => hard_sigmoid(x),
        Activation::HardSwish => x * hard_sigmoid(x),
        Activation::Sigmoid => sigmoid(x),
        Activation::Swish => x * sigmoid(x),
        Activation::Tanh => x.tanh(),
    }
}

/// Derivative of `activation(kind, x)` with respect to `x`.
pub fn activation_grad(kind: Activation, x: f32) -> f32 {
    let hs_slope = if x > -3.0 && x < 3.0 { 1.0 / 6.0 } else { 0.0 };
    match kind {
        Activation::Linear => 1.0,
        Activation::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::HardSigmoid => hs_slope,
        Activation::HardSwish => hard_sigmoid(x) + x * hs_slope,
        Activation::Sigmoid => {
            let s = sigmoid(x);
            s * (1.0 - s)
        }
        Activation::Swish => {
            let s = sigmoid(x);
            s + x * s * (1.0 - s)
        }
        Activation::Tanh => {
            let t = x.tanh();
            1.0 - t * t
        }
    }
}

pub fn relu_general(x: f32, max_value: Option<f32>, negative_slope: f32, threshold: f32) -> f32 {
    if let Some(m) = max_value {
        if x >= m {
            return m;
        }
    }
    if x >= threshold {
        x
    } else {
        negative_slope * (x - threshold)
    }
}

pub fn relu_general_grad(x: f32, max_value: Option<f32>, negative_slope: f32, threshold: f32) -> f32 {
    if let Some(m) = max_value {
        if x >= m {
            return 0.0;
        }
    }
    if x > threshold {
        1.0
    } else if x < threshold {
        negative_slope
    } else if threshold == 0.0 && negative_slope == 0.0 {
        0.0
    } else {
        1.0
    }
}

/// Output shape of an elementwise op whose operands are either full maps or
/// `1 x 1` channel vectors.
pub fn broadcast_shape(shapes: &[(usize, usize, usize)]) -> Result<(usize, usize, usize)> {
    let c = shapes[0].2;
    let mut hw = (1, 1);
    for &(h, w, cc) in shapes {
        if cc != c {
            return Err(Error::Graph(format!("channel mismatch {cc} vs {c}")));
        }
        if (h, w) != (1, 1) {
            if hw != (1, 1) && hw != (h, w) {
                return Err(Error::Graph(format!("spatial mismatch {h}x{w} vs {}x{}", hw.0, hw.1)));
            }
            hw = (h, w);
        }
    }
    Ok((hw.0, hw.1, c))
}

#[inline]
pub fn bcast_get(t: &Tensor, i: usize) -> f32 {
    if t.h * t.w == 1 {
        t.data[i % t.c]
    } else {
        t.data[i]
    }
}

/// Reduce a full-size gradient onto an operand's (possibly broadcast) shape.
pub fn reduce_to(grad: Vec<f32>, shape: (usize, usize, usize), full: (usize, usize, usize)) -> Tensor {
    if shape == full {
        return Tensor {
            h: shape.0,
            w: shape.1,
            c: shape.2,
            data: grad,
        };
    }
    let mut out = vec![0.0f32; shape.2];
    for px in grad.chunks_exact(shape.2) {
        for (o, g) in out.iter_mut().zip(px) {
            *o += g;
        }
    }
    Tensor {
        h: 1,
        w: 1,
        c: shape.2,
        data: out,
    }
}
