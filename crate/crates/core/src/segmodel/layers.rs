//! Dense CHW feature maps and the handful of layers the network needs.
//!
//! 3x3 convolutions are lowered to matrix products over an im2col buffer.

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w);
        Self { c, h, w, data }
    }

    #[inline]
    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.h * self.w;
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Channel concatenation `[self; other]`.
    pub fn concat(&self, other: &Tensor) -> Tensor {
        assert_eq!((self.h, self.w), (other.h, other.w));
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Tensor::from_vec(self.c + other.c, self.h, self.w, data)
    }

    /// Inverse of [`concat`](Self::concat) for gradients.
    pub fn split(self, first_channels: usize) -> (Tensor, Tensor) {
        let n = self.h * self.w;
        let mut data = self.data;
        let rest = data.split_off(first_channels * n);
        (
            Tensor::from_vec(first_channels, self.h, self.w, data),
            Tensor::from_vec(self.c - first_channels, self.h, self.w, rest),
        )
    }
}

/// Row range and column range for which `(y + dy, x + dx)` stays inside.
#[inline]
fn valid_range(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d.max(0)).max(0) as usize;
    (lo, hi.max(lo))
}

/// Unrolls 3x3 zero-padded neighbourhoods into a `[ci*9][h*w]` matrix.
fn im2col(input: &Tensor) -> Vec<f64> {
    let (ci, h, w) = (input.c, input.h, input.w);
    let n = h * w;
    let mut col = vec![0.0; ci * 9 * n];
    for i in 0..ci {
        let src = input.plane(i);
        for ky in 0..3 {
            let dy = ky as isize - 1;
            let (y0, y1) = valid_range(h, dy);
            for kx in 0..3 {
                let dx = kx as isize - 1;
                let (x0, x1) = valid_range(w, dx);
                let sx0 = (x0 as isize + dx) as usize;
                let row = &mut col[((i * 3 + ky) * 3 + kx) * n..][..n];
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    row[y * w + x0..y * w + x1].copy_from_slice(&src[sy * w + sx0..sy * w + sx0 + (x1 - x0)]);
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
fn col2im(col: &[f64], ci: usize, h: usize, w: usize) -> Tensor {
    let n = h * w;
    let mut out = Tensor::zeros(ci, h, w);
    for i in 0..ci {
        let dst = out.plane_mut(i);
        for ky in 0..3 {
            let dy = ky as isize - 1;
            let (y0, y1) = valid_range(h, dy);
            for kx in 0..3 {
                let dx = kx as isize - 1;
                let (x0, x1) = valid_range(w, dx);
                let sx0 = (x0 as isize + dx) as usize;
                let row = &col[((i * 3 + ky) * 3 + kx) * n..][..n];
                for y in y0..y1 {
                    let sy = (y as isize + dy) as usize;
                    let d = &mut dst[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                    for (dv, cv) in d.iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                        *dv += cv;
                    }
                }
            }
        }
    }
    out
}

/// `C (m x n) += A (m x k) * B (k x n)` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], rsa: usize, csa: usize, b: &[f64], rsb: usize, csb: usize, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserts bound every index reachable through the given
    // strides, which describe dense m*k, k*n and m*n matrices.
    unsafe {
        matrixmultiply::dgemm(
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
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// 3x3 convolution, stride 1, zero padding 1. `weight` is `[co][ci][3][3]`.
pub fn conv3x3(input: &Tensor, weight: &[f64], bias: &[f64], co: usize) -> Tensor {
    let (ci, h, w) = (input.c, input.h, input.w);
    debug_assert_eq!(weight.len(), co * ci * 9);
    let n = h * w;
    let k = ci * 9;
    let col = im2col(input);
    let mut out = Tensor::zeros(co, h, w);
    for o in 0..co {
        out.plane_mut(o).fill(bias[o]);
    }
    gemm(co, k, n, weight, k, 1, &col, n, 1, &mut out.data);
    out
}

/// Gradients of [`conv3x3`]. Accumulates into `grad_w` / `grad_b` and
/// returns the input gradient when `need_input` is set.
pub fn conv3x3_backward(
    input: &Tensor,
    weight: &[f64],
    grad_out: &Tensor,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    need_input: bool,
) -> Option<Tensor> {
    let (ci, h, w) = (input.c, input.h, input.w);
    let co = grad_out.c;
    let n = h * w;
    let k = ci * 9;
    for o in 0..co {
        grad_b[o] += grad_out.plane(o).iter().sum::<f64>();
    }
    let col = im2col(input);
    // dW (co x k) += dOut (co x n) * col^T (n x k)
    gemm(co, n, k, &grad_out.data, n, 1, &col, 1, n, grad_w);
    if !need_input {
        return None;
    }
    // dcol (k x n) = W^T (k x co) * dOut (co x n)
    let mut dcol = col;
    dcol.fill(0.0);
    gemm(k, co, n, weight, 1, k, &grad_out.data, n, 1, &mut dcol);
    Some(col2im(&dcol, ci, h, w))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent accumulators let the compiler vectorise.
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in chunks * 4..a.len() {
        s += a[k] * b[k];
    }
    s
}

/// 1x1 convolution; `weight` is `[co][ci]`.
pub fn conv1x1(input: &Tensor, weight: &[f64], bias: &[f64], co: usize) -> Tensor {
    let ci = input.c;
    let mut out = Tensor::zeros(co, input.h, input.w);
    for o in 0..co {
        let dst = out.plane_mut(o);
        dst.fill(bias[o]);
        for i in 0..ci {
            let wv = weight[o * ci + i];
            for (d, s) in dst.iter_mut().zip(input.plane(i)) {
                *d += wv * s;
            }
        }
    }
    out
}

pub fn conv1x1_backward(
    input: &Tensor,
    weight: &[f64],
    grad_out: &Tensor,
    grad_w: &mut [f64],
    grad_b: &mut [f64],
) -> Tensor {
    let ci = input.c;
    let mut grad_in = Tensor::zeros(ci, input.h, input.w);
    for o in 0..grad_out.c {
        let g = grad_out.plane(o);
        grad_b[o] += g.iter().sum::<f64>();
        for i in 0..ci {
            grad_w[o * ci + i] += dot(input.plane(i), g);
            let wv = weight[o * ci + i];
            for (d, gv) in grad_in.plane_mut(i).iter_mut().zip(g) {
                *d += wv * gv;
            }
        }
    }
    grad_in
}

pub fn relu_inplace(t: &mut Tensor) {
    for v in &mut t.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Zeroes gradient entries where the post-activation output is not positive.
pub fn relu_backward_inplace(grad: &mut Tensor, output: &Tensor) {
    for (g, &o) in grad.data.iter_mut().zip(&output.data) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 2x2 max pooling; returns the pooled map and the flat argmax per output.
pub fn maxpool2(input: &Tensor) -> (Tensor, Vec<u32>) {
    let (c, h, w) = (input.c, input.h, input.w);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(c, oh, ow);
    let mut arg = vec![0u32; c * oh * ow];
    for ch in 0..c {
        let src = input.plane(ch);
        for y in 0..oh {
            for x in 0..ow {
                let mut best = 2 * y * w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let p = (2 * y + dy) * w + 2 * x + dx;
                    if src[p] > src[best] {
                        best = p;
                    }
                }
                let o = (ch * oh + y) * ow + x;
                out.data[o] = src[best];
                arg[o] = (ch * h * w + best) as u32;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(grad_out: &Tensor, argmax: &[u32], c: usize, h: usize, w: usize) -> Tensor {
    let mut grad_in = Tensor::zeros(c, h, w);
    for (g, &a) in grad_out.data.iter().zip(argmax) {
        grad_in.data[a as usize] += g;
    }
    grad_in
}

pub fn upsample2(input: &Tensor) -> Tensor {
    let (c, h, w) = (input.c, input.h, input.w);
    let mut out = Tensor::zeros(c, 2 * h, 2 * w);
    for ch in 0..c {
        let src = input.plane(ch);
        let dst = out.plane_mut(ch);
        for y in 0..2 * h {
            for x in 0..2 * w {
                dst[y * 2 * w + x] = src[(y / 2) * w + x / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(grad_out: &Tensor) -> Tensor {
    let (c, h, w) = (grad_out.c, grad_out.h / 2, grad_out.w / 2);
    let mut grad_in = Tensor::zeros(c, h, w);
    for ch in 0..c {
        let src = grad_out.plane(ch);
        let dst = grad_in.plane_mut(ch);
        for y in 0..2 * h {
            for x in 0..2 * w {
                dst[(y / 2) * w + x / 2] += src[y * 2 * w + x];
            }
        }
    }
    grad_in
}
