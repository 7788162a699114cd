//! Layer primitives with explicit backward passes.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Real;
use crate::tensor::Tensor;

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    // Eight independent partial sums let the compiler vectorise the reduction.
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (x, y) = (&a[i * 8..i * 8 + 8], &b[i * 8..i * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != T::zero() {
                axpy(aip, &b[p * n..(p + 1) * n], row);
            }
        }
    }
}

/// `c[m×k] += a[m×n] · b[k×n]ᵀ`
pub fn matmul_bt_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let ai = &a[i * n..(i + 1) * n];
        for j in 0..k {
            c[i * k + j] += dot(ai, &b[j * n..(j + 1) * n]);
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn matmul_at_acc<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let bi = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != T::zero() {
                axpy(aip, bi, &mut c[p * n..(p + 1) * n]);
            }
        }
    }
}

/// 2-D convolution with square kernels, zero padding and a bias, lowered to GEMM via im2col.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `out × in × k × k`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Conv2d<T> {
    /// He-normal weights, zero bias.
    pub fn new<R: Rng>(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, gain: f64, rng: &mut R) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let std = gain * libm::sqrt(2.0 / fan_in);
        let weight = (0..out_channels * in_channels * kernel * kernel)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(std * z)
            })
            .collect();
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
            weight,
            bias: vec![T::zero(); out_channels],
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn im2col(&self, img: &[T], h: usize, w: usize, col: &mut [T]) {
        let (ho, wo) = self.output_size(h, w);
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        for ci in 0..self.in_channels {
            let plane = &img[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let out = &mut col[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * s) as isize + ky as isize - p;
                        let dst = &mut out[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s) as isize + kx as isize - p;
                            *d = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[T], h: usize, w: usize, img: &mut [T]) {
        let (ho, wo) = self.output_size(h, w);
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        for ci in 0..self.in_channels {
            let plane = &mut img[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &col[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * s) as isize + ky as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * s) as isize + kx as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Returns the output and the im2col buffers needed by [`Conv2d::backward`].
    pub fn forward(&self, input: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
        assert_eq!(input.c, self.in_channels, "conv input channel mismatch");
        let (ho, wo) = self.output_size(input.h, input.w);
        let hw = ho * wo;
        let rows = self.col_rows();
        let mut cols = vec![T::zero(); input.n * rows * hw];
        let mut out = Tensor::zeros(input.n, self.out_channels, ho, wo);
        for n in 0..input.n {
            let col = &mut cols[n * rows * hw..(n + 1) * rows * hw];
            self.im2col(input.image(n), input.h, input.w, col);
            let dst = out.image_mut(n);
            for (co, plane) in dst.chunks_mut(hw).enumerate() {
                plane.fill(self.bias[co]);
            }
            matmul_acc(&self.weight, col, dst, self.out_channels, rows, hw);
        }
        (out, cols)
    }

    /// Accumulates parameter gradients and, when requested, returns the input gradient.
    pub fn backward(
        &self,
        cols: &[T],
        input_hw: (usize, usize),
        dout: &Tensor<T>,
        dweight: &mut [T],
        dbias: &mut [T],
        need_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let (h, w) = input_hw;
        let hw = dout.h * dout.w;
        let rows = self.col_rows();
        let mut dinput = need_input_grad.then(|| Tensor::zeros(dout.n, self.in_channels, h, w));
        let mut dcol = vec![T::zero(); if need_input_grad { rows * hw } else { 0 }];
        for n in 0..dout.n {
            let g = dout.image(n);
            let col = &cols[n * rows * hw..(n + 1) * rows * hw];
            matmul_bt_acc(g, col, dweight, self.out_channels, rows, hw);
            for (co, plane) in g.chunks(hw).enumerate() {
                dbias[co] += plane.iter().copied().sum::<T>();
            }
            if let Some(dinput) = dinput.as_mut() {
                dcol.fill(T::zero());
                matmul_at_acc(&self.weight, g, &mut dcol, self.out_channels, rows, hw);
                self.col2im(&dcol, h, w, dinput.image_mut(n));
            }
        }
        dinput
    }
}

pub fn relu_inplace<T: Real>(t: &mut Tensor<T>) {
    for v in &mut t.data {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes gradient entries where the (post-activation) output was not positive.
pub fn relu_backward_inplace<T: Real>(output: &Tensor<T>, grad: &mut Tensor<T>) {
    for (g, &o) in grad.data.iter_mut().zip(&output.data) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Tap<T> {
    lo: usize,
    hi: usize,
    w_lo: T,
    w_hi: T,
}

fn taps<T: Real>(src: usize, dst: usize) -> Vec<Tap<T>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (libm::floor(pos) as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let frac = pos - lo as f64;
            Tap { lo, hi, w_lo: T::of(1.0 - frac), w_hi: T::of(frac) }
        })
        .collect()
}

/// Bilinear resize with half-pixel centres (`align_corners = false`).
#[derive(Clone, Debug)]
pub struct Bilinear<T> {
    src: (usize, usize),
    dst: (usize, usize),
    ys: Vec<Tap<T>>,
    xs: Vec<Tap<T>>,
}

impl<T: Real> Bilinear<T> {
    pub fn new(src: (usize, usize), dst: (usize, usize)) -> Self {
        Self { src, dst, ys: taps(src.0, dst.0), xs: taps(src.1, dst.1) }
    }

    pub fn forward(&self, input: &Tensor<T>) -> Tensor<T> {
        assert_eq!((input.h, input.w), self.src);
        let (h, w) = self.dst;
        let mut out = Tensor::zeros(input.n, input.c, h, w);
        let mut row = vec![T::zero(); input.w];
        for n in 0..input.n {
            for c in 0..input.c {
                let src = input.plane(n, c);
                let dst = out.plane_mut(n, c);
                for (y, ty) in self.ys.iter().enumerate() {
                    let (r0, r1) = (&src[ty.lo * input.w..][..input.w], &src[ty.hi * input.w..][..input.w]);
                    for (r, (&a, &b)) in row.iter_mut().zip(r0.iter().zip(r1)) {
                        *r = ty.w_lo * a + ty.w_hi * b;
                    }
                    let out_row = &mut dst[y * w..(y + 1) * w];
                    for (o, tx) in out_row.iter_mut().zip(&self.xs) {
                        *o = tx.w_lo * row[tx.lo] + tx.w_hi * row[tx.hi];
                    }
                }
            }
        }
        out
    }

    pub fn backward(&self, grad: &Tensor<T>) -> Tensor<T> {
        assert_eq!((grad.h, grad.w), self.dst);
        let (h, w) = self.src;
        let mut out = Tensor::zeros(grad.n, grad.c, h, w);
        let mut row = vec![T::zero(); w];
        for n in 0..grad.n {
            for c in 0..grad.c {
                let g = grad.plane(n, c);
                let dst = out.plane_mut(n, c);
                for (y, ty) in self.ys.iter().enumerate() {
                    row.fill(T::zero());
                    for (x, tx) in self.xs.iter().enumerate() {
                        let v = g[y * self.dst.1 + x];
                        row[tx.lo] += tx.w_lo * v;
                        row[tx.hi] += tx.w_hi * v;
                    }
                    axpy(ty.w_lo, &row, &mut dst[ty.lo * w..(ty.lo + 1) * w]);
                    axpy(ty.w_hi, &row, &mut dst[ty.hi * w..(ty.hi + 1) * w]);
                }
            }
        }
        out
    }
}

/// Channel-wise softmax at every spatial position, stabilised by the per-pixel max.
pub fn softmax_channels<T: Real>(logits: &Tensor<T>) -> Tensor<T> {
    let mut out = logits.clone();
    let hw = logits.plane_len();
    let c = logits.c;
    for n in 0..logits.n {
        let img = out.image_mut(n);
        for i in 0..hw {
            let mut max = T::neg_infinity();
            for k in 0..c {
                max = max.max(img[k * hw + i]);
            }
            let mut sum = T::zero();
            for k in 0..c {
                let e = (img[k * hw + i] - max).exp();
                img[k * hw + i] = e;
                sum += e;
            }
            for k in 0..c {
                img[k * hw + i] /= sum;
            }
        }
    }
    out
}

/// Gradient with respect to logits given the gradient with respect to softmax outputs.
pub fn softmax_backward<T: Real>(probs: &Tensor<T>, dprobs: &Tensor<T>) -> Tensor<T> {
    assert_eq!(probs.shape(), dprobs.shape());
    let hw = probs.plane_len();
    let c = probs.c;
    let mut out = Tensor::zeros(probs.n, c, probs.h, probs.w);
    for n in 0..probs.n {
        let (p, g) = (probs.image(n), dprobs.image(n));
        let o = out.image_mut(n);
        for i in 0..hw {
            let mut inner = T::zero();
            for k in 0..c {
                inner += p[k * hw + i] * g[k * hw + i];
            }
            for k in 0..c {
                o[k * hw + i] = p[k * hw + i] * (g[k * hw + i] - inner);
            }
        }
    }
    out
}

/// Nearest-neighbour resampling of label maps, `src = floor(dst · in / out)`.
pub fn resize_labels_nearest(labels: &[u8], n: usize, src: (usize, usize), dst: (usize, usize)) -> Vec<u8> {
    let (h, w) = src;
    let (ho, wo) = dst;
    let mut out = Vec::with_capacity(n * ho * wo);
    for i in 0..n {
        let map = &labels[i * h * w..(i + 1) * h * w];
        for y in 0..ho {
            let sy = y * h / ho;
            for x in 0..wo {
                out.push(map[sy * w + x * w / wo]);
            }
        }
    }
    out
}

/// Block downsampling of label maps: an output cell takes the label shared by
/// every pixel of its input block and [`IGNORE`](crate::datagen::IGNORE) otherwise.
pub fn downsample_labels_pure(labels: &[u8], n: usize, src: (usize, usize), dst: (usize, usize)) -> Vec<u8> {
    let (h, w) = src;
    let (ho, wo) = dst;
    let mut out = Vec::with_capacity(n * ho * wo);
    for i in 0..n {
        let map = &labels[i * h * w..(i + 1) * h * w];
        for y in 0..ho {
            let rows = y * h / ho..((y + 1) * h / ho).max(y * h / ho + 1);
            for x in 0..wo {
                let cols = x * w / wo..((x + 1) * w / wo).max(x * w / wo + 1);
                let first = map[rows.start * w + cols.start];
                let pure = rows.clone().all(|r| map[r * w + cols.start..r * w + cols.end].iter().all(|&l| l == first));
                out.push(if pure { first } else { crate::datagen::IGNORE });
            }
        }
    }
    out
}
