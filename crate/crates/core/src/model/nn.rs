//! Minimal CPU convolution layers with hand-written backward passes.
//!
//! Activations are channel-planar `f32` blocks (CxHxW). Convolutions lower to
//! a single sgemm via im2col. Every routine here is single-threaded, so a
//! fixed input always produces bit-identical output.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Channel-planar activation block.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor3 {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor3 {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length");
        Tensor3 { c, h, w, data }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn relu_inplace(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.max(0.0));
    }

    /// Zeroes gradient entries where the forward activation was clipped.
    pub fn relu_backward_inplace(&mut self, activated: &Tensor3) {
        for (g, a) in self.data.iter_mut().zip(&activated.data) {
            if *a <= 0.0 {
                *g = 0.0;
            }
        }
    }

    /// Nearest-neighbour 2x upsample cropped to `h x w`.
    pub fn upsample2(&self, h: usize, w: usize) -> Tensor3 {
        let mut out = Tensor3::zeros(self.c, h, w);
        for c in 0..self.c {
            for y in 0..h {
                let src = c * self.plane() + (y / 2).min(self.h - 1) * self.w;
                let dst = c * h * w + y * w;
                for x in 0..w {
                    out.data[dst + x] = self.data[src + (x / 2).min(self.w - 1)];
                }
            }
        }
        out
    }

    /// Adjoint of [`Tensor3::upsample2`]: sums each 2x2 block back onto
    /// a `h x w` grid.
    pub fn upsample2_backward(&self, h: usize, w: usize) -> Tensor3 {
        let mut out = Tensor3::zeros(self.c, h, w);
        for c in 0..self.c {
            for y in 0..self.h {
                let dst = c * h * w + (y / 2).min(h - 1) * w;
                let src = c * self.plane() + y * self.w;
                for x in 0..self.w {
                    out.data[dst + (x / 2).min(w - 1)] += self.data[src + x];
                }
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Tensor3) {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }
}

/// Square-kernel 2-D convolution with symmetric zero padding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `out_c x (in_c * kernel * kernel)`, row-major.
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Gradient buffers shaped like one [`Conv2d`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrad {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvGrad {
    pub fn zeros_like(conv: &Conv2d) -> Self {
        ConvGrad {
            weight: vec![0.0; conv.weight.len()],
            bias: vec![0.0; conv.bias.len()],
        }
    }

    pub fn add_assign(&mut self, other: &ConvGrad) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
    }
}

impl Conv2d {
    /// He-uniform weights, zero bias.
    pub fn he_uniform<R: Rng>(rng: &mut R, in_c: usize, out_c: usize, kernel: usize, stride: usize) -> Self {
        let fan_in = (in_c * kernel * kernel) as f32;
        let bound = (6.0 / fan_in).sqrt();
        Self::uniform(rng, in_c, out_c, kernel, stride, bound)
    }

    /// Weights uniform in `[-bound, bound]`, zero bias.
    pub fn uniform<R: Rng>(rng: &mut R, in_c: usize, out_c: usize, kernel: usize, stride: usize, bound: f32) -> Self {
        let n = out_c * in_c * kernel * kernel;
        let weight = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        Conv2d {
            in_c,
            out_c,
            kernel,
            stride,
            pad: kernel / 2,
            weight,
            bias: vec![0.0; out_c],
        }
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |d: usize| (d + 2 * self.pad - self.kernel) / self.stride + 1;
        (f(h), f(w))
    }

    fn patch_len(&self) -> usize {
        self.in_c * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Lowers `x` to a `(in_c*k*k) x (oh*ow)` patch matrix.
    fn im2col(&self, x: &Tensor3, oh: usize, ow: usize) -> Vec<f32> {
        let k = self.kernel;
        let n = oh * ow;
        let mut cols = vec![0.0f32; self.patch_len() * n];
        for c in 0..self.in_c {
            let src = &x.data[c * x.plane()..(c + 1) * x.plane()];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * x.w..(iy as usize + 1) * x.w];
                        let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < x.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Tensor3 {
        let k = self.kernel;
        let n = oh * ow;
        let mut out = Tensor3::zeros(self.in_c, h, w);
        for c in 0..self.in_c {
            let plane = &mut out.data[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst_row[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, x: &Tensor3) -> Tensor3 {
        self.forward_cached(x).0
    }

    /// Forward pass that also returns the patch matrix needed by [`Conv2d::backward`].
    /// Pointwise convolutions return an empty patch matrix and reuse the input.
    pub fn forward_cached(&self, x: &Tensor3) -> (Tensor3, Vec<f32>) {
        assert_eq!(x.c, self.in_c, "conv input channels");
        let (oh, ow) = self.out_dims(x.h, x.w);
        let n = oh * ow;
        let cols = if self.is_pointwise() {
            Vec::new()
        } else {
            self.im2col(x, oh, ow)
        };
        let b: &[f32] = if self.is_pointwise() { &x.data } else { &cols };
        let mut out = Tensor3::zeros(self.out_c, oh, ow);
        for (o, chunk) in out.data.chunks_exact_mut(n).enumerate() {
            chunk.fill(self.bias[o]);
        }
        let kdim = self.patch_len();
        // SAFETY: all slices are sized exactly for the (m, k, n) product and
        // the strides describe contiguous row-major layouts.
        unsafe {
            matrixmultiply::sgemm(
                self.out_c,
                kdim,
                n,
                1.0,
                self.weight.as_ptr(),
                kdim as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                1.0,
                out.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        (out, cols)
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient when `want_input_grad` is set.
    pub fn backward(
        &self,
        x: &Tensor3,
        cols: &[f32],
        dy: &Tensor3,
        grad: &mut ConvGrad,
        want_input_grad: bool,
    ) -> Option<Tensor3> {
        let (oh, ow) = (dy.h, dy.w);
        let n = oh * ow;
        let kdim = self.patch_len();
        let b: &[f32] = if self.is_pointwise() { &x.data } else { cols };

        for (o, chunk) in dy.data.chunks_exact(n).enumerate() {
            grad.bias[o] += chunk.iter().sum::<f32>();
        }
        // SAFETY: see `forward_cached`; `b` is read transposed via its strides.
        unsafe {
            matrixmultiply::sgemm(
                self.out_c,
                n,
                kdim,
                1.0,
                dy.data.as_ptr(),
                n as isize,
                1,
                b.as_ptr(),
                1,
                n as isize,
                1.0,
                grad.weight.as_mut_ptr(),
                kdim as isize,
                1,
            );
        }
        if !want_input_grad {
            return None;
        }
        let mut dcols = vec![0.0f32; kdim * n];
        // SAFETY: weight is read transposed (kdim x out_c) via its strides.
        unsafe {
            matrixmultiply::sgemm(
                kdim,
                self.out_c,
                n,
                1.0,
                self.weight.as_ptr(),
                1,
                kdim as isize,
                dy.data.as_ptr(),
                n as isize,
                1,
                0.0,
                dcols.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        if self.is_pointwise() {
            Some(Tensor3::from_vec(self.in_c, x.h, x.w, dcols))
        } else {
            Some(self.col2im(&dcols, x.h, x.w, oh, ow))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for a list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(shapes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = shapes.into_iter().map(|n| (vec![0.0; n], vec![0.0; n])).unzip();
        AdamState { m, v, t: 0 }
    }

    /// One bias-corrected Adam update over every tensor.
    pub fn step(&mut self, cfg: &AdamConfig, lr: f64, params: &mut [&mut [f32]], grads: &[&[f32]]) {
        assert_eq!(params.len(), self.m.len(), "parameter tensor count");
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let step = (lr * bc2.sqrt() / bc1) as f32;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let eps = (cfg.eps * bc2.sqrt()) as f32;
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], grads[i]);
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                p[j] -= step * m[j] / (v[j].sqrt() + eps);
            }
        }
    }
}
