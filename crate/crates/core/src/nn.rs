//! Minimal reverse-mode layers over HWC feature grids.
//!
//! Every layer returns a tape from its forward pass; the matching
//! `backward` consumes the tape and the upstream gradient and returns
//! parameter and input gradients. Convolutions go through im2col and a
//! dense matrix product.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;

use crate::error::{shape, Result};

/// Anything holding trainable tensors in a fixed order.
pub trait Parameters {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    fn fill(&mut self, v: f64) {
        for t in self.tensors_mut() {
            t.fill(v);
        }
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    /// `self += other`, tensor by tensor.
    fn accumulate(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= s);
        }
    }
}

pub(crate) fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

pub(crate) fn slice_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

pub(crate) fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

pub(crate) fn slice1_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

/// Glorot-uniform matrix.
pub fn glorot<R: Rng>(rng: &mut R, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit))
}

/// Padding that yields `ceil(in / stride)` outputs, extra padding after.
fn same_padding(input: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(input);
    (out, total / 2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// (k·k·cin) × cout; row index (ky·k + kx)·cin + c.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub kernel: usize,
    pub stride: usize,
    pub cin: usize,
    pub cout: usize,
}

pub struct ConvTape {
    cols: Array2<f64>,
    in_dims: (usize, usize),
    out_dims: (usize, usize),
    pad: (usize, usize),
}

impl Conv2d {
    pub fn new<R: Rng>(rng: &mut R, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        let fan = kernel * kernel;
        Self {
            weight: glorot(rng, fan * cin, cout, fan * cin, fan * cout),
            bias: Array1::zeros(cout),
            kernel,
            stride,
            cin,
            cout,
        }
    }

    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (h.div_ceil(self.stride), w.div_ceil(self.stride))
    }

    pub fn forward(&self, x: &Array3<f64>) -> Result<(Array3<f64>, ConvTape)> {
        let (h, w, c) = x.dim();
        if c != self.cin {
            return shape(format!("conv expects {} input channels, got {c}", self.cin));
        }
        let (k, s) = (self.kernel, self.stride);
        let (oh, ph) = same_padding(h, k, s);
        let (ow, pw) = same_padding(w, k, s);
        let row_len = k * k * c;
        let mut cols = Array2::zeros((oh * ow, row_len));
        let xs = x.as_slice().expect("standard layout");
        {
            let cs = slice_mut(&mut cols);
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = &mut cs[(oy * ow + ox) * row_len..(oy * ow + ox + 1) * row_len];
                    for ky in 0..k {
                        let iy = (oy * s + ky) as isize - ph as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * s + kx) as isize - pw as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let src = ((iy as usize) * w + ix as usize) * c;
                            let dst = (ky * k + kx) * c;
                            row[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                        }
                    }
                }
            }
        }
        let mut y = cols.dot(&self.weight);
        y += &self.bias;
        let y = y.into_shape_with_order((oh, ow, self.cout)).expect("conv output shape");
        Ok((y, ConvTape { cols, in_dims: (h, w), out_dims: (oh, ow), pad: (ph, pw) }))
    }

    /// Returns (parameter gradient, input gradient).
    pub fn backward(&self, tape: &ConvTape, dy: &Array3<f64>) -> Result<(Conv2d, Array3<f64>)> {
        let (oh, ow) = tape.out_dims;
        if dy.dim() != (oh, ow, self.cout) {
            return shape("conv upstream gradient does not match its tape");
        }
        let dy2 = dy.view().into_shape_with_order((oh * ow, self.cout)).expect("reshape");
        let mut grad = self.clone();
        grad.weight = tape.cols.t().dot(&dy2).as_standard_layout().into_owned();
        grad.bias = dy2.sum_axis(Axis(0));
        let dcols = dy2.dot(&self.weight.t());
        let (h, w) = tape.in_dims;
        let (k, s, c) = (self.kernel, self.stride, self.cin);
        let (ph, pw) = tape.pad;
        let row_len = k * k * c;
        let mut dx = Array3::zeros((h, w, c));
        let dxs = dx.as_slice_mut().expect("standard layout");
        let ds = slice(&dcols);
        for oy in 0..oh {
            for ox in 0..ow {
                let row = &ds[(oy * ow + ox) * row_len..(oy * ow + ox + 1) * row_len];
                for ky in 0..k {
                    let iy = (oy * s + ky) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * s + kx) as isize - pw as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = ((iy as usize) * w + ix as usize) * c;
                        let src = (ky * k + kx) * c;
                        for ch in 0..c {
                            dxs[dst + ch] += row[src + ch];
                        }
                    }
                }
            }
        }
        Ok((grad, dx))
    }
}

impl Parameters for Conv2d {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![slice(&self.weight), slice1(&self.bias)]
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![slice_mut(&mut self.weight), slice1_mut(&mut self.bias)]
    }
}

/// Stride-2 transposed convolution with a 4×4 kernel and padding 1, so the
/// output is exactly twice the input in each spatial dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct UpConv2d {
    /// cin × (k·k·cout); column index (ky·k + kx)·cout + c.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub cin: usize,
    pub cout: usize,
}

pub struct UpConvTape {
    x: Array2<f64>,
    in_dims: (usize, usize),
}

const UP_K: usize = 4;
const UP_S: usize = 2;
const UP_P: usize = 1;

impl UpConv2d {
    pub fn new<R: Rng>(rng: &mut R, cin: usize, cout: usize) -> Self {
        let fan = UP_K * UP_K;
        Self {
            weight: glorot(rng, cin, fan * cout, fan * cin, fan * cout),
            bias: Array1::zeros(cout),
            cin,
            cout,
        }
    }

    pub fn forward(&self, x: &Array3<f64>) -> Result<(Array3<f64>, UpConvTape)> {
        let (h, w, c) = x.dim();
        if c != self.cin {
            return shape(format!("up-conv expects {} input channels, got {c}", self.cin));
        }
        let x2 = x.to_shape((h * w, c)).expect("reshape").to_owned();
        let cols = x2.dot(&self.weight);
        let (oh, ow) = (h * UP_S, w * UP_S);
        let co = self.cout;
        let mut y = Array3::zeros((oh, ow, co));
        {
            let ys = y.as_slice_mut().expect("standard layout");
            let cs = slice(&cols);
            let row_len = UP_K * UP_K * co;
            for iy in 0..h {
                for ix in 0..w {
                    let row = &cs[(iy * w + ix) * row_len..(iy * w + ix + 1) * row_len];
                    for ky in 0..UP_K {
                        let oy = (iy * UP_S + ky) as isize - UP_P as isize;
                        if oy < 0 || oy >= oh as isize {
                            continue;
                        }
                        for kx in 0..UP_K {
                            let ox = (ix * UP_S + kx) as isize - UP_P as isize;
                            if ox < 0 || ox >= ow as isize {
                                continue;
                            }
                            let dst = ((oy as usize) * ow + ox as usize) * co;
                            let src = (ky * UP_K + kx) * co;
                            for ch in 0..co {
                                ys[dst + ch] += row[src + ch];
                            }
                        }
                    }
                }
            }
        }
        y += &self.bias;
        Ok((y, UpConvTape { x: x2, in_dims: (h, w) }))
    }

    pub fn backward(&self, tape: &UpConvTape, dy: &Array3<f64>) -> Result<(UpConv2d, Array3<f64>)> {
        let (h, w) = tape.in_dims;
        let (oh, ow, co) = (h * UP_S, w * UP_S, self.cout);
        if dy.dim() != (oh, ow, co) {
            return shape("up-conv upstream gradient does not match its tape");
        }
        let row_len = UP_K * UP_K * co;
        let mut dcols = Array2::zeros((h * w, row_len));
        {
            let ds = slice_mut(&mut dcols);
            let gs = dy.as_slice().expect("standard layout");
            for iy in 0..h {
                for ix in 0..w {
                    let row = &mut ds[(iy * w + ix) * row_len..(iy * w + ix + 1) * row_len];
                    for ky in 0..UP_K {
                        let oy = (iy * UP_S + ky) as isize - UP_P as isize;
                        if oy < 0 || oy >= oh as isize {
                            continue;
                        }
                        for kx in 0..UP_K {
                            let ox = (ix * UP_S + kx) as isize - UP_P as isize;
                            if ox < 0 || ox >= ow as isize {
                                continue;
                            }
                            let src = ((oy as usize) * ow + ox as usize) * co;
                            let dst = (ky * UP_K + kx) * co;
                            row[dst..dst + co].copy_from_slice(&gs[src..src + co]);
                        }
                    }
                }
            }
        }
        let mut grad = self.clone();
        grad.weight = tape.x.t().dot(&dcols).as_standard_layout().into_owned();
        grad.bias = dy.sum_axis(Axis(0)).sum_axis(Axis(0));
        let dx = dcols.dot(&self.weight.t());
        let dx = dx.into_shape_with_order((h, w, self.cin)).expect("reshape");
        Ok((grad, dx))
    }
}

impl Parameters for UpConv2d {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![slice(&self.weight), slice1(&self.bias)]
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![slice_mut(&mut self.weight), slice1_mut(&mut self.bias)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// in × out
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn new<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: glorot(rng, fan_in, fan_out, fan_in, fan_out),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }

    /// Applies the layer to every row of `x`.
    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.fan_in() {
            return shape(format!("linear expects {} inputs, got {}", self.fan_in(), x.ncols()));
        }
        Ok(x.dot(&self.weight) + &self.bias)
    }

    /// `x` is the forward input (the tape).
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>) -> (Linear, Array2<f64>) {
        let grad = Linear { weight: x.t().dot(dy).as_standard_layout().into_owned(), bias: dy.sum_axis(Axis(0)) };
        (grad, dy.dot(&self.weight.t()))
    }
}

impl Parameters for Linear {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![slice(&self.weight), slice1(&self.bias)]
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![slice_mut(&mut self.weight), slice1_mut(&mut self.bias)]
    }
}

pub fn relu<D: ndarray::Dimension>(x: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient through ReLU given the forward *output*.
pub fn relu_backward<D: ndarray::Dimension>(
    y: &ndarray::Array<f64, D>,
    dy: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |g, &v| {
        if v <= 0.0 {
            *g = 0.0
        }
    });
    dx
}

pub fn leaky_relu<D: ndarray::Dimension>(x: &ndarray::Array<f64, D>, slope: f64) -> ndarray::Array<f64, D> {
    x.mapv(|v| if v > 0.0 { v } else { slope * v })
}

/// Gradient through leaky ReLU given the forward *output* (sign preserved).
pub fn leaky_relu_backward<D: ndarray::Dimension>(
    y: &ndarray::Array<f64, D>,
    dy: &ndarray::Array<f64, D>,
    slope: f64,
) -> ndarray::Array<f64, D> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |g, &v| {
        if v <= 0.0 {
            *g *= slope
        }
    });
    dx
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// 2×2 average pooling; odd trailing rows/columns are dropped.
pub fn avg_pool2(x: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    Array3::from_shape_fn((oh, ow, c), |(i, j, ch)| {
        0.25 * (x[[2 * i, 2 * j, ch]]
            + x[[2 * i + 1, 2 * j, ch]]
            + x[[2 * i, 2 * j + 1, ch]]
            + x[[2 * i + 1, 2 * j + 1, ch]])
    })
}

pub fn avg_pool2_backward(dy: &Array3<f64>, in_dims: (usize, usize)) -> Array3<f64> {
    let (oh, ow, c) = dy.dim();
    let mut dx = Array3::zeros((in_dims.0, in_dims.1, c));
    for i in 0..oh {
        for j in 0..ow {
            for ch in 0..c {
                let g = 0.25 * dy[[i, j, ch]];
                dx[[2 * i, 2 * j, ch]] += g;
                dx[[2 * i + 1, 2 * j, ch]] += g;
                dx[[2 * i, 2 * j + 1, ch]] += g;
                dx[[2 * i + 1, 2 * j + 1, ch]] += g;
            }
        }
    }
    dx
}

/// SGD with classical momentum: `v = μ v + g; θ -= lr v`.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumSgd {
    pub momentum: f64,
    pub velocity: Vec<f64>,
}

impl MomentumSgd {
    pub fn new(num_params: usize, momentum: f64) -> Self {
        Self { momentum, velocity: vec![0.0; num_params] }
    }

    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P, lr: f64) {
        let mut offset = 0;
        for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
            let v = &mut self.velocity[offset..offset + p.len()];
            for ((pi, gi), vi) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *pi -= lr * *vi;
            }
            offset += p.len();
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(num_params: usize) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; num_params], v: vec![0.0; num_params], t: 0 }
    }

    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut offset = 0;
        for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
            for (i, (pi, gi)) in p.iter_mut().zip(g).enumerate() {
                let m = &mut self.m[offset + i];
                let v = &mut self.v[offset + i];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gi;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gi * gi;
                *pi -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
            offset += p.len();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn rand3(h: usize, w: usize, c: usize, seed: u64) -> Array3<f64> {
        let mut rng = stream(seed, &[]);
        Array3::from_shape_fn((h, w, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Directional finite-difference check of a scalar `<y, probe>`.
    fn check<F: Fn(&Array3<f64>) -> f64>(f: F, x: &Array3<f64>, analytic: &Array3<f64>) {
        let h = 1e-6;
        for idx in [0usize, 7, 13, x.len() - 1] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            let num = (f(&xp) - f(&xm)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            assert!((num - a).abs() <= 1e-6 * (1.0 + a.abs()), "idx {idx}: {num} vs {a}");
        }
    }

    #[test]
    fn conv_shapes_follow_stride() {
        let mut rng = stream(0, &[]);
        let conv = Conv2d::new(&mut rng, 3, 8, 3, 2);
        let (y, _) = conv.forward(&rand3(64, 64, 3, 1)).unwrap();
        assert_eq!(y.dim(), (32, 32, 8));
        let conv = Conv2d::new(&mut rng, 1, 4, 4, 2);
        let (y, _) = conv.forward(&rand3(27, 13, 1, 1)).unwrap();
        assert_eq!(y.dim(), (14, 7, 4));
        assert!(conv.forward(&rand3(8, 8, 2, 1)).is_err());
    }

    #[test]
    fn conv_input_gradient() {
        let mut rng = stream(3, &[]);
        let conv = Conv2d::new(&mut rng, 2, 3, 3, 2);
        let x = rand3(7, 6, 2, 2);
        let probe = rand3(4, 3, 3, 9);
        let (_, tape) = conv.forward(&x).unwrap();
        let (_, dx) = conv.backward(&tape, &probe).unwrap();
        check(|x| (conv.forward(x).unwrap().0 * &probe).sum(), &x, &dx);
    }

    #[test]
    fn upconv_doubles_and_differentiates() {
        let mut rng = stream(4, &[]);
        let up = UpConv2d::new(&mut rng, 3, 2);
        let x = rand3(3, 4, 3, 5);
        let (y, tape) = up.forward(&x).unwrap();
        assert_eq!(y.dim(), (6, 8, 2));
        let probe = rand3(6, 8, 2, 6);
        let (g, dx) = up.backward(&tape, &probe).unwrap();
        check(|x| (up.forward(x).unwrap().0 * &probe).sum(), &x, &dx);
        // weight gradient, one coordinate
        let h = 1e-6;
        let mut p = up.clone();
        p.weight[[1, 5]] += h;
        let mut m = up.clone();
        m.weight[[1, 5]] -= h;
        let num = ((p.forward(&x).unwrap().0 * &probe).sum() - (m.forward(&x).unwrap().0 * &probe).sum()) / (2.0 * h);
        assert!((num - g.weight[[1, 5]]).abs() < 1e-6);
    }

    #[test]
    fn momentum_accumulates() {
        let mut rng = stream(0, &[]);
        let mut lin = Linear::new(&mut rng, 2, 1);
        lin.fill(0.0);
        let mut g = lin.clone();
        g.fill(1.0);
        let mut opt = MomentumSgd::new(lin.num_params(), 0.9);
        opt.step(&mut lin, &g, 0.1);
        opt.step(&mut lin, &g, 0.1);
        // -0.1 * 1 - 0.1 * 1.9
        assert!((lin.bias[0] + 0.29).abs() < 1e-12);
    }

    #[test]
    fn flat_round_trip() {
        let mut rng = stream(1, &[]);
        let lin = Linear::new(&mut rng, 3, 2);
        let flat = lin.flatten();
        let mut other = lin.zeros_like();
        other.assign_flat(&flat);
        assert_eq!(other, lin);
    }
}
