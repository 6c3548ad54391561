//! Layer inventory of the arc autoencoders.
//!
//! Every layer has a pure evaluation-mode `infer` and a training-mode
//! `forward` that caches what `backward` needs. `backward` accumulates
//! parameter gradients and returns the gradient with respect to the input.

use rand::Rng;

use super::tensor::{Param, Tensor};
use crate::error::{Error, Result};
use crate::linalg::{gemm, Op};

pub const KERNEL: usize = 3;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Spatial geometry of a 3×3 sliding window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    /// Output extent of a convolution over an input of extent `n`.
    pub fn conv_out(&self, n: usize) -> usize {
        (n + 2 * self.pad - KERNEL) / self.stride + 1
    }
}

/// Unfold `x` (`c × h × w`) into columns (`c·9 × ho·wo`).
pub fn im2col(x: &[f64], c: usize, h: usize, w: usize, win: Window, ho: usize, wo: usize, cols: &mut [f64]) {
    let (s, p) = (win.stride as isize, win.pad as isize);
    let npix = ho * wo;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..KERNEL {
            for kj in 0..KERNEL {
                let row = (ch * KERNEL + ki) * KERNEL + kj;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oi in 0..ho {
                    let ii = oi as isize * s - p + ki as isize;
                    let drow = &mut dst[oi * wo..(oi + 1) * wo];
                    if ii < 0 || ii >= h as isize {
                        drow.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[ii as usize * w..(ii as usize + 1) * w];
                    for (oj, d) in drow.iter_mut().enumerate() {
                        let jj = oj as isize * s - p + kj as isize;
                        *d = if jj < 0 || jj >= w as isize { 0.0 } else { src[jj as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into `x`.
pub fn col2im(cols: &[f64], c: usize, h: usize, w: usize, win: Window, ho: usize, wo: usize, x: &mut [f64]) {
    let (s, p) = (win.stride as isize, win.pad as isize);
    let npix = ho * wo;
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for ki in 0..KERNEL {
            for kj in 0..KERNEL {
                let row = (ch * KERNEL + ki) * KERNEL + kj;
                let src = &cols[row * npix..(row + 1) * npix];
                for oi in 0..ho {
                    let ii = oi as isize * s - p + ki as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * w..(ii as usize + 1) * w];
                    for (oj, v) in src[oi * wo..(oi + 1) * wo].iter().enumerate() {
                        let jj = oj as isize * s - p + kj as isize;
                        if jj >= 0 && jj < w as isize {
                            dst[jj as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
}

fn expect_rank(x: &Tensor, rank: usize, what: &str) -> Result<()> {
    if x.shape().len() != rank {
        return Err(Error::ShapeMismatch(format!("{what} expects rank {rank}, got {:?}", x.shape())));
    }
    Ok(())
}

fn take_cache<T>(cache: &mut Option<T>, what: &str) -> Result<T> {
    cache
        .take()
        .ok_or_else(|| Error::ShapeMismatch(format!("{what}: backward without forward")))
}

/// 3×3 convolution, stride 1, padding 1.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub win: Window,
    /// `[out_c, in_c, 3, 3]`
    pub weight: Param,
    pub bias: Param,
    cache: Option<Tensor>,
}

impl Conv2d {
    pub fn new(in_c: usize, out_c: usize, rng: &mut impl Rng) -> Self {
        let n = out_c * in_c * KERNEL * KERNEL;
        Self::from_weights(
            in_c,
            out_c,
            glorot(rng, in_c * KERNEL * KERNEL, out_c * KERNEL * KERNEL, n),
            vec![0.0; out_c],
            Window { stride: 1, pad: 1 },
        )
    }

    pub fn from_weights(in_c: usize, out_c: usize, weight: Vec<f64>, bias: Vec<f64>, win: Window) -> Self {
        Self {
            in_c,
            out_c,
            win,
            weight: Param::new(&[out_c, in_c, KERNEL, KERNEL], weight),
            bias: Param::new(&[out_c], bias),
            cache: None,
        }
    }

    fn check(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        expect_rank(x, 4, "conv2d")?;
        let s = x.shape();
        if s[1] != self.in_c {
            return Err(Error::ShapeMismatch(format!("conv2d expects {} channels, got {}", self.in_c, s[1])));
        }
        Ok((s[0], s[2], s[3]))
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x, true)
    }

    /// The map without its bias.
    pub fn linear_part(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x, false)
    }

    fn run(&self, x: &Tensor, with_bias: bool) -> Result<Tensor> {
        let (n, h, w) = self.check(x)?;
        let (ho, wo) = (self.win.conv_out(h), self.win.conv_out(w));
        let k = self.in_c * KERNEL * KERNEL;
        let mut cols = vec![0.0; k * ho * wo];
        let mut out = Tensor::zeros(&[n, self.out_c, ho, wo]);
        let item = self.out_c * ho * wo;
        for b in 0..n {
            im2col(x.item(b), self.in_c, h, w, self.win, ho, wo, &mut cols);
            let y = &mut out.data_mut()[b * item..(b + 1) * item];
            if with_bias {
                for (o, plane) in y.chunks_exact_mut(ho * wo).enumerate() {
                    plane.iter_mut().for_each(|v| *v = self.bias.value[o]);
                }
            }
            gemm(self.out_c, k, ho * wo, 1.0, &self.weight.value, Op::N, &cols, Op::N, 1.0, y);
        }
        Ok(out)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.infer(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, gy: &Tensor) -> Result<Tensor> {
        let x = take_cache(&mut self.cache, "conv2d")?;
        let (n, h, w) = self.check(&x)?;
        let (ho, wo) = (self.win.conv_out(h), self.win.conv_out(w));
        let k = self.in_c * KERNEL * KERNEL;
        let npix = ho * wo;
        let mut cols = vec![0.0; k * npix];
        let mut dcols = vec![0.0; k * npix];
        let mut gx = Tensor::zeros(x.shape());
        let in_item = self.in_c * h * w;
        for b in 0..n {
            let g = gy.item(b);
            im2col(x.item(b), self.in_c, h, w, self.win, ho, wo, &mut cols);
            gemm(self.out_c, npix, k, 1.0, g, Op::N, &cols, Op::T, 1.0, &mut self.weight.grad);
            for (o, plane) in g.chunks_exact(npix).enumerate() {
                self.bias.grad[o] += plane.iter().sum::<f64>();
            }
            gemm(k, self.out_c, npix, 1.0, &self.weight.value, Op::T, g, Op::N, 0.0, &mut dcols);
            col2im(&dcols, self.in_c, h, w, self.win, ho, wo, &mut gx.data_mut()[b * in_item..(b + 1) * in_item]);
        }
        Ok(gx)
    }
}

/// 3×3 transposed convolution, stride 2, padding 1, output padding 1:
/// spatial extent doubles.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub in_c: usize,
    pub out_c: usize,
    /// `[in_c, out_c, 3, 3]`
    pub weight: Param,
    pub bias: Param,
    cache: Option<Tensor>,
}

pub const UPSAMPLE: Window = Window { stride: 2, pad: 1 };

impl ConvTranspose2d {
    pub fn new(in_c: usize, out_c: usize, rng: &mut impl Rng) -> Self {
        let n = in_c * out_c * KERNEL * KERNEL;
        Self::from_weights(
            in_c,
            out_c,
            glorot(rng, in_c * KERNEL * KERNEL, out_c * KERNEL * KERNEL, n),
            vec![0.0; out_c],
        )
    }

    pub fn from_weights(in_c: usize, out_c: usize, weight: Vec<f64>, bias: Vec<f64>) -> Self {
        Self {
            in_c,
            out_c,
            weight: Param::new(&[in_c, out_c, KERNEL, KERNEL], weight),
            bias: Param::new(&[out_c], bias),
            cache: None,
        }
    }

    fn check(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        expect_rank(x, 4, "conv_transpose2d")?;
        let s = x.shape();
        if s[1] != self.in_c {
            return Err(Error::ShapeMismatch(format!(
                "conv_transpose2d expects {} channels, got {}",
                self.in_c, s[1]
            )));
        }
        Ok((s[0], s[2], s[3]))
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x, true)
    }

    /// The map without its bias.
    pub fn linear_part(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x, false)
    }

    fn run(&self, x: &Tensor, with_bias: bool) -> Result<Tensor> {
        let (n, h, w) = self.check(x)?;
        let (ho, wo) = (2 * h, 2 * w);
        let k = self.out_c * KERNEL * KERNEL;
        let mut cols = vec![0.0; k * h * w];
        let mut out = Tensor::zeros(&[n, self.out_c, ho, wo]);
        let item = self.out_c * ho * wo;
        for b in 0..n {
            gemm(k, self.in_c, h * w, 1.0, &self.weight.value, Op::T, x.item(b), Op::N, 0.0, &mut cols);
            let y = &mut out.data_mut()[b * item..(b + 1) * item];
            if with_bias {
                for (o, plane) in y.chunks_exact_mut(ho * wo).enumerate() {
                    plane.iter_mut().for_each(|v| *v = self.bias.value[o]);
                }
            }
            col2im(&cols, self.out_c, ho, wo, UPSAMPLE, h, w, y);
        }
        Ok(out)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.infer(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, gy: &Tensor) -> Result<Tensor> {
        let x = take_cache(&mut self.cache, "conv_transpose2d")?;
        let (n, h, w) = self.check(&x)?;
        let (ho, wo) = (2 * h, 2 * w);
        let k = self.out_c * KERNEL * KERNEL;
        let mut gcols = vec![0.0; k * h * w];
        let mut gx = Tensor::zeros(x.shape());
        let in_item = self.in_c * h * w;
        for b in 0..n {
            let g = gy.item(b);
            for (o, plane) in g.chunks_exact(ho * wo).enumerate() {
                self.bias.grad[o] += plane.iter().sum::<f64>();
            }
            im2col(g, self.out_c, ho, wo, UPSAMPLE, h, w, &mut gcols);
            gemm(self.in_c, h * w, k, 1.0, x.item(b), Op::N, &gcols, Op::T, 1.0, &mut self.weight.grad);
            gemm(
                self.in_c,
                k,
                h * w,
                1.0,
                &self.weight.value,
                Op::N,
                &gcols,
                Op::N,
                0.0,
                &mut gx.data_mut()[b * in_item..(b + 1) * in_item],
            );
        }
        Ok(gx)
    }
}

/// 2×2 max pooling with stride 2.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2d {
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2d {
    fn run(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
        expect_rank(x, 4, "maxpool2d")?;
        let s = x.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let mut arg = vec![0usize; n * c * ho * wo];
        let xd = x.data();
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    let o = (plane * ho + i) * wo + j;
                    out.data_mut()[o] = xd[best];
                    arg[o] = best;
                }
            }
        }
        Ok((out, arg))
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(Self::run(x)?.0)
    }

    /// Flat input index selected for each output cell.
    pub fn argmax(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(Self::run(x)?.1)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (y, arg) = Self::run(x)?;
        self.cache = Some((arg, x.shape().to_vec()));
        Ok(y)
    }

    pub fn backward(&mut self, gy: &Tensor) -> Result<Tensor> {
        let (arg, shape) = take_cache(&mut self.cache, "maxpool2d")?;
        let mut gx = Tensor::zeros(&shape);
        for (g, &i) in gy.data().iter().zip(&arg) {
            gx.data_mut()[i] += g;
        }
        Ok(gx)
    }
}

/// Structured dropout: zeroes square blocks of each feature map during
/// training and rescales the survivors. Identity at evaluation.
#[derive(Debug, Clone)]
pub struct DropBlock {
    pub rate: f64,
    pub block: usize,
    cache: Option<Vec<f64>>,
}

impl DropBlock {
    pub fn new(rate: f64, block: usize) -> Self {
        Self {
            rate,
            block,
            cache: None,
        }
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.clone())
    }

    /// Sample the scaled keep-mask for a `[n, c, h, w]` tensor.
    pub fn sample_mask(&self, shape: &[usize], rng: &mut impl Rng) -> Vec<f64> {
        let total: usize = shape.iter().product();
        if self.rate <= 0.0 {
            return vec![1.0; total];
        }
        let (h, w) = (shape[2], shape[3]);
        let b = self.block.min(h).min(w).max(1);
        let half = b / 2;
        let valid = ((h - b + 1) * (w - b + 1)) as f64;
        let gamma = (self.rate / (b * b) as f64) * (h * w) as f64 / valid;
        let mut mask = vec![1.0; total];
        for plane in mask.chunks_exact_mut(h * w) {
            for ci in half..h - (b - 1 - half) {
                for cj in half..w - (b - 1 - half) {
                    if rng.gen::<f64>() < gamma {
                        for i in ci - half..ci - half + b {
                            plane[i * w + cj - half..i * w + cj - half + b].iter_mut().for_each(|m| *m = 0.0);
                        }
                    }
                }
            }
        }
        let kept: f64 = mask.iter().sum();
        let scale = if kept > 0.0 { total as f64 / kept } else { 0.0 };
        mask.iter_mut().for_each(|m| *m *= scale);
        mask
    }

    pub fn forward(&mut self, x: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
        expect_rank(x, 4, "dropblock")?;
        let mask = self.sample_mask(x.shape(), rng);
        let data = x.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        self.cache = Some(mask);
        Tensor::new(x.shape(), data)
    }

    pub fn backward(&mut self, gy: &Tensor) -> Result<Tensor> {
        let mask = take_cache(&mut self.cache, "dropblock")?;
        Tensor::new(gy.shape(), gy.data().iter().zip(&mask).map(|(g, m)| g * m).collect())
    }
}

/// Per-channel batch normalization over `(n, h, w)`.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    cache: Option<(Vec<f64>, Vec<f64>, Vec<usize>)>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::new(&[channels], vec![1.0; channels]),
            beta: Param::new(&[channels], vec![0.0; channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            cache: None,
        }
    }

    fn dims(&self, x: &Tensor) -> Result<(usize, usize)> {
        expect_rank(x, 4, "batchnorm2d")?;
        if x.shape()[1] != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "batchnorm2d expects {} channels, got {}",
                self.channels,
                x.shape()[1]
            )));
        }
        Ok((x.shape()[0], x.shape()[2] * x.shape()[3]))
    }

    /// Per-channel `(scale, shift)` of the evaluation-mode affine map.
    pub fn eval_affine(&self) -> (Vec<f64>, Vec<f64>) {
        (0..self.channels)
            .map(|c| {
                let s = self.gamma.value[c] / (self.running_var[c] + BN_EPS).sqrt();
                (s, self.beta.value[c] - s * self.running_mean[c])
            })
            .unzip()
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let (n, hw) = self.dims(x)?;
        let (scale, shift) = self.eval_affine();
        let mut y = x.clone();
        for b in 0..n {
            for c in 0..self.channels {
                let off = (b * self.channels + c) * hw;
                y.data_mut()[off..off + hw].iter_mut().for_each(|v| *v = *v * scale[c] + shift[c]);
            }
        }
        Ok(y)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (n, hw) = self.dims(x)?;
        let m = (n * hw) as f64;
        let mut y = Tensor::zeros(x.shape());
        let mut x_hat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; self.channels];
        for c in 0..self.channels {
            let planes = (0..n).map(|b| (b * self.channels + c) * hw);
            let mean = planes.clone().map(|o| x.data()[o..o + hw].iter().sum::<f64>()).sum::<f64>() / m;
            let var = planes
                .clone()
                .map(|o| x.data()[o..o + hw].iter().map(|v| (v - mean).powi(2)).sum::<f64>())
                .sum::<f64>()
                / m;
            let is = 1.0 / (var + BN_EPS).sqrt();
            inv_std[c] = is;
            for o in planes {
                for i in o..o + hw {
                    let xh = (x.data()[i] - mean) * is;
                    x_hat[i] = xh;
                    y.data_mut()[i] = self.gamma.value[c] * xh + self.beta.value[c];
                }
            }
            let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
            self.running_mean[c] = (1.0 - BN_MOMENTUM) * self.running_mean[c] + BN_MOMENTUM * mean;
            self.running_var[c] = (1.0 - BN_MOMENTUM) * self.running_var[c] + BN_MOMENTUM * unbiased;
        }
        self.cache = Some((x_hat, inv_std, x.shape().to_vec()));
        Ok(y)
    }

    pub fn backward(&mut self, gy: &Tensor) -> Result<Tensor> {
        let (x_hat, inv_std, shape) = take_cache(&mut self.cache, "batchnorm2d")?;
        let (n, hw) = (shape[0], shape[2] * shape[3]);
        let m = (n * hw) as f64;
        let mut gx = Tensor::zeros(&shape);
        for c in 0..self.channels {
            let planes: Vec<usize> = (0..n).map(|b| (b * self.channels + c) * hw).collect();
            let (mut sum_g, mut sum_gx) = (0.0, 0.0);
            for &o in &planes {
                for i in o..o + hw {
                    sum_g += gy.data()[i];
                    sum_gx += gy.data()[i] * x_hat[i];
                }
            }
            self.beta.grad[c] += sum_g;
            self.gamma.grad[c] += sum_gx;
            let k = self.gamma.value[c] * inv_std[c] / m;
            for &o in &planes {
                for i in o..o + hw {
                    gx.data_mut()[i] = k * (m * gy.data()[i] - sum_g - x_hat[i] * sum_gx);
                }
            }
        }
        Ok(gx)
    }
}

/// Rectifier; the gate is open at exactly zero.
#[derive(Debug, Clone, Default)]
pub struct Relu {
    cache: Option<Vec<bool>>,
}

impl Relu {
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Tensor::new(x.shape(), x.data().iter().map(|&v| v.max(0.0)).collect())
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.cache = Some(x.data().iter().map(|&v| v >= 0.0).collect());
        self.infer(x)
    }

    pub fn backward(&mut self, gy: &Tensor) -> Result<Tensor> {
        let gate = take_cache(&mut self.cache, "relu")?;
        Tensor::new(gy.shape(), gy.data().iter().zip(&gate).map(|(g, &o)| if o { *g } else { 0.0 }).collect())
    }
}

/// Fully connected layer on `[n, in]` tensors.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_f: usize,
    pub out_f: usize,
    /// `[out, in]`
    pub weight: Param,
    pub bias: Param,
    cache: Option<Tensor>,
}

impl Linear {
    pub fn new(in_f: usize, out_f: usize, rng: &mut impl Rng) -> Self {
        Self::from_weights(in_f, out_f, glorot(rng, in_f, out_f, in_f * out_f), vec![0.0; out_f])
    }

    pub fn from_weights(in_f: usize, out_f: usize, weight: Vec<f64>, bias: Vec<f64>) -> Self {
        Self {
            in_f,
            out_f,
            weight: Param::new(&[out_f, in_f], weight),
            bias: Param::new(&[out_f], bias),
            cache: None,
        }
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x, true)
    }

    /// The map without its bias.
    pub fn linear_part(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x, false)
    }

    fn run(&self, x: &Tensor, with_bias: bool) -> Result<Tensor> {
        expect_rank(x, 2, "linear")?;
        if x.shape()[1] != self.in_f {
            return Err(Error::ShapeMismatch(format!("linear expects {} inputs, got {}", self.in_f, x.shape()[1])));
        }
        let n = x.shape()[0];
        let mut y = Tensor::zeros(&[n, self.out_f]);
        if with_bias {
            for row in y.data_mut().chunks_exact_mut(self.out_f) {
                row.copy_from_slice(&self.bias.value);
            }
        }
        gemm(n, self.in_f, self.out_f, 1.0, x.data(), Op::N, &self.weight.value, Op::T, 1.0, y.data_mut());
        Ok(y)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.infer(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, gy: &Tensor) -> Result<Tensor> {
        let x = take_cache(&mut self.cache, "linear")?;
        let n = x.shape()[0];
        gemm(self.out_f, n, self.in_f, 1.0, gy.data(), Op::T, x.data(), Op::N, 1.0, &mut self.weight.grad);
        for row in gy.data().chunks_exact(self.out_f) {
            for (b, g) in self.bias.grad.iter_mut().zip(row) {
                *b += g;
            }
        }
        let mut gx = Tensor::zeros(&[n, self.in_f]);
        gemm(n, self.out_f, self.in_f, 1.0, gy.data(), Op::N, &self.weight.value, Op::N, 0.0, gx.data_mut());
        Ok(gx)
    }
}

/// Reshape keeping the batch axis; `to` excludes it.
#[derive(Debug, Clone)]
pub struct Reshape {
    pub to: Vec<usize>,
    cache: Option<Vec<usize>>,
}

impl Reshape {
    pub fn new(to: &[usize]) -> Self {
        Self {
            to: to.to_vec(),
            cache: None,
        }
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut shape = vec![x.batch()];
        shape.extend(&self.to);
        x.clone().reshape(&shape)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        self.cache = Some(x.shape().to_vec());
        self.infer(x)
    }

    pub fn backward(&mut self, gy: &Tensor) -> Result<Tensor> {
        let shape = take_cache(&mut self.cache, "reshape")?;
        gy.clone().reshape(&shape)
    }
}

/// Output activation: identity on the position channel, rectifier on the
/// gap channel.
#[derive(Debug, Clone, Default)]
pub struct OutputHead {
    cache: Option<Vec<bool>>,
}

impl OutputHead {
    /// Open/closed state per element: always open on the position channel.
    pub fn gate(shape: &[usize], x: &[f64]) -> Vec<bool> {
        let plane = shape[2] * shape[3];
        x.iter()
            .enumerate()
            .map(|(i, &v)| (i / plane) % shape[1] == 0 || v >= 0.0)
            .collect()
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        expect_rank(x, 4, "output head")?;
        let gate = Self::gate(x.shape(), x.data());
        Tensor::new(x.shape(), x.data().iter().zip(&gate).map(|(&v, &o)| if o { v } else { 0.0 }).collect())
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.infer(x)?;
        self.cache = Some(Self::gate(x.shape(), x.data()));
        Ok(y)
    }

    pub fn backward(&mut self, gy: &Tensor) -> Result<Tensor> {
        let gate = take_cache(&mut self.cache, "output head")?;
        Tensor::new(gy.shape(), gy.data().iter().zip(&gate).map(|(g, &o)| if o { *g } else { 0.0 }).collect())
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv2d(Conv2d),
    ConvTranspose2d(ConvTranspose2d),
    MaxPool2d(MaxPool2d),
    DropBlock(DropBlock),
    BatchNorm2d(BatchNorm2d),
    Relu(Relu),
    Linear(Linear),
    Reshape(Reshape),
    OutputHead(OutputHead),
}

impl Layer {
    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::ConvTranspose2d(_) => "conv_transpose2d",
            Layer::MaxPool2d(_) => "maxpool2d",
            Layer::DropBlock(_) => "dropblock",
            Layer::BatchNorm2d(_) => "batchnorm2d",
            Layer::Relu(_) => "relu",
            Layer::Linear(_) => "linear",
            Layer::Reshape(_) => "reshape",
            Layer::OutputHead(_) => "output_head",
        }
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv2d(l) => l.infer(x),
            Layer::ConvTranspose2d(l) => l.infer(x),
            Layer::MaxPool2d(l) => l.infer(x),
            Layer::DropBlock(l) => l.infer(x),
            Layer::BatchNorm2d(l) => l.infer(x),
            Layer::Relu(l) => l.infer(x),
            Layer::Linear(l) => l.infer(x),
            Layer::Reshape(l) => l.infer(x),
            Layer::OutputHead(l) => l.infer(x),
        }
    }

    pub fn forward(&mut self, x: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
        match self {
            Layer::Conv2d(l) => l.forward(x),
            Layer::ConvTranspose2d(l) => l.forward(x),
            Layer::MaxPool2d(l) => l.forward(x),
            Layer::DropBlock(l) => l.forward(x, rng),
            Layer::BatchNorm2d(l) => l.forward(x),
            Layer::Relu(l) => l.forward(x),
            Layer::Linear(l) => l.forward(x),
            Layer::Reshape(l) => l.forward(x),
            Layer::OutputHead(l) => l.forward(x),
        }
    }

    pub fn backward(&mut self, gy: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv2d(l) => l.backward(gy),
            Layer::ConvTranspose2d(l) => l.backward(gy),
            Layer::MaxPool2d(l) => l.backward(gy),
            Layer::DropBlock(l) => l.backward(gy),
            Layer::BatchNorm2d(l) => l.backward(gy),
            Layer::Relu(l) => l.backward(gy),
            Layer::Linear(l) => l.backward(gy),
            Layer::Reshape(l) => l.backward(gy),
            Layer::OutputHead(l) => l.backward(gy),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Conv2d(l) => vec![&mut l.weight, &mut l.bias],
            Layer::ConvTranspose2d(l) => vec![&mut l.weight, &mut l.bias],
            Layer::BatchNorm2d(l) => vec![&mut l.gamma, &mut l.beta],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            _ => Vec::new(),
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Conv2d(l) => vec![&l.weight, &l.bias],
            Layer::ConvTranspose2d(l) => vec![&l.weight, &l.bias],
            Layer::BatchNorm2d(l) => vec![&l.gamma, &l.beta],
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            _ => Vec::new(),
        }
    }
}

/// Run `layers` in evaluation mode.
pub fn infer_all(layers: &[Layer], x: &Tensor) -> Result<Tensor> {
    let mut h = x.clone();
    for l in layers {
        h = l.infer(&h)?;
    }
    Ok(h)
}

pub fn forward_all(layers: &mut [Layer], x: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
    let mut h = x.clone();
    for l in layers.iter_mut() {
        h = l.forward(&h, rng)?;
    }
    Ok(h)
}

pub fn backward_all(layers: &mut [Layer], gy: &Tensor) -> Result<Tensor> {
    let mut g = gy.clone();
    for l in layers.iter_mut().rev() {
        g = l.backward(&g)?;
    }
    Ok(g)
}
