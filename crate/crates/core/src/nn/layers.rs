//! Layers with cached forward state and exact backward passes.
//!
//! `forward` stores whatever the matching `backward` needs; calling
//! `backward` without a preceding `forward` is a state error. Parameter
//! gradients accumulate into `Param::grad` until cleared.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::optim::Param;
use super::tensor::Tensor4;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

fn missing_forward(layer: &str) -> Error {
    Error::State(format!("{layer}: backward called before forward"))
}

fn kaiming(rng: &mut impl Rng, fan_in: usize, len: usize) -> Vec<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..len).map(|_| normal.sample(rng)).collect()
}

/// Stride-1 convolution (cross-correlation) with odd square kernels and
/// zero padding that preserves the spatial size.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    cache: Option<ConvCache>,
}

/// A borrowed dense matrix with explicit strides.
#[derive(Clone, Copy)]
struct Mat<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    row_stride: isize,
    col_stride: isize,
}

impl<'a> Mat<'a> {
    fn rows(data: &'a [f64], rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols);
        Mat {
            data,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    fn t(self) -> Self {
        Mat {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
            ..self
        }
    }
}

/// `c = a * b + beta * c` with `c` row-major.
fn gemm(a: Mat, b: Mat, c: &mut [f64], beta: f64) {
    assert_eq!(a.cols, b.rows);
    assert_eq!(c.len(), a.rows * b.cols);
    // SAFETY: the strides address exactly the asserted extents of each slice.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr(),
            a.row_stride,
            a.col_stride,
            b.data.as_ptr(),
            b.row_stride,
            b.col_stride,
            beta,
            c.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

/// Dot product over four interleaved partial sums so it vectorizes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[derive(Debug, Clone)]
struct ConvCache {
    shape: [usize; 4],
    cols: Vec<f64>,
}

impl Conv2d {
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if kernel % 2 == 0 || kernel == 0 {
            return Err(Error::shape(format!("kernel size {kernel} must be odd")));
        }
        let fan_in = in_channels * kernel * kernel;
        Ok(Conv2d {
            weight: Param::new(
                format!("{name}.weight"),
                vec![out_channels, in_channels, kernel, kernel],
                kaiming(rng, fan_in, out_channels * fan_in),
            ),
            bias: Param::new(format!("{name}.bias"), vec![out_channels], vec![0.0; out_channels]),
            in_channels,
            out_channels,
            kernel,
            cache: None,
        })
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Writes one sample's patches into `cols`, whose rows hold `stride`
    /// columns for the whole batch; this sample starts at column `offset`.
    fn im2col(&self, x: &[f64], h: usize, w: usize, cols: &mut [f64], stride: usize, offset: usize) {
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let p = h * w;
        for c in 0..self.in_channels {
            let plane = &x[c * p..(c + 1) * p];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &mut cols[((c * k + ki) * k + kj) * stride + offset..][..p];
                    for y in 0..h {
                        let sy = y as isize + ki as isize - pad;
                        for xx in 0..w {
                            let sx = xx as isize + kj as isize - pad;
                            row[y * w + xx] = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                plane[sy as usize * w + sx as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize, dx: &mut [f64], stride: usize, offset: usize) {
        let k = self.kernel;
        let pad = (k / 2) as isize;
        let p = h * w;
        for c in 0..self.in_channels {
            let plane = &mut dx[c * p..(c + 1) * p];
            for ki in 0..k {
                for kj in 0..k {
                    let row = &cols[((c * k + ki) * k + kj) * stride + offset..][..p];
                    for y in 0..h {
                        let sy = y as isize + ki as isize - pad;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for xx in 0..w {
                            let sx = xx as isize + kj as isize - pad;
                            if sx >= 0 && sx < w as isize {
                                plane[sy as usize * w + sx as usize] += row[y * w + xx];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&mut self, x: &Tensor4) -> Result<Tensor4> {
        let (out, cols) = self.run(x)?;
        self.cache = Some(ConvCache {
            shape: x.shape(),
            cols,
        });
        Ok(out)
    }

    /// Forward pass without caching anything for backward.
    pub fn infer(&self, x: &Tensor4) -> Result<Tensor4> {
        self.run(x).map(|(out, _)| out)
    }

    fn run(&self, x: &Tensor4) -> Result<(Tensor4, Vec<f64>)> {
        let [n, c, h, w] = x.shape();
        if c != self.in_channels {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let p = h * w;
        let np = n * p;
        let kr = self.col_rows();
        let mut cols = vec![0.0; kr * np];
        for s in 0..n {
            self.im2col(x.sample(s), h, w, &mut cols, np, s * p);
        }
        let mut yt = vec![0.0; self.out_channels * np];
        for o in 0..self.out_channels {
            yt[o * np..(o + 1) * np].fill(self.bias.value[o]);
        }
        let oc = self.out_channels;
        gemm(Mat::rows(&self.weight.value, oc, kr), Mat::rows(&cols, kr, np), &mut yt, 1.0);
        let mut out = vec![0.0; n * self.out_channels * p];
        for s in 0..n {
            for o in 0..self.out_channels {
                out[(s * self.out_channels + o) * p..][..p].copy_from_slice(&yt[o * np + s * p..][..p]);
            }
        }
        Ok((Tensor4::from_parts([n, self.out_channels, h, w], out), cols))
    }

    pub fn backward(&mut self, dy: &Tensor4) -> Result<Tensor4> {
        let cache = self.cache.as_ref().ok_or_else(|| missing_forward("conv2d"))?;
        let [n, c, h, w] = cache.shape;
        if dy.shape() != [n, self.out_channels, h, w] {
            return Err(Error::shape(format!(
                "conv gradient shape {:?} does not match output",
                dy.shape()
            )));
        }
        let p = h * w;
        let np = n * p;
        let kr = self.col_rows();
        let dyd = dy.data();
        let mut dyt = vec![0.0; self.out_channels * np];
        for s in 0..n {
            for o in 0..self.out_channels {
                dyt[o * np + s * p..][..p].copy_from_slice(&dyd[(s * self.out_channels + o) * p..][..p]);
            }
        }
        let oc = self.out_channels;
        for o in 0..oc {
            self.bias.grad[o] += dyt[o * np..(o + 1) * np].iter().sum::<f64>();
        }
        let dy_mat = Mat::rows(&dyt, oc, np);
        gemm(dy_mat, Mat::rows(&cache.cols, kr, np).t(), &mut self.weight.grad, 1.0);
        let mut dcols = vec![0.0; kr * np];
        gemm(Mat::rows(&self.weight.value, oc, kr).t(), dy_mat, &mut dcols, 0.0);
        let mut dx = vec![0.0; n * c * p];
        for s in 0..n {
            self.col2im(&dcols, h, w, &mut dx[s * c * p..(s + 1) * c * p], np, s * p);
        }
        Ok(Tensor4::from_parts([n, c, h, w], dx))
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }
}

/// Per-channel batch normalization with learned scale and shift.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub state: BatchNormState,
    cache: Option<BnCache>,
}

/// Running statistics used in inference mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
struct BnCache {
    shape: [usize; 4],
    mode: Mode,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl BatchNorm2d {
    pub const MOMENTUM: f64 = 0.99;
    pub const EPS: f64 = 1e-3;

    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(format!("{name}.gamma"), vec![channels], vec![1.0; channels]),
            beta: Param::new(format!("{name}.beta"), vec![channels], vec![0.0; channels]),
            state: BatchNormState {
                running_mean: vec![0.0; channels],
                running_var: vec![1.0; channels],
                momentum: Self::MOMENTUM,
                eps: Self::EPS,
            },
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&mut self, x: &Tensor4, mode: Mode) -> Result<Tensor4> {
        let [n, c, h, w] = x.shape();
        if c != self.channels() {
            return Err(Error::shape(format!(
                "batch norm over {} channels got {c}",
                self.channels()
            )));
        }
        if mode == Mode::Train && n < 2 {
            return Err(Error::invalid("batch norm training needs a batch of at least 2"));
        }
        let p = h * w;
        let m = (n * p) as f64;
        let xd = x.data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let idx = |s: usize| (s * c + ch) * p;
            let (mean, var) = match mode {
                Mode::Train => {
                    let mut sum = 0.0;
                    for s in 0..n {
                        sum += xd[idx(s)..idx(s) + p].iter().sum::<f64>();
                    }
                    let mean = sum / m;
                    let mut sq = 0.0;
                    for s in 0..n {
                        sq += xd[idx(s)..idx(s) + p].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
                    }
                    (mean, sq / m)
                }
                Mode::Infer => (self.state.running_mean[ch], self.state.running_var[ch]),
            };
            let is = 1.0 / (var + self.state.eps).sqrt();
            inv_std[ch] = is;
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            for s in 0..n {
                for i in idx(s)..idx(s) + p {
                    let xh = (xd[i] - mean) * is;
                    xhat[i] = xh;
                    out[i] = g * xh + b;
                }
            }
            if mode == Mode::Train {
                let mo = self.state.momentum;
                self.state.running_mean[ch] = mo * self.state.running_mean[ch] + (1.0 - mo) * mean;
                self.state.running_var[ch] = mo * self.state.running_var[ch] + (1.0 - mo) * var;
            }
        }
        self.cache = Some(BnCache {
            shape: x.shape(),
            mode,
            xhat,
            inv_std,
        });
        Ok(Tensor4::from_parts(x.shape(), out))
    }

    /// Inference-mode forward using the running statistics, without caching.
    pub fn infer(&self, x: &Tensor4) -> Result<Tensor4> {
        let [_, c, h, w] = x.shape();
        if c != self.channels() {
            return Err(Error::shape(format!(
                "batch norm over {} channels got {c}",
                self.channels()
            )));
        }
        let p = h * w;
        let mut out = x.data().to_vec();
        for (k, chunk) in out.chunks_mut(p).enumerate() {
            let ch = k % c;
            let mean = self.state.running_mean[ch];
            let is = 1.0 / (self.state.running_var[ch] + self.state.eps).sqrt();
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            for v in chunk {
                *v = g * ((*v - mean) * is) + b;
            }
        }
        Ok(Tensor4::from_parts(x.shape(), out))
    }

    pub fn backward(&mut self, dy: &Tensor4) -> Result<Tensor4> {
        let cache = self.cache.as_ref().ok_or_else(|| missing_forward("batchnorm"))?;
        if dy.shape() != cache.shape {
            return Err(Error::shape("batch norm gradient shape mismatch"));
        }
        let [n, c, h, w] = cache.shape;
        let p = h * w;
        let m = (n * p) as f64;
        let dyd = dy.data();
        let mut dx = vec![0.0; dyd.len()];
        for ch in 0..c {
            let idx = |s: usize| (s * c + ch) * p;
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for s in 0..n {
                for i in idx(s)..idx(s) + p {
                    sum_dy += dyd[i];
                    sum_dy_xhat += dyd[i] * cache.xhat[i];
                }
            }
            self.gamma.grad[ch] += sum_dy_xhat;
            self.beta.grad[ch] += sum_dy;
            let g = self.gamma.value[ch];
            let is = cache.inv_std[ch];
            match cache.mode {
                Mode::Train => {
                    let k = g * is / m;
                    for s in 0..n {
                        for i in idx(s)..idx(s) + p {
                            dx[i] = k * (m * dyd[i] - sum_dy - cache.xhat[i] * sum_dy_xhat);
                        }
                    }
                }
                Mode::Infer => {
                    for s in 0..n {
                        for i in idx(s)..idx(s) + p {
                            dx[i] = g * is * dyd[i];
                        }
                    }
                }
            }
        }
        Ok(Tensor4::from_parts(cache.shape, dx))
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.gamma, &mut self.beta]
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.gamma, &self.beta]
    }
}

/// `x` for positive inputs, `slope * x` otherwise.
#[derive(Debug, Clone)]
pub struct LeakyRelu {
    slope: f64,
    cache: Option<Tensor4>,
}

impl LeakyRelu {
    pub const DEFAULT_SLOPE: f64 = 0.1;

    pub fn new(slope: f64) -> Result<Self> {
        if !(slope > 0.0 && slope <= 1.0) {
            return Err(Error::invalid(format!("leaky relu slope {slope} not in (0, 1]")));
        }
        Ok(LeakyRelu { slope, cache: None })
    }

    pub fn forward(&mut self, x: &Tensor4) -> Tensor4 {
        let out = leaky_relu(x, self.slope);
        self.cache = Some(x.clone());
        out
    }

    pub fn backward(&mut self, dy: &Tensor4) -> Result<Tensor4> {
        let x = self.cache.as_ref().ok_or_else(|| missing_forward("leaky relu"))?;
        if dy.shape() != x.shape() {
            return Err(Error::shape("leaky relu gradient shape mismatch"));
        }
        let dx = x
            .data()
            .iter()
            .zip(dy.data())
            .map(|(&xv, &d)| if xv > 0.0 { d } else { self.slope * d })
            .collect();
        Ok(Tensor4::from_parts(x.shape(), dx))
    }
}

pub fn leaky_relu(x: &Tensor4, slope: f64) -> Tensor4 {
    let data = x
        .data()
        .iter()
        .map(|&v| if v > 0.0 { v } else { slope * v })
        .collect();
    Tensor4::from_parts(x.shape(), data)
}

/// 2x2 max pooling with stride 2.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2 {
    cache: Option<([usize; 4], Vec<usize>)>,
}

impl MaxPool2 {
    pub fn new() -> Self {
        MaxPool2::default()
    }

    pub fn forward(&mut self, x: &Tensor4) -> Result<Tensor4> {
        let (out, argmax) = Self::run(x)?;
        self.cache = Some((x.shape(), argmax));
        Ok(out)
    }

    pub fn apply(x: &Tensor4) -> Result<Tensor4> {
        Self::run(x).map(|(out, _)| out)
    }

    fn run(x: &Tensor4) -> Result<(Tensor4, Vec<usize>)> {
        let [n, c, h, w] = x.shape();
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!("max pool needs even spatial dims, got {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xd = x.data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * y + dy) * w + 2 * xx + dx;
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        Ok((Tensor4::from_parts([n, c, oh, ow], out), argmax))
    }

    pub fn backward(&mut self, dy: &Tensor4) -> Result<Tensor4> {
        let (shape, argmax) = self.cache.as_ref().ok_or_else(|| missing_forward("max pool"))?;
        if dy.data().len() != argmax.len() {
            return Err(Error::shape("max pool gradient shape mismatch"));
        }
        let mut dx = vec![0.0; shape.iter().product()];
        for (&i, &d) in argmax.iter().zip(dy.data()) {
            dx[i] += d;
        }
        Ok(Tensor4::from_parts(*shape, dx))
    }
}

/// Affine map on flattened samples; output shape `(n, out, 1, 1)`.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: Param,
    pub bias: Param,
    inputs: usize,
    outputs: usize,
    cache: Option<Tensor4>,
}

impl Dense {
    pub fn new(name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Dense {
            weight: Param::new(
                format!("{name}.weight"),
                vec![outputs, inputs],
                kaiming(rng, inputs, inputs * outputs),
            ),
            bias: Param::new(format!("{name}.bias"), vec![outputs], vec![0.0; outputs]),
            inputs,
            outputs,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor4) -> Result<Tensor4> {
        let out = dense_forward(x, &self.weight.value, &self.bias.value, self.inputs, self.outputs)?;
        self.cache = Some(x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Tensor4) -> Result<Tensor4> {
        let x = self.cache.as_ref().ok_or_else(|| missing_forward("dense"))?;
        let n = x.batch();
        if dy.shape() != [n, self.outputs, 1, 1] {
            return Err(Error::shape("dense gradient shape mismatch"));
        }
        let mut dx = vec![0.0; n * self.inputs];
        for s in 0..n {
            let xs = x.sample(s);
            let ds = dy.sample(s);
            let dxs = &mut dx[s * self.inputs..(s + 1) * self.inputs];
            for (o, &d) in ds.iter().enumerate() {
                self.bias.grad[o] += d;
                let grow = &mut self.weight.grad[o * self.inputs..(o + 1) * self.inputs];
                let wrow = &self.weight.value[o * self.inputs..(o + 1) * self.inputs];
                for i in 0..self.inputs {
                    grow[i] += d * xs[i];
                    dxs[i] += d * wrow[i];
                }
            }
        }
        Ok(Tensor4::from_parts(x.shape(), dx))
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }
}

/// `y = W x + b` per sample, with `W` stored `(outputs, inputs)`.
pub fn dense_forward(
    x: &Tensor4,
    weight: &[f64],
    bias: &[f64],
    inputs: usize,
    outputs: usize,
) -> Result<Tensor4> {
    if x.sample_len() != inputs {
        return Err(Error::shape(format!(
            "dense expects {inputs} inputs per sample, got {}",
            x.sample_len()
        )));
    }
    if weight.len() != inputs * outputs || bias.len() != outputs {
        return Err(Error::shape("dense weight/bias size mismatch"));
    }
    let n = x.batch();
    let mut out = Vec::with_capacity(n * outputs);
    for s in 0..n {
        let xs = x.sample(s);
        for o in 0..outputs {
            let wrow = &weight[o * inputs..(o + 1) * inputs];
            out.push(bias[o] + dot(wrow, xs));
        }
    }
    Ok(Tensor4::from_parts([n, outputs, 1, 1], out))
}
