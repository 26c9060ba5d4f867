//! Layer implementations with cached forward state for reverse-mode gradients.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gemm::{matmul_abt_acc, matmul_acc, matmul_atb_acc};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Forward-pass behaviour of batch normalisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics updated with momentum.
    Train,
    /// Running statistics.
    Eval,
    /// Batch statistics; running statistics replaced by a cumulative average.
    Calibrate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Param<T> {
    pub value: Vec<T>,
    #[serde(skip)]
    pub grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Vec<T>) -> Self {
        let grad = vec![T::zero(); value.len()];
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        if self.grad.len() == self.value.len() {
            self.grad.fill(T::zero());
        } else {
            self.grad = vec![T::zero(); self.value.len()];
        }
    }

    fn grad_mut(&mut self) -> &mut [T] {
        if self.grad.len() != self.value.len() {
            self.grad = vec![T::zero(); self.value.len()];
        }
        &mut self.grad
    }
}

fn he_uniform<T: Scalar, R: Rng>(n: usize, fan_in: usize, rng: &mut R) -> Vec<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| T::lit(rng.random_range(-limit..=limit))).collect()
}

fn glorot_uniform<T: Scalar, R: Rng>(n: usize, fan_in: usize, fan_out: usize, rng: &mut R) -> Vec<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| T::lit(rng.random_range(-limit..=limit))).collect()
}

#[derive(Debug, Clone)]
struct ConvCache<T> {
    cols: Vec<T>,
    n: usize,
    h: usize,
    w: usize,
}

/// 2-D convolution over `(N, C, H, W)` with square kernels, via im2col.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    #[serde(skip)]
    cache: Option<ConvCache<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Param::new(he_uniform(out_channels * fan_in, fan_in, rng)),
            bias: bias.then(|| Param::new(vec![T::zero(); out_channels])),
            cache: None,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.padding - self.kernel) / self.stride + 1,
            (w + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, cols: &mut [T]) {
        let (ho, wo) = self.output_hw(h, w);
        let plane = ho * wo;
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        for c in 0..self.in_channels {
            let xc = &x[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..ho {
                        let iy = (oy * s + ki) as isize - p;
                        let line = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &xc[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * s + kj) as isize - p;
                            *v = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[T], h: usize, w: usize, dx: &mut [T]) {
        let (ho, wo) = self.output_hw(h, w);
        let plane = ho * wo;
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        for c in 0..self.in_channels {
            let dxc = &mut dx[c * h * w..(c + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..ho {
                        let iy = (oy * s + ki) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut dxc[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * s + kj) as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] = dst[ix as usize] + src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, record: bool) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4();
        if c != self.in_channels || x.shape().len() != 4 {
            return Err(Error::ShapeMismatch {
                expected: vec![n, self.in_channels, h, w],
                actual: x.shape().to_vec(),
            });
        }
        let (ho, wo) = self.output_hw(h, w);
        let plane = ho * wo;
        let rows = self.col_rows();
        let per = rows * plane;
        let mut out = Tensor::zeros(vec![n, self.out_channels, ho, wo]);
        let mut cols = vec![T::zero(); if record { per * n } else { per }];
        for i in 0..n {
            let buf = if record { &mut cols[i * per..(i + 1) * per] } else { &mut cols[..] };
            self.im2col(x.sample(i), h, w, buf);
            let o = &mut out.data_mut()[i * self.out_channels * plane..(i + 1) * self.out_channels * plane];
            if let Some(b) = &self.bias {
                for (oc, chunk) in o.chunks_mut(plane).enumerate() {
                    chunk.fill(b.value[oc]);
                }
            }
            matmul_acc(&self.weight.value, buf, o, self.out_channels, rows, plane);
        }
        self.cache = record.then_some(ConvCache { cols, n, h, w });
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Tensor<T>, accumulate: bool, need_dx: bool) -> Option<Tensor<T>> {
        let cache = self.cache.take().expect("conv backward without recorded forward");
        let (n, h, w) = (cache.n, cache.h, cache.w);
        let (ho, wo) = self.output_hw(h, w);
        let plane = ho * wo;
        let rows = self.col_rows();
        let per = rows * plane;
        let oc = self.out_channels;
        if accumulate {
            for i in 0..n {
                let g = &dy.data()[i * oc * plane..(i + 1) * oc * plane];
                matmul_abt_acc(g, &cache.cols[i * per..(i + 1) * per], self.weight.grad_mut(), oc, plane, rows);
                if let Some(b) = &mut self.bias {
                    let bg = b.grad_mut();
                    for (o, chunk) in g.chunks(plane).enumerate() {
                        bg[o] = bg[o] + chunk.iter().copied().sum();
                    }
                }
            }
        }
        if !need_dx {
            return None;
        }
        let mut dx = Tensor::zeros(vec![n, self.in_channels, h, w]);
        let mut dcols = vec![T::zero(); per];
        let in_len = self.in_channels * h * w;
        for i in 0..n {
            dcols.fill(T::zero());
            let g = &dy.data()[i * oc * plane..(i + 1) * oc * plane];
            matmul_atb_acc(&self.weight.value, g, &mut dcols, rows, oc, plane);
            self.col2im(&dcols, h, w, &mut dx.data_mut()[i * in_len..(i + 1) * in_len]);
        }
        Some(dx)
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

#[derive(Debug, Clone)]
struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
    shape: Vec<usize>,
}

/// Per-channel batch normalisation for `(N, C, H, W)` or `(N, F)` inputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct BatchNorm<T> {
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    #[serde(skip)]
    calibration_batches: usize,
    #[serde(skip)]
    cache: Option<BnCache<T>>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            channels,
            momentum: 0.1,
            eps: 1e-5,
            gamma: Param::new(vec![T::one(); channels]),
            beta: Param::new(vec![T::zero(); channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            calibration_batches: 0,
            cache: None,
        }
    }

    pub fn reset_running_stats(&mut self) {
        self.running_mean.fill(T::zero());
        self.running_var.fill(T::one());
        self.calibration_batches = 0;
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode, record: bool) -> Result<Tensor<T>> {
        let (n, c, h, w) = x.dims4();
        if c != self.channels {
            return Err(Error::ShapeMismatch {
                expected: vec![n, self.channels],
                actual: x.shape().to_vec(),
            });
        }
        let spatial = h * w;
        let count = n * spatial;
        let eps = T::lit(self.eps);
        let batch_stats = mode != Mode::Eval;
        let mut inv_std = vec![T::zero(); c];
        let mut mean = vec![T::zero(); c];
        if batch_stats {
            let cnt = T::from_count(count);
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = T::zero();
                for i in 0..n {
                    let base = (i * c + ch) * spatial;
                    s = s + x.data()[base..base + spatial].iter().copied().sum();
                }
                let m = s / cnt;
                let mut v = T::zero();
                for i in 0..n {
                    let base = (i * c + ch) * spatial;
                    for &xv in &x.data()[base..base + spatial] {
                        v = v + (xv - m) * (xv - m);
                    }
                }
                mean[ch] = m;
                var[ch] = v / cnt;
                inv_std[ch] = T::one() / (var[ch] + eps).sqrt();
            }
            let unbias = if count > 1 {
                T::from_count(count) / T::from_count(count - 1)
            } else {
                T::one()
            };
            match mode {
                Mode::Train => {
                    let mom = T::lit(self.momentum);
                    for ch in 0..c {
                        self.running_mean[ch] = (T::one() - mom) * self.running_mean[ch] + mom * mean[ch];
                        self.running_var[ch] = (T::one() - mom) * self.running_var[ch] + mom * var[ch] * unbias;
                    }
                }
                Mode::Calibrate => {
                    self.calibration_batches += 1;
                    let k = T::from_count(self.calibration_batches);
                    for ch in 0..c {
                        self.running_mean[ch] = self.running_mean[ch] + (mean[ch] - self.running_mean[ch]) / k;
                        let uv = var[ch] * unbias;
                        self.running_var[ch] = self.running_var[ch] + (uv - self.running_var[ch]) / k;
                    }
                }
                Mode::Eval => unreachable!(),
            }
        } else {
            for ch in 0..c {
                mean[ch] = self.running_mean[ch];
                inv_std[ch] = T::one() / (self.running_var[ch] + eps).sqrt();
            }
        }
        let mut out = Tensor::zeros(x.shape().to_vec());
        let mut xhat = if record { vec![T::zero(); x.len()] } else { Vec::new() };
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * spatial;
                let (g, b, m, s) = (self.gamma.value[ch], self.beta.value[ch], mean[ch], inv_std[ch]);
                for k in base..base + spatial {
                    let xh = (x.data()[k] - m) * s;
                    if record {
                        xhat[k] = xh;
                    }
                    out.data_mut()[k] = g * xh + b;
                }
            }
        }
        self.cache = record.then(|| BnCache {
            xhat,
            inv_std,
            batch_stats,
            shape: x.shape().to_vec(),
        });
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Tensor<T>, accumulate: bool, need_dx: bool) -> Option<Tensor<T>> {
        let cache = self.cache.take().expect("batch-norm backward without recorded forward");
        let (n, c, h, w) = dy.dims4();
        let spatial = h * w;
        let count = T::from_count(n * spatial);
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * spatial;
                for k in base..base + spatial {
                    sum_dy[ch] = sum_dy[ch] + dy.data()[k];
                    sum_dy_xhat[ch] = sum_dy_xhat[ch] + dy.data()[k] * cache.xhat[k];
                }
            }
        }
        if accumulate {
            let gg = self.gamma.grad_mut();
            for ch in 0..c {
                gg[ch] = gg[ch] + sum_dy_xhat[ch];
            }
            let bg = self.beta.grad_mut();
            for ch in 0..c {
                bg[ch] = bg[ch] + sum_dy[ch];
            }
        }
        if !need_dx {
            return None;
        }
        let mut dx = Tensor::zeros(cache.shape.clone());
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * spatial;
                let g = self.gamma.value[ch];
                let s = cache.inv_std[ch];
                for k in base..base + spatial {
                    dx.data_mut()[k] = if cache.batch_stats {
                        g * s * (dy.data()[k] - sum_dy[ch] / count - cache.xhat[k] * sum_dy_xhat[ch] / count)
                    } else {
                        g * s * dy.data()[k]
                    };
                }
            }
        }
        Some(dx)
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Relu {
    #[serde(skip)]
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>, record: bool) -> Tensor<T> {
        let mut out = x.clone();
        for v in out.data_mut() {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
        self.mask = record.then(|| x.data().iter().map(|&v| v > T::zero()).collect());
        out
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let mask = self.mask.take().expect("relu backward without recorded forward");
        let mut dx = dy.clone();
        for (g, keep) in dx.data_mut().iter_mut().zip(mask) {
            if !keep {
                *g = T::zero();
            }
        }
        dx
    }
}

/// Averages each channel map: `(N, C, H, W) -> (N, C)`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct GlobalAvgPool {
    #[serde(skip)]
    input_shape: Option<Vec<usize>>,
}

impl GlobalAvgPool {
    pub fn forward<T: Scalar>(&mut self, x: &Tensor<T>, record: bool) -> Result<Tensor<T>> {
        if x.shape().len() != 4 {
            return Err(Error::ShapeMismatch {
                expected: vec![0, 0, 0, 0],
                actual: x.shape().to_vec(),
            });
        }
        let (n, c, h, w) = x.dims4();
        let spatial = h * w;
        let denom = T::from_count(spatial);
        let data = x
            .data()
            .chunks(spatial)
            .map(|plane| plane.iter().copied().sum::<T>() / denom)
            .collect();
        self.input_shape = record.then(|| x.shape().to_vec());
        Tensor::new(vec![n, c], data)
    }

    pub fn backward<T: Scalar>(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let shape = self.input_shape.take().expect("pool backward without recorded forward");
        let spatial = shape[2] * shape[3];
        let denom = T::from_count(spatial);
        let mut dx = Tensor::zeros(shape);
        for (plane, &g) in dx.data_mut().chunks_mut(spatial).zip(dy.data()) {
            plane.fill(g / denom);
        }
        dx
    }
}

/// Fully connected layer over `(N, F)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    #[serde(skip)]
    input: Option<Tensor<T>>,
}

impl<T: Scalar> Dense<T> {
    /// He-uniform weights (for layers followed by ReLU).
    pub fn he<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self::with_weights(inputs, outputs, he_uniform(inputs * outputs, inputs, rng))
    }

    /// Glorot-uniform weights (for the output layer).
    pub fn glorot<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self::with_weights(inputs, outputs, glorot_uniform(inputs * outputs, inputs, outputs, rng))
    }

    pub fn with_weights(inputs: usize, outputs: usize, weights: Vec<T>) -> Self {
        assert_eq!(weights.len(), inputs * outputs);
        Dense {
            inputs,
            outputs,
            weight: Param::new(weights),
            bias: Param::new(vec![T::zero(); outputs]),
            input: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, record: bool) -> Result<Tensor<T>> {
        let n = x.batch();
        if x.sample_len() != self.inputs {
            return Err(Error::ShapeMismatch {
                expected: vec![n, self.inputs],
                actual: x.shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(vec![n, self.outputs]);
        for row in out.data_mut().chunks_mut(self.outputs) {
            row.copy_from_slice(&self.bias.value);
        }
        matmul_abt_acc(x.data(), &self.weight.value, out.data_mut(), n, self.inputs, self.outputs);
        self.input = record.then(|| x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, dy: &Tensor<T>, accumulate: bool, need_dx: bool) -> Option<Tensor<T>> {
        let x = self.input.take().expect("dense backward without recorded forward");
        let n = x.batch();
        if accumulate {
            matmul_atb_acc(dy.data(), x.data(), self.weight.grad_mut(), self.outputs, n, self.inputs);
            let bg = self.bias.grad_mut();
            for row in dy.data().chunks(self.outputs) {
                for (b, &g) in bg.iter_mut().zip(row) {
                    *b = *b + g;
                }
            }
        }
        if !need_dx {
            return None;
        }
        let mut dx = Tensor::zeros(x.shape().to_vec());
        matmul_acc(dy.data(), &self.weight.value, dx.data_mut(), n, self.outputs, self.inputs);
        Some(dx)
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Basic two-convolution residual block: `relu(bn(conv(relu(bn(conv(x))))) + shortcut(x))`.
/// The shortcut is a strided 1x1 convolution with batch norm when the shape changes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ResidualBlock<T> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm<T>,
    pub shortcut: Option<(Conv2d<T>, BatchNorm<T>)>,
    #[serde(skip)]
    relu_inner: Relu,
    #[serde(skip)]
    relu_out: Relu,
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn new<R: Rng>(in_channels: usize, out_channels: usize, stride: usize, rng: &mut R) -> Self {
        let shortcut = (stride != 1 || in_channels != out_channels).then(|| {
            (
                Conv2d::new(in_channels, out_channels, 1, stride, 0, false, rng),
                BatchNorm::new(out_channels),
            )
        });
        ResidualBlock {
            conv1: Conv2d::new(in_channels, out_channels, 3, stride, 1, false, rng),
            bn1: BatchNorm::new(out_channels),
            conv2: Conv2d::new(out_channels, out_channels, 3, 1, 1, false, rng),
            bn2: BatchNorm::new(out_channels),
            shortcut,
            relu_inner: Relu::default(),
            relu_out: Relu::default(),
        }
    }

    /// Zeroes the last batch-norm scale so the transform branch outputs zero.
    pub fn zero_init_residual(&mut self) {
        self.bn2.gamma.value.fill(T::zero());
        self.bn2.beta.value.fill(T::zero());
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode, record: bool) -> Result<Tensor<T>> {
        let h = self.conv1.forward(x, record)?;
        let h = self.bn1.forward(&h, mode, record)?;
        let h = self.relu_inner.forward(&h, record);
        let h = self.conv2.forward(&h, record)?;
        let mut h = self.bn2.forward(&h, mode, record)?;
        match &mut self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(x, record)?;
                let s = bn.forward(&s, mode, record)?;
                for (a, b) in h.data_mut().iter_mut().zip(s.data()) {
                    *a = *a + *b;
                }
            }
            None => {
                for (a, b) in h.data_mut().iter_mut().zip(x.data()) {
                    *a = *a + *b;
                }
            }
        }
        Ok(self.relu_out.forward(&h, record))
    }

    pub fn backward(&mut self, dy: &Tensor<T>, accumulate: bool, need_dx: bool) -> Option<Tensor<T>> {
        let d = self.relu_out.backward(dy);
        let g = self.bn2.backward(&d, accumulate, true).expect("dx requested");
        let g = self.conv2.backward(&g, accumulate, true).expect("dx requested");
        let g = self.relu_inner.backward(&g);
        let g = self.bn1.backward(&g, accumulate, true).expect("dx requested");
        let main = self.conv1.backward(&g, accumulate, need_dx);
        let skip = match &mut self.shortcut {
            Some((conv, bn)) => {
                let s = bn.backward(&d, accumulate, true).expect("dx requested");
                conv.backward(&s, accumulate, need_dx)
            }
            None => need_dx.then(|| d.clone()),
        };
        match (main, skip) {
            (Some(mut a), Some(b)) => {
                for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                    *x = *x + *y;
                }
                Some(a)
            }
            _ => None,
        }
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        let mut v = vec![&mut self.bn1, &mut self.bn2];
        if let Some((_, bn)) = &mut self.shortcut {
            v.push(bn);
        }
        v
    }

    fn visit(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.conv1.visit(f);
        self.bn1.visit(f);
        self.conv2.visit(f);
        self.bn2.visit(f);
        if let Some((c, b)) = &self.shortcut {
            c.visit(f);
            b.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv1.visit_mut(f);
        self.bn1.visit_mut(f);
        self.conv2.visit_mut(f);
        self.bn2.visit_mut(f);
        if let Some((c, b)) = &mut self.shortcut {
            c.visit_mut(f);
            b.visit_mut(f);
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    BatchNorm(BatchNorm<T>),
    Relu(Relu),
    Residual(Box<ResidualBlock<T>>),
    GlobalAvgPool(GlobalAvgPool),
    Dense(Dense<T>),
}

impl<T: Scalar> Layer<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::BatchNorm(_) => "batch_norm",
            Layer::Relu(_) => "relu",
            Layer::Residual(_) => "residual",
            Layer::GlobalAvgPool(_) => "global_avg_pool",
            Layer::Dense(_) => "dense",
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode, record: bool) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(l) => l.forward(x, record),
            Layer::BatchNorm(l) => l.forward(x, mode, record),
            Layer::Relu(l) => Ok(l.forward(x, record)),
            Layer::Residual(l) => l.forward(x, mode, record),
            Layer::GlobalAvgPool(l) => l.forward(x, record),
            Layer::Dense(l) => l.forward(x, record),
        }
    }

    pub fn backward(&mut self, dy: &Tensor<T>, accumulate: bool, need_dx: bool) -> Option<Tensor<T>> {
        match self {
            Layer::Conv(l) => l.backward(dy, accumulate, need_dx),
            Layer::BatchNorm(l) => l.backward(dy, accumulate, need_dx),
            Layer::Relu(l) => {
                let dx = l.backward(dy);
                need_dx.then_some(dx)
            }
            Layer::Residual(l) => l.backward(dy, accumulate, need_dx),
            Layer::GlobalAvgPool(l) => {
                let dx = l.backward(dy);
                need_dx.then_some(dx)
            }
            Layer::Dense(l) => l.backward(dy, accumulate, need_dx),
        }
    }

    pub fn has_params(&self) -> bool {
        !matches!(self, Layer::Relu(_) | Layer::GlobalAvgPool(_))
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        match self {
            Layer::Conv(l) => l.visit(f),
            Layer::BatchNorm(l) => l.visit(f),
            Layer::Residual(l) => l.visit(f),
            Layer::Dense(l) => l.visit(f),
            Layer::Relu(_) | Layer::GlobalAvgPool(_) => {}
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match self {
            Layer::Conv(l) => l.visit_mut(f),
            Layer::BatchNorm(l) => l.visit_mut(f),
            Layer::Residual(l) => l.visit_mut(f),
            Layer::Dense(l) => l.visit_mut(f),
            Layer::Relu(_) | Layer::GlobalAvgPool(_) => {}
        }
    }

    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        match self {
            Layer::BatchNorm(b) => vec![b],
            Layer::Residual(r) => r.batch_norms_mut(),
            _ => Vec::new(),
        }
    }

    /// Running statistics, in a fixed order (for hashing and checkpoints).
    pub fn visit_buffers(&self, f: &mut dyn FnMut(&[T])) {
        let mut bn = |b: &BatchNorm<T>| {
            f(&b.running_mean);
            f(&b.running_var);
        };
        match self {
            Layer::BatchNorm(b) => bn(b),
            Layer::Residual(r) => {
                bn(&r.bn1);
                bn(&r.bn2);
                if let Some((_, b)) = &r.shortcut {
                    bn(b);
                }
            }
            _ => {}
        }
    }
}
