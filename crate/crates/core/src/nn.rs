//! Small convolutional building blocks with hand-derived backward passes.
//!
//! Everything runs in `f64` on the CPU. A [`ConvStack`] is a sequential list of
//! [`Layer`]s; `forward_trace` keeps what `backward` needs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{gemm, Layout, Tensor3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `out × in × k × k`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    /// He-uniform initialisation.
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = (0..out_channels * fan_in)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight,
            bias: vec![0.0; out_channels],
        }
    }

    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        let oh = (height + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (width + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn im2col(&self, x: &Tensor3, oh: usize, ow: usize) -> Vec<f64> {
        let k = self.kernel;
        let n = oh * ow;
        let mut cols = vec![0.0; self.patch_len() * n];
        for c in 0..self.in_channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for r in 0..oh {
                        let ir = (r * self.stride + ki) as isize - self.padding as isize;
                        if ir < 0 || ir >= x.height as isize {
                            continue;
                        }
                        let src_row = c * x.plane() + ir as usize * x.width;
                        for col in 0..ow {
                            let ic = (col * self.stride + kj) as isize - self.padding as isize;
                            if ic >= 0 && (ic as usize) < x.width {
                                dst[r * ow + col] = x.data[src_row + ic as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], shape: (usize, usize, usize), oh: usize, ow: usize) -> Tensor3 {
        let (channels, height, width) = shape;
        let mut dx = Tensor3::zeros(channels, height, width);
        let k = self.kernel;
        let n = oh * ow;
        for c in 0..channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * n..(row + 1) * n];
                    for r in 0..oh {
                        let ir = (r * self.stride + ki) as isize - self.padding as isize;
                        if ir < 0 || ir >= height as isize {
                            continue;
                        }
                        let dst_row = c * height * width + ir as usize * width;
                        for col in 0..ow {
                            let ic = (col * self.stride + kj) as isize - self.padding as isize;
                            if ic >= 0 && (ic as usize) < width {
                                dx.data[dst_row + ic as usize] += src[r * ow + col];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    fn forward_cols(&self, x: &Tensor3) -> (Tensor3, Vec<f64>) {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let (oh, ow) = self.output_size(x.height, x.width);
        let cols = self.im2col(x, oh, ow);
        let n = oh * ow;
        let mut out = Tensor3::zeros(self.out_channels, oh, ow);
        for (o, chunk) in out.data.chunks_mut(n).enumerate() {
            chunk.fill(self.bias[o]);
        }
        gemm(
            1.0,
            &self.weight,
            Layout::row_major(self.out_channels, self.patch_len()),
            &cols,
            Layout::row_major(self.patch_len(), n),
            1.0,
            &mut out.data,
            Layout::row_major(self.out_channels, n),
        );
        (out, cols)
    }

    fn backward_cols(
        &self,
        cols: &[f64],
        in_shape: (usize, usize, usize),
        dout: &Tensor3,
        need_input_grad: bool,
    ) -> (ConvGrad, Option<Tensor3>) {
        let n = dout.plane();
        let p = self.patch_len();
        let mut weight = vec![0.0; self.weight.len()];
        gemm(
            1.0,
            &dout.data,
            Layout::row_major(self.out_channels, n),
            cols,
            Layout::transposed(p, n),
            0.0,
            &mut weight,
            Layout::row_major(self.out_channels, p),
        );
        let bias = dout.data.chunks(n).map(|c| c.iter().sum()).collect();
        let dx = need_input_grad.then(|| {
            let mut dcols = vec![0.0; p * n];
            gemm(
                1.0,
                &self.weight,
                Layout::transposed(self.out_channels, p),
                &dout.data,
                Layout::row_major(self.out_channels, n),
                0.0,
                &mut dcols,
                Layout::row_major(p, n),
            );
            self.col2im(&dcols, in_shape, dout.height, dout.width)
        });
        (ConvGrad { weight, bias }, dx)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Conv(Conv2d),
    Relu,
    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    MaxPool2,
    Sigmoid,
}

enum Cache {
    Conv {
        cols: Vec<f64>,
        in_shape: (usize, usize, usize),
    },
    Relu(Vec<bool>),
    Pool {
        argmax: Vec<usize>,
        in_shape: (usize, usize, usize),
    },
    Sigmoid(Vec<f64>),
}

/// Intermediate state recorded by [`ConvStack::forward_trace`].
pub struct Trace {
    caches: Vec<Cache>,
    pub output: Tensor3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvStack {
    pub layers: Vec<Layer>,
}

/// Gradients for every convolution in a stack, in layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct StackGrad {
    pub convs: Vec<ConvGrad>,
}

impl StackGrad {
    pub fn zeros_like(stack: &ConvStack) -> Self {
        Self {
            convs: stack
                .convs()
                .map(|c| ConvGrad {
                    weight: vec![0.0; c.weight.len()],
                    bias: vec![0.0; c.bias.len()],
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &StackGrad) {
        for (a, b) in self.convs.iter_mut().zip(&other.convs) {
            add_into(&mut a.weight, &b.weight);
            add_into(&mut a.bias, &b.bias);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.convs {
            g.weight.iter_mut().for_each(|v| *v *= factor);
            g.bias.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.convs
            .iter()
            .flat_map(|g| [g.weight.as_slice(), g.bias.as_slice()])
            .collect()
    }
}

pub(crate) fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl ConvStack {
    pub fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            _ => None,
        })
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.convs()
            .flat_map(|c| [c.weight.as_slice(), c.bias.as_slice()])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .filter_map(|l| match l {
                Layer::Conv(c) => Some(c),
                _ => None,
            })
            .flat_map(|c| [c.weight.as_mut_slice(), c.bias.as_mut_slice()])
            .collect()
    }

    pub fn output_shape(&self, channels: usize, height: usize, width: usize) -> (usize, usize, usize) {
        let mut shape = (channels, height, width);
        for layer in &self.layers {
            shape = match layer {
                Layer::Conv(c) => {
                    let (h, w) = c.output_size(shape.1, shape.2);
                    (c.out_channels, h, w)
                }
                Layer::MaxPool2 => (shape.0, shape.1 / 2, shape.2 / 2),
                Layer::Relu | Layer::Sigmoid => shape,
            };
        }
        shape
    }

    pub fn forward(&self, x: &Tensor3) -> Tensor3 {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = match layer {
                Layer::Conv(c) => c.forward_cols(&cur).0,
                Layer::Relu => {
                    cur.data.iter_mut().for_each(|v| *v = v.max(0.0));
                    cur
                }
                Layer::MaxPool2 => max_pool2(&cur).0,
                Layer::Sigmoid => {
                    cur.data.iter_mut().for_each(|v| *v = sigmoid(*v));
                    cur
                }
            };
        }
        cur
    }

    pub fn forward_trace(&self, x: &Tensor3) -> Trace {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = match layer {
                Layer::Conv(c) => {
                    let in_shape = cur.shape();
                    let (out, cols) = c.forward_cols(&cur);
                    caches.push(Cache::Conv { cols, in_shape });
                    out
                }
                Layer::Relu => {
                    let mask = cur.data.iter().map(|v| *v > 0.0).collect();
                    cur.data.iter_mut().for_each(|v| *v = v.max(0.0));
                    caches.push(Cache::Relu(mask));
                    cur
                }
                Layer::MaxPool2 => {
                    let in_shape = cur.shape();
                    let (out, argmax) = max_pool2(&cur);
                    caches.push(Cache::Pool { argmax, in_shape });
                    out
                }
                Layer::Sigmoid => {
                    cur.data.iter_mut().for_each(|v| *v = sigmoid(*v));
                    caches.push(Cache::Sigmoid(cur.data.clone()));
                    cur
                }
            };
        }
        Trace {
            caches,
            output: cur,
        }
    }

    /// Back-propagates `dout` (gradient w.r.t. the trace output).
    pub fn backward(
        &self,
        trace: &Trace,
        dout: &Tensor3,
        need_input_grad: bool,
    ) -> (StackGrad, Option<Tensor3>) {
        let mut grads = Vec::new();
        let mut cur = dout.clone();
        let first_conv = self
            .layers
            .iter()
            .position(|l| matches!(l, Layer::Conv(_)))
            .unwrap_or(0);
        for (idx, (layer, cache)) in self.layers.iter().zip(&trace.caches).enumerate().rev() {
            let keep_going = need_input_grad || idx > first_conv;
            cur = match (layer, cache) {
                (Layer::Conv(c), Cache::Conv { cols, in_shape }) => {
                    let (g, dx) = c.backward_cols(cols, *in_shape, &cur, keep_going);
                    grads.push(g);
                    match dx {
                        Some(dx) => dx,
                        None => Tensor3::zeros(in_shape.0, in_shape.1, in_shape.2),
                    }
                }
                (Layer::Relu, Cache::Relu(mask)) => {
                    for (v, m) in cur.data.iter_mut().zip(mask) {
                        if !m {
                            *v = 0.0;
                        }
                    }
                    cur
                }
                (Layer::MaxPool2, Cache::Pool { argmax, in_shape }) => {
                    let mut dx = Tensor3::zeros(in_shape.0, in_shape.1, in_shape.2);
                    for (g, &src) in cur.data.iter().zip(argmax) {
                        dx.data[src] += g;
                    }
                    dx
                }
                (Layer::Sigmoid, Cache::Sigmoid(out)) => {
                    for (v, s) in cur.data.iter_mut().zip(out) {
                        *v *= s * (1.0 - s);
                    }
                    cur
                }
                _ => unreachable!("trace does not match stack"),
            };
        }
        grads.reverse();
        (StackGrad { convs: grads }, need_input_grad.then_some(cur))
    }
}

fn max_pool2(x: &Tensor3) -> (Tensor3, Vec<usize>) {
    let (oh, ow) = (x.height / 2, x.width / 2);
    let mut out = Tensor3::zeros(x.channels, oh, ow);
    let mut argmax = vec![0; x.channels * oh * ow];
    for c in 0..x.channels {
        for r in 0..oh {
            for col in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let idx = c * x.plane() + (2 * r + dr) * x.width + 2 * col + dc;
                    if x.data[idx] > best {
                        best = x.data[idx];
                        best_idx = idx;
                    }
                }
                let o = c * oh * ow + r * ow + col;
                out.data[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    (out, argmax)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Adam with per-tensor moment buffers, allocated on first use.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) {
        assert_eq!(params.len(), grads.len(), "adam param/grad count");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                p[j] -= self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
            }
        }
    }
}
