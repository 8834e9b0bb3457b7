//! Stateful layers and the feature-extraction stack
//! `C1 -> B1 -> M1 -> C2 -> B2 -> M2 -> C3 -> B3 -> M3 -> A1`.
//!
//! Every layer caches what its backward pass needs during `forward` and
//! accumulates parameter gradients until [`LayerStack::zero_grad`].

use std::fmt;

use crate::error::{Error, Result};
use crate::kernels::{self, ArgmaxMap};
use crate::scalar::Scalar;
use crate::tensor::{Dims, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Read-only view of one stored tensor.
#[derive(Debug)]
pub struct NamedTensor<'a, T> {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: &'a [T],
}

/// Mutable view of one learnable tensor together with its accumulated gradient.
pub struct ParamGrad<'a, T> {
    pub name: String,
    pub value: &'a mut [T],
    pub grad: &'a [T],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct ParamCount {
    pub weights: usize,
    pub biases: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.weights + self.biases
    }
}

impl std::ops::Add for ParamCount {
    type Output = ParamCount;

    fn add(self, rhs: Self) -> Self {
        ParamCount {
            weights: self.weights + rhs.weights,
            biases: self.biases + rhs.biases,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvLayer<T> {
    pub name: String,
    pub filters: Tensor4<T>,
    pub bias: Vec<T>,
    pub stride: usize,
    pub pad: usize,
    grad_filters: Tensor4<T>,
    grad_bias: Vec<T>,
    cached_input: Option<Tensor4<T>>,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn new(name: &str, k: usize, c_in: usize, c_out: usize, stride: usize, pad: usize) -> Result<Self> {
        let dims = Dims::new(k, k, c_in, c_out);
        Ok(ConvLayer {
            name: name.to_string(),
            filters: Tensor4::zeros(dims)?,
            bias: vec![T::zero(); c_out],
            stride,
            pad,
            grad_filters: Tensor4::zeros(dims)?,
            grad_bias: vec![T::zero(); c_out],
            cached_input: None,
        })
    }

    pub fn grad_filters(&self) -> &Tensor4<T> {
        &self.grad_filters
    }

    pub fn grad_bias(&self) -> &[T] {
        &self.grad_bias
    }

    fn forward(&mut self, input: &Tensor4<T>) -> Result<Tensor4<T>> {
        let out = kernels::conv2d_forward(input, &self.filters, &self.bias, self.stride, self.pad)
            .map_err(|e| in_layer(&self.name, e))?;
        self.cached_input = Some(input.clone());
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let input = self.cached_input.as_ref().ok_or_else(|| no_forward(&self.name))?;
        let g = kernels::conv2d_backward(input, &self.filters, grad_out, self.stride, self.pad)
            .map_err(|e| in_layer(&self.name, e))?;
        add_into(self.grad_filters.data_mut(), g.filters.data());
        add_into(&mut self.grad_bias, &g.bias);
        Ok(g.input)
    }
}

#[derive(Clone, Debug)]
struct BnCache<T> {
    mode: Mode,
    normalized: Tensor4<T>,
    output: Tensor4<T>,
    inv_std: Vec<T>,
    groups: usize,
}

/// Per-channel batch normalization with learnable affine terms, optionally
/// followed by a ReLU.
#[derive(Clone, Debug)]
pub struct BatchNormLayer<T> {
    pub name: String,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub epsilon: T,
    pub momentum: T,
    pub relu: bool,
    grad_gamma: Vec<T>,
    grad_beta: Vec<T>,
    cache: Option<BnCache<T>>,
}

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel sums over the batch, reduced group by group.
///
/// Each group (a contiguous run of batch items) is summed on its own and the
/// group totals are then added. With two groups the result is invariant under
/// swapping them, which keeps the siamese branches exactly symmetric.
fn grouped_channel_sums(dims: Dims, groups: usize, mut value: impl FnMut(usize) -> f64) -> Vec<f64> {
    let c = dims.c;
    let per_group = dims.n / groups;
    let mut total = vec![0.0f64; c];
    for g in 0..groups {
        let mut acc = vec![0.0f64; c];
        let start = g * per_group * dims.item_len();
        let end = start + per_group * dims.item_len();
        for (j, at) in (start..end).enumerate() {
            acc[j % c] += value(at);
        }
        for (t, a) in total.iter_mut().zip(&acc) {
            *t += *a;
        }
    }
    total
}

impl<T: Scalar> BatchNormLayer<T> {
    pub fn new(name: &str, channels: usize, relu: bool) -> Self {
        BatchNormLayer {
            name: name.to_string(),
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            epsilon: T::of(BN_EPSILON),
            momentum: T::of(BN_MOMENTUM),
            relu,
            grad_gamma: vec![T::zero(); channels],
            grad_beta: vec![T::zero(); channels],
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn grad_gamma(&self) -> &[T] {
        &self.grad_gamma
    }

    pub fn grad_beta(&self) -> &[T] {
        &self.grad_beta
    }

    /// Pre-affine normalized activations of the last forward pass.
    pub fn normalized(&self) -> Option<&Tensor4<T>> {
        self.cache.as_ref().map(|c| &c.normalized)
    }

    fn forward(&mut self, input: &Tensor4<T>, mode: Mode, groups: usize) -> Result<Tensor4<T>> {
        let dims = input.dims();
        let c = self.channels();
        if dims.c != c {
            return Err(Error::shape(format!("{}: expected {c} channels, got input {dims}", self.name)));
        }
        let groups = groups.max(1);
        if !dims.n.is_multiple_of(groups) {
            return Err(Error::shape(format!(
                "{}: batch of {} does not split into {groups} equal groups",
                self.name, dims.n
            )));
        }
        let x = input.data();
        let (mean, var): (Vec<T>, Vec<T>) = match mode {
            Mode::Train => {
                let count = (dims.n * dims.h * dims.w) as f64;
                let mean = grouped_channel_sums(dims, groups, |at| x[at].as_f64())
                    .into_iter()
                    .map(|s| s / count)
                    .collect::<Vec<_>>();
                let sq = grouped_channel_sums(dims, groups, |at| {
                    let d = x[at].as_f64() - mean[at % c];
                    d * d
                });
                let var: Vec<f64> = sq.iter().map(|s| s / count).collect();
                let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                let m = self.momentum;
                for k in 0..c {
                    self.running_mean[k] = (T::one() - m) * self.running_mean[k] + m * T::of(mean[k]);
                    self.running_var[k] = (T::one() - m) * self.running_var[k] + m * T::of(var[k] * unbiased);
                }
                (mean.into_iter().map(T::of).collect(), var.into_iter().map(T::of).collect())
            }
            Mode::Infer => (self.running_mean.clone(), self.running_var.clone()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + self.epsilon).sqrt()).collect();
        let mut normalized = Tensor4::zeros(dims)?;
        let mut output = Tensor4::zeros(dims)?;
        for (at, ((n, o), &v)) in normalized
            .data_mut()
            .iter_mut()
            .zip(output.data_mut().iter_mut())
            .zip(x)
            .enumerate()
        {
            let k = at % c;
            *n = (v - mean[k]) * inv_std[k];
            let y = self.gamma[k] * *n + self.beta[k];
            *o = if self.relu && y <= T::zero() { T::zero() } else { y };
        }
        let out = output.clone();
        self.cache = Some(BnCache {
            mode,
            normalized,
            output,
            inv_std,
            groups,
        });
        Ok(out)
    }

    fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let cache = self.cache.as_ref().ok_or_else(|| no_forward(&self.name))?;
        let dims = cache.normalized.dims();
        if grad_out.dims() != dims {
            return Err(Error::shape(format!(
                "{}: grad_out {} does not match forward output {dims}",
                self.name,
                grad_out.dims()
            )));
        }
        let c = dims.c;
        let xhat = cache.normalized.data();
        let y = cache.output.data();
        let relu = self.relu;
        // gradient w.r.t. the affine output (before the ReLU)
        let dy: Vec<T> = grad_out
            .data()
            .iter()
            .zip(y)
            .map(|(&g, &o)| if relu && o <= T::zero() { T::zero() } else { g })
            .collect();
        let dbeta = grouped_channel_sums(dims, cache.groups, |at| dy[at].as_f64());
        let dgamma = grouped_channel_sums(dims, cache.groups, |at| (dy[at] * xhat[at]).as_f64());
        let mut grad_input = Tensor4::zeros(dims)?;
        match cache.mode {
            Mode::Train => {
                let count = T::of((dims.n * dims.h * dims.w) as f64);
                for (at, dx) in grad_input.data_mut().iter_mut().enumerate() {
                    let k = at % c;
                    let scale = self.gamma[k] * cache.inv_std[k] / count;
                    *dx = scale * (count * dy[at] - T::of(dbeta[k]) - xhat[at] * T::of(dgamma[k]));
                }
            }
            Mode::Infer => {
                for (at, dx) in grad_input.data_mut().iter_mut().enumerate() {
                    let k = at % c;
                    *dx = dy[at] * self.gamma[k] * cache.inv_std[k];
                }
            }
        }
        for k in 0..c {
            self.grad_gamma[k] += T::of(dgamma[k]);
            self.grad_beta[k] += T::of(dbeta[k]);
        }
        Ok(grad_input)
    }
}

#[derive(Clone, Debug)]
pub struct MaxPoolLayer {
    pub name: String,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<ArgmaxMap>,
}

impl MaxPoolLayer {
    pub fn new(name: &str, k: usize, stride: usize, pad: usize) -> Self {
        MaxPoolLayer {
            name: name.to_string(),
            k,
            stride,
            pad,
            cache: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AvgPoolLayer {
    pub name: String,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    cache: Option<Dims>,
}

impl AvgPoolLayer {
    pub fn new(name: &str, kh: usize, kw: usize, stride: usize) -> Self {
        AvgPoolLayer {
            name: name.to_string(),
            kh,
            kw,
            stride,
            cache: None,
        }
    }
}

#[derive(Clone, Debug)]
pub enum Layer<T> {
    Conv(ConvLayer<T>),
    BatchNorm(BatchNormLayer<T>),
    MaxPool(MaxPoolLayer),
    AvgPool(AvgPoolLayer),
}

impl<T: Scalar> Layer<T> {
    pub fn name(&self) -> &str {
        match self {
            Layer::Conv(l) => &l.name,
            Layer::BatchNorm(l) => &l.name,
            Layer::MaxPool(l) => &l.name,
            Layer::AvgPool(l) => &l.name,
        }
    }

    /// `groups` partitions the batch for batch-norm statistics; see
    /// [`LayerStack::forward_grouped`].
    pub fn forward(&mut self, input: &Tensor4<T>, mode: Mode, groups: usize) -> Result<Tensor4<T>> {
        match self {
            Layer::Conv(l) => l.forward(input),
            Layer::BatchNorm(l) => l.forward(input, mode, groups),
            Layer::MaxPool(l) => {
                let (out, arg) =
                    kernels::maxpool_forward(input, l.k, l.k, l.stride, l.pad).map_err(|e| in_layer(&l.name, e))?;
                l.cache = Some(arg);
                Ok(out)
            }
            Layer::AvgPool(l) => {
                let out = kernels::avgpool_forward(input, l.kh, l.kw, l.stride).map_err(|e| in_layer(&l.name, e))?;
                l.cache = Some(input.dims());
                Ok(out)
            }
        }
    }

    pub fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        match self {
            Layer::Conv(l) => l.backward(grad_out),
            Layer::BatchNorm(l) => l.backward(grad_out),
            Layer::MaxPool(l) => {
                let arg = l.cache.as_ref().ok_or_else(|| no_forward(&l.name))?;
                kernels::maxpool_backward(arg, grad_out).map_err(|e| in_layer(&l.name, e))
            }
            Layer::AvgPool(l) => {
                let dims = l.cache.ok_or_else(|| no_forward(&l.name))?;
                kernels::avgpool_backward(grad_out, l.kh, l.kw, l.stride, dims).map_err(|e| in_layer(&l.name, e))
            }
        }
    }

    pub fn zero_grad(&mut self) {
        match self {
            Layer::Conv(l) => {
                l.grad_filters.data_mut().fill(T::zero());
                l.grad_bias.fill(T::zero());
            }
            Layer::BatchNorm(l) => {
                l.grad_gamma.fill(T::zero());
                l.grad_beta.fill(T::zero());
            }
            Layer::MaxPool(_) | Layer::AvgPool(_) => {}
        }
    }

    pub fn param_count(&self) -> ParamCount {
        match self {
            Layer::Conv(l) => ParamCount {
                weights: l.filters.data().len(),
                biases: l.bias.len(),
            },
            Layer::BatchNorm(l) => ParamCount {
                weights: l.gamma.len(),
                biases: l.beta.len(),
            },
            Layer::MaxPool(_) | Layer::AvgPool(_) => ParamCount::default(),
        }
    }

    /// Output dims for a given input, without running the layer.
    pub fn output_dims(&self, input: Dims) -> Result<Dims> {
        let fit = |len, k, s, p| {
            kernels::window_out(len, k, s, p)
                .ok_or_else(|| Error::shape(format!("{}: window does not fit input {input}", self.name())))
        };
        match self {
            Layer::Conv(l) => {
                let f = l.filters.dims();
                if f.w != input.c {
                    return Err(Error::shape(format!("{}: filters {f} do not match input {input}", l.name)));
                }
                Ok(Dims::new(input.n, fit(input.h, f.n, l.stride, l.pad)?, fit(input.w, f.h, l.stride, l.pad)?, f.c))
            }
            Layer::BatchNorm(_) => Ok(input),
            Layer::MaxPool(l) => Ok(Dims::new(
                input.n,
                fit(input.h, l.k, l.stride, l.pad)?,
                fit(input.w, l.k, l.stride, l.pad)?,
                input.c,
            )),
            Layer::AvgPool(l) => Ok(Dims::new(
                input.n,
                fit(input.h, l.kh, l.stride, 0)?,
                fit(input.w, l.kw, l.stride, 0)?,
                input.c,
            )),
        }
    }

    /// Every stored tensor, learnable or not, in checkpoint order.
    pub fn tensors(&self) -> Vec<NamedTensor<'_, T>> {
        let named = |suffix: &str, dims: Vec<usize>, data| NamedTensor {
            name: format!("{}.{suffix}", self.name()),
            dims,
            data,
        };
        match self {
            Layer::Conv(l) => vec![
                named("filters", l.filters.dims().as_array().to_vec(), l.filters.data()),
                named("bias", vec![l.bias.len()], &l.bias),
            ],
            Layer::BatchNorm(l) => {
                let c = vec![l.channels()];
                vec![
                    named("gamma", c.clone(), &l.gamma),
                    named("beta", c.clone(), &l.beta),
                    named("running_mean", c.clone(), &l.running_mean),
                    named("running_var", c, &l.running_var),
                ]
            }
            Layer::MaxPool(_) | Layer::AvgPool(_) => Vec::new(),
        }
    }

    /// Mutable storage in the same order as [`Layer::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        match self {
            Layer::Conv(l) => vec![l.filters.data_mut(), &mut l.bias],
            Layer::BatchNorm(l) => vec![&mut l.gamma, &mut l.beta, &mut l.running_mean, &mut l.running_var],
            Layer::MaxPool(_) | Layer::AvgPool(_) => Vec::new(),
        }
    }

    /// Learnable tensors paired with their gradients.
    pub fn params_mut(&mut self) -> Vec<ParamGrad<'_, T>> {
        match self {
            Layer::Conv(l) => vec![
                ParamGrad {
                    name: format!("{}.filters", l.name),
                    value: l.filters.data_mut(),
                    grad: l.grad_filters.data(),
                },
                ParamGrad {
                    name: format!("{}.bias", l.name),
                    value: &mut l.bias,
                    grad: &l.grad_bias,
                },
            ],
            Layer::BatchNorm(l) => vec![
                ParamGrad {
                    name: format!("{}.gamma", l.name),
                    value: &mut l.gamma,
                    grad: &l.grad_gamma,
                },
                ParamGrad {
                    name: format!("{}.beta", l.name),
                    value: &mut l.beta,
                    grad: &l.grad_beta,
                },
            ],
            Layer::MaxPool(_) | Layer::AvgPool(_) => Vec::new(),
        }
    }
}

/// Geometry of a feature-extraction stack.
#[derive(Clone, Debug, PartialEq)]
pub struct StackConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub input_c: usize,
    pub channels: [usize; 3],
    pub conv_kernel: usize,
    pub pool_kernel: usize,
    pub pool_stride: usize,
    pub pool_pad: usize,
}

pub const IMAGE_HEIGHT: usize = 128;
pub const IMAGE_WIDTH: usize = 48;
pub const BASE_CHANNELS: [usize; 3] = [32, 64, 128];

impl StackConfig {
    /// The 128x48 RGB stack, channel widths scaled by `channel_multiplier`.
    pub fn standard(channel_multiplier: f64) -> Self {
        let scale = |c: usize| ((c as f64 * channel_multiplier).round() as usize).max(1);
        StackConfig {
            input_h: IMAGE_HEIGHT,
            input_w: IMAGE_WIDTH,
            input_c: 3,
            channels: BASE_CHANNELS.map(scale),
            conv_kernel: 3,
            pool_kernel: 3,
            pool_stride: 2,
            pool_pad: 1,
        }
    }

    /// Shrunk stack for gradient checks: `h x w` input, tiny channel counts.
    pub fn tiny(h: usize, w: usize, channels: [usize; 3]) -> Self {
        StackConfig {
            input_h: h,
            input_w: w,
            input_c: 3,
            channels,
            ..StackConfig::standard(1.0)
        }
    }

    pub fn input_dims(&self, n: usize) -> Dims {
        Dims::new(n, self.input_h, self.input_w, self.input_c)
    }
}

#[derive(Clone, Debug)]
pub struct LayerStack<T> {
    config: StackConfig,
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> LayerStack<T> {
    pub fn new(config: StackConfig) -> Result<Self> {
        let k = config.conv_kernel;
        let pad = k / 2;
        let mut layers = Vec::new();
        let mut c_in = config.input_c;
        for (i, &c_out) in config.channels.iter().enumerate() {
            let n = i + 1;
            layers.push(Layer::Conv(ConvLayer::new(&format!("C{n}"), k, c_in, c_out, 1, pad)?));
            layers.push(Layer::BatchNorm(BatchNormLayer::new(&format!("B{n}"), c_out, true)));
            layers.push(Layer::MaxPool(MaxPoolLayer::new(
                &format!("M{n}"),
                config.pool_kernel,
                config.pool_stride,
                config.pool_pad,
            )));
            c_in = c_out;
        }
        // horizontal average over the full remaining width
        let mut dims = config.input_dims(1);
        for l in &layers {
            dims = l.output_dims(dims)?;
        }
        layers.push(Layer::AvgPool(AvgPoolLayer::new("A1", 1, dims.w, 1)));
        Ok(LayerStack { config, layers })
    }

    pub fn config(&self) -> &StackConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    /// Output dims after each layer for an `n`-item batch.
    pub fn shape_trace(&self, n: usize) -> Result<Vec<(String, Dims)>> {
        let mut dims = self.config.input_dims(n);
        let mut trace = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            dims = l.output_dims(dims)?;
            trace.push((l.name().to_string(), dims));
        }
        Ok(trace)
    }

    pub fn output_dims(&self, n: usize) -> Dims {
        self.shape_trace(n)
            .ok()
            .and_then(|t| t.last().map(|(_, d)| *d))
            .expect("stack geometry validated at construction")
    }

    /// Length of the flattened per-image feature.
    pub fn feature_dim(&self) -> usize {
        self.output_dims(1).item_len()
    }

    pub fn forward(&mut self, input: &Tensor4<T>, mode: Mode) -> Result<Tensor4<T>> {
        self.forward_grouped(input, mode, 1)
    }

    /// Forward pass where the batch is `groups` equal contiguous parts whose
    /// batch-norm statistics are pooled.
    pub fn forward_grouped(&mut self, input: &Tensor4<T>, mode: Mode, groups: usize) -> Result<Tensor4<T>> {
        let expected = self.config.input_dims(input.dims().n);
        if input.dims() != expected {
            return Err(Error::shape(format!(
                "stack expects {expected} input, got {}",
                input.dims()
            )));
        }
        let mut x = input.clone();
        for l in &mut self.layers {
            x = l.forward(&x, mode, groups)?;
        }
        Ok(x)
    }

    pub fn backward(&mut self, grad_out: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut g = grad_out.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g)?;
        }
        Ok(g)
    }

    pub fn zero_grad(&mut self) {
        self.layers.iter_mut().for_each(Layer::zero_grad);
    }

    pub fn count_params(&self) -> Vec<(String, ParamCount)> {
        self.layers
            .iter()
            .map(|l| (l.name().to_string(), l.param_count()))
            .collect()
    }
}

impl fmt::Display for StackConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{}x{} -> channels {:?}",
            self.input_h, self.input_w, self.input_c, self.channels
        )
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

fn in_layer(name: &str, e: Error) -> Error {
    match e {
        Error::Shape(msg) => Error::Shape(format!("{name}: {msg}")),
        other => other,
    }
}

fn no_forward(name: &str) -> Error {
    Error::State(format!("{name}: backward called before forward"))
}
