//! Differentiable layers with hand-written backward passes.
//!
//! Every layer works on a *group* of NCHW tensors. For most layers the group
//! is just a list processed independently; batch normalization pools its
//! statistics over the whole group, which is how the classifier normalizes
//! its four body regions through one shared backbone.

mod activation;
mod conv;
mod gradcheck;
mod linear;
mod norm;
mod pool;
mod residual;

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

pub use activation::{sigmoid, LeakyRelu, Relu, Sigmoid, LEAKY_SLOPE};
pub use conv::{Conv2d, ConvTranspose2d};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use linear::Affine;
pub use norm::{BatchNorm2d, BN_EPSILON, BN_MOMENTUM};
pub use pool::{avg_pool, avg_pool_backward, AvgPool, GlobalAvgPool};
pub use residual::ResidualBlock;

/// Standard deviation of the truncated normal used for weight init.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Conv,
    StridedConv,
    TransposedConv,
    BatchNorm,
    LeakyRelu,
    Relu,
    Sigmoid,
    GlobalAvgPool,
    AvgPool,
    Affine,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub bias: bool,
    pub has_norm_before_activation: bool,
}

impl LayerSpec {
    pub fn simple(kind: LayerKind, channels: usize) -> Self {
        LayerSpec {
            kind,
            kernel: 1,
            stride: 1,
            in_channels: channels,
            out_channels: channels,
            bias: false,
            has_norm_before_activation: false,
        }
    }

    /// Trainable parameters implied by the spec alone.
    pub fn param_count(&self) -> usize {
        let bias = if self.bias { self.out_channels } else { 0 };
        match self.kind {
            LayerKind::Conv | LayerKind::StridedConv | LayerKind::TransposedConv => {
                self.kernel * self.kernel * self.in_channels * self.out_channels + bias
            }
            LayerKind::BatchNorm => 2 * self.out_channels,
            LayerKind::Affine => self.in_channels * self.out_channels + bias,
            _ => 0,
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            LayerKind::Conv | LayerKind::StridedConv | LayerKind::TransposedConv => write!(
                f,
                "{:?} {}x{} s{} {}->{}",
                self.kind, self.kernel, self.kernel, self.stride, self.in_channels, self.out_channels
            ),
            LayerKind::Affine => write!(f, "Affine {}->{}", self.in_channels, self.out_channels),
            LayerKind::AvgPool => write!(f, "AvgPool {}x{}", self.kernel, self.kernel),
            kind => write!(f, "{kind:?}({})", self.out_channels),
        }
    }
}

pub fn closed_form_param_count(specs: &[LayerSpec]) -> usize {
    specs.iter().map(LayerSpec::param_count).sum()
}

/// A tensor plus its accumulated gradient. Non-trainable buffers (batch-norm
/// running statistics) are params with `trainable == false`; they are saved
/// in checkpoints but skipped by optimizers and gradient checks.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub trainable: bool,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { value, grad, trainable: true }
    }

    pub fn buffer(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { value, grad, trainable: false }
    }

    pub fn truncated_normal(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("positive std");
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let v: f64 = normal.sample(rng);
                if v.abs() <= 2.0 * std {
                    break T::lit(v);
                }
            })
            .collect();
        Param::new(Tensor::from_vec(shape, data).expect("valid init shape"))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }
}

/// Intermediate values a layer keeps from forward for its backward pass.
#[derive(Debug)]
pub struct Saved<T> {
    pub train: bool,
    pub tensors: Vec<Tensor<T>>,
    pub shapes: Vec<Vec<usize>>,
    pub children: Vec<Saved<T>>,
}

impl<T> Saved<T> {
    pub fn new(mode: Mode) -> Self {
        Saved {
            train: mode == Mode::Train,
            tensors: Vec::new(),
            shapes: Vec::new(),
            children: Vec::new(),
        }
    }
}

pub type ParamVisitor<'a, T> = dyn FnMut(&str, &mut Param<T>) + 'a;
pub type ParamVisitorRef<'a, T> = dyn FnMut(&str, &Param<T>) + 'a;

pub trait Layer<T: Scalar>: Send + Sync {
    /// Flat list of the primitive layer specs this layer is built from.
    fn specs(&self) -> Vec<LayerSpec>;

    fn forward_group(&self, xs: &[Tensor<T>], mode: Mode) -> Result<(Vec<Tensor<T>>, Saved<T>)>;

    /// Accumulates parameter gradients and returns input gradients.
    fn backward_group(&mut self, saved: &Saved<T>, grads: &[Tensor<T>]) -> Result<Vec<Tensor<T>>>;

    fn visit_params(&mut self, _prefix: &str, _f: &mut ParamVisitor<'_, T>) {}

    fn visit_params_ref(&self, _prefix: &str, _f: &mut ParamVisitorRef<'_, T>) {}

    fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Saved<T>)> {
        let (mut ys, saved) = self.forward_group(std::slice::from_ref(x), mode)?;
        Ok((ys.pop().expect("one output per input"), saved))
    }

    fn backward(&mut self, saved: &Saved<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let mut gs = self.backward_group(saved, std::slice::from_ref(grad))?;
        Ok(gs.pop().expect("one gradient per output"))
    }
}

pub struct Sequential<T> {
    layers: Vec<Box<dyn Layer<T>>>,
}

impl<T: Scalar> Sequential<T> {
    pub fn new(layers: Vec<Box<dyn Layer<T>>>) -> Self {
        Sequential { layers }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Output of every layer for a single input, in eval mode.
    pub fn trace(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut outs = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(&cur, Mode::Eval)?.0;
            outs.push(cur.clone());
        }
        Ok(outs)
    }
}

impl<T: Scalar> Layer<T> for Sequential<T> {
    fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().flat_map(|l| l.specs()).collect()
    }

    fn forward_group(&self, xs: &[Tensor<T>], mode: Mode) -> Result<(Vec<Tensor<T>>, Saved<T>)> {
        let mut saved = Saved::new(mode);
        let mut cur: Vec<Tensor<T>> = xs.to_vec();
        for layer in &self.layers {
            let (next, s) = layer.forward_group(&cur, mode)?;
            saved.children.push(s);
            cur = next;
        }
        Ok((cur, saved))
    }

    fn backward_group(&mut self, saved: &Saved<T>, grads: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let mut cur = grads.to_vec();
        for (layer, s) in self.layers.iter_mut().zip(&saved.children).rev() {
            cur = layer.backward_group(s, &cur)?;
        }
        Ok(cur)
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_params(&format!("{prefix}{i}."), f);
        }
    }

    fn visit_params_ref(&self, prefix: &str, f: &mut ParamVisitorRef<'_, T>) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit_params_ref(&format!("{prefix}{i}."), f);
        }
    }
}

/// A model whose parameters can be enumerated by name. Optimizers,
/// checkpoints and gradient checks all go through this.
pub trait Network<T: Scalar> {
    fn for_each_param(&mut self, f: &mut ParamVisitor<'_, T>);
    fn for_each_param_ref(&self, f: &mut ParamVisitorRef<'_, T>);

    fn zero_grad(&mut self) {
        self.for_each_param(&mut |_, p| p.zero_grad());
    }

    fn trainable_param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param_ref(&mut |_, p| {
            if p.trainable {
                n += p.value.len();
            }
        });
        n
    }
}

impl<T: Scalar> Network<T> for Sequential<T> {
    fn for_each_param(&mut self, f: &mut ParamVisitor<'_, T>) {
        self.visit_params("", f);
    }

    fn for_each_param_ref(&self, f: &mut ParamVisitorRef<'_, T>) {
        self.visit_params_ref("", f);
    }
}
