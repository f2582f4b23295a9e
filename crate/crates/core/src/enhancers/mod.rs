//! Encoder–decoder generators and strided-conv discriminators for the
//! de-occlusion (reconstruction) and 4× super-resolution enhancers, plus
//! their pixel, adversarial and discriminator losses.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netblocks::{
    avg_pool, avg_pool_backward, sigmoid, Affine, BatchNorm2d, Conv2d, ConvTranspose2d, GlobalAvgPool, Layer,
    LayerSpec, LeakyRelu, Mode, Network, ParamVisitor, ParamVisitorRef, Relu, Saved, Sequential, Sigmoid,
};
use crate::tensor::{shape_string, Scalar, Tensor};

/// Kernel size of every generator and discriminator convolution.
pub const KERNEL: usize = 5;

/// Probability clamp for the logged adversarial term.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnhancerKind {
    Reconstruction,
    Sr,
}

impl EnhancerKind {
    pub fn name(self) -> &'static str {
        match self {
            EnhancerKind::Reconstruction => "reconstruction",
            EnhancerKind::Sr => "sr",
        }
    }

    pub fn generator_encoder(self) -> &'static [usize] {
        match self {
            EnhancerKind::Reconstruction => &[64, 128, 256, 512],
            EnhancerKind::Sr => &[256, 512, 1024],
        }
    }

    pub fn generator_decoder(self) -> &'static [usize] {
        match self {
            EnhancerKind::Reconstruction => &[256, 128, 64, 32],
            EnhancerKind::Sr => &[512, 256, 256, 128, 128],
        }
    }

    pub fn discriminator_channels(self) -> &'static [usize] {
        match self {
            EnhancerKind::Reconstruction => &[128, 256, 512, 1024],
            EnhancerKind::Sr => &[128, 256, 512, 1024, 2048],
        }
    }

    /// Spatial factor the generator input must be divisible by.
    pub fn input_multiple(self) -> usize {
        1 << self.generator_encoder().len()
    }

    /// Output size over input size along each axis.
    pub fn upscale(self) -> usize {
        (1 << self.generator_decoder().len()) / self.input_multiple()
    }
}

impl fmt::Display for EnhancerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for EnhancerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reconstruction" => Ok(EnhancerKind::Reconstruction),
            "sr" => Ok(EnhancerKind::Sr),
            other => Err(Error::argument(format!("unknown enhancer {other:?}; expected reconstruction or sr"))),
        }
    }
}

fn scaled(c: usize, divisor: usize) -> usize {
    (c / divisor).max(1)
}

fn check_multiple(what: &str, shape: &[usize], multiple: usize) -> Result<()> {
    if shape.len() != 4 || shape[1] != 3 || shape[2] % multiple != 0 || shape[3] % multiple != 0 {
        return Err(Error::config(format!(
            "{what} input {} must be (N, 3, H, W) with H and W divisible by {multiple}",
            shape_string(shape)
        )));
    }
    Ok(())
}

/// Strided-conv encoder (batch norm + LeakyReLU), transposed-conv decoder
/// (batch norm + ReLU) and a final sigmoid conv to RGB.
pub struct Generator<T> {
    kind: EnhancerKind,
    net: Sequential<T>,
    input_multiple: usize,
}

impl<T: Scalar> Generator<T> {
    pub fn new(kind: EnhancerKind, width_divisor: usize, rng: &mut impl Rng) -> Self {
        let enc: Vec<usize> = kind.generator_encoder().iter().map(|&c| scaled(c, width_divisor)).collect();
        let dec: Vec<usize> = kind.generator_decoder().iter().map(|&c| scaled(c, width_divisor)).collect();
        Self::from_schedule(kind, &enc, &dec, rng)
    }

    /// Generator with explicit encoder and decoder widths.
    pub fn from_schedule(kind: EnhancerKind, encoder: &[usize], decoder: &[usize], rng: &mut impl Rng) -> Self {
        let mut layers: Vec<Box<dyn Layer<T>>> = Vec::new();
        let mut c = 3;
        for &out in encoder {
            layers.push(Box::new(Conv2d::new(c, out, KERNEL, 2, false, rng).normed()));
            layers.push(Box::new(BatchNorm2d::new(out)));
            layers.push(Box::new(LeakyRelu::new(out)));
            c = out;
        }
        for &out in decoder {
            layers.push(Box::new(ConvTranspose2d::new(c, out, KERNEL, false, rng).normed()));
            layers.push(Box::new(BatchNorm2d::new(out)));
            layers.push(Box::new(Relu::new(out)));
            c = out;
        }
        layers.push(Box::new(Conv2d::new(c, 3, KERNEL, 1, true, rng)));
        layers.push(Box::new(Sigmoid::new(3)));
        Generator { kind, net: Sequential::new(layers), input_multiple: 1 << encoder.len() }
    }

    pub fn kind(&self) -> EnhancerKind {
        self.kind
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.net.specs()
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Saved<T>)> {
        check_multiple(&format!("{} generator", self.kind), x.shape(), self.input_multiple)?;
        self.net.forward(x, mode)
    }

    pub fn backward(&mut self, saved: &Saved<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        self.net.backward(saved, grad)
    }

    /// Eval-mode output of every layer, for shape inspection.
    pub fn trace(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        check_multiple(&format!("{} generator", self.kind), x.shape(), self.input_multiple)?;
        self.net.trace(x)
    }

    /// Eval-mode enhancement of a batch.
    pub fn enhance(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(x, Mode::Eval)?.0)
    }
}

impl<T: Scalar> Network<T> for Generator<T> {
    fn for_each_param(&mut self, f: &mut ParamVisitor<'_, T>) {
        self.net.visit_params("", f);
    }

    fn for_each_param_ref(&self, f: &mut ParamVisitorRef<'_, T>) {
        self.net.visit_params_ref("", f);
    }
}

/// Fills an occluded or low-resolution batch through the matching generator.
pub fn reconstruct<T: Scalar>(occluded: &Tensor<T>, generator: &Generator<T>) -> Result<Tensor<T>> {
    if generator.kind() != EnhancerKind::Reconstruction {
        return Err(Error::argument("reconstruct needs a reconstruction generator"));
    }
    generator.enhance(occluded)
}

pub fn super_resolve<T: Scalar>(lowres: &Tensor<T>, generator: &Generator<T>) -> Result<Tensor<T>> {
    if generator.kind() != EnhancerKind::Sr {
        return Err(Error::argument("super_resolve needs a super-resolution generator"));
    }
    generator.enhance(lowres)
}

/// Strided convs (LeakyReLU, batch norm on all but the first), global
/// average pooling and one affine unit producing a logit per image.
pub struct Discriminator<T> {
    kind: EnhancerKind,
    net: Sequential<T>,
    height: usize,
    width: usize,
}

impl<T: Scalar> Discriminator<T> {
    /// `height` and `width` are the full-size real-image dims it judges.
    pub fn new(kind: EnhancerKind, width_divisor: usize, height: usize, width: usize, rng: &mut impl Rng) -> Self {
        let channels: Vec<usize> = kind.discriminator_channels().iter().map(|&c| scaled(c, width_divisor)).collect();
        Self::from_schedule(kind, &channels, height, width, rng)
    }

    /// Discriminator with explicit strided-conv widths.
    pub fn from_schedule(kind: EnhancerKind, channels: &[usize], height: usize, width: usize, rng: &mut impl Rng) -> Self {
        let mut layers: Vec<Box<dyn Layer<T>>> = Vec::new();
        let mut c = 3;
        for (i, &out) in channels.iter().enumerate() {
            if i == 0 {
                layers.push(Box::new(Conv2d::new(c, out, KERNEL, 2, true, rng)));
            } else {
                layers.push(Box::new(Conv2d::new(c, out, KERNEL, 2, false, rng).normed()));
                layers.push(Box::new(BatchNorm2d::new(out)));
            }
            layers.push(Box::new(LeakyRelu::new(out)));
            c = out;
        }
        layers.push(Box::new(GlobalAvgPool::new(c)));
        layers.push(Box::new(Affine::new(c, 1, rng)));
        Discriminator { kind, net: Sequential::new(layers), height, width }
    }

    pub fn kind(&self) -> EnhancerKind {
        self.kind
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.net.specs()
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != self.height || s[3] != self.width {
            return Err(Error::Size {
                expected: format!("(N, 3, {}, {})", self.height, self.width),
                actual: shape_string(s),
            });
        }
        Ok(())
    }

    /// Logits `(N, 1)`.
    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Saved<T>)> {
        self.check(x)?;
        self.net.forward(x, mode)
    }

    pub fn backward(&mut self, saved: &Saved<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
        self.net.backward(saved, grad)
    }
}

impl<T: Scalar> Network<T> for Discriminator<T> {
    fn for_each_param(&mut self, f: &mut ParamVisitor<'_, T>) {
        self.net.visit_params("", f);
    }

    fn for_each_param_ref(&self, f: &mut ParamVisitorRef<'_, T>) {
        self.net.visit_params_ref("", f);
    }
}

/// Eval-mode probability that each image is real.
pub fn discriminate<T: Scalar>(image: &Tensor<T>, disc: &Discriminator<T>) -> Result<Vec<f64>> {
    let (logits, _) = disc.forward(image, Mode::Eval)?;
    Ok(logits.data().iter().map(|z| sigmoid(z.to_f64().unwrap())).collect())
}

/// Sum of squared differences between `pool`×`pool` average-pooled images,
/// divided by the batch size. Returns the loss and its gradient w.r.t.
/// `generated`.
pub fn loss_sse<T: Scalar>(generated: &Tensor<T>, target: &Tensor<T>, pool: usize) -> Result<(f64, Tensor<T>)> {
    if generated.shape() != target.shape() || generated.shape().len() != 4 {
        return Err(Error::argument(format!(
            "generated {} and target {} must be equal NCHW shapes",
            shape_string(generated.shape()),
            shape_string(target.shape())
        )));
    }
    if pool == 0 {
        return Err(Error::argument("pool size must be at least 1"));
    }
    let n = generated.shape()[0] as f64;
    let diff = avg_pool(generated, pool)?.zip_map(&avg_pool(target, pool)?, |a, b| a - b);
    let loss = diff.data().iter().map(|d| d.to_f64().unwrap().powi(2)).sum::<f64>() / n;
    let scale = T::lit(2.0 / n);
    let grad = avg_pool_backward(&diff.map(|d| d * scale), pool, generated.shape())?;
    Ok((loss, grad))
}

/// The adversarial term as written: mean of `log(1 − D(G))` over the batch,
/// with probabilities clamped to `[1e-7, 1 − 1e-7]`. Logged, not optimized.
pub fn loss_gen(probs: &[f64]) -> f64 {
    if probs.is_empty() {
        return 0.0;
    }
    probs.iter().map(|p| (1.0 - p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)).ln()).sum::<f64>() / probs.len() as f64
}

/// `Loss_SSE + λ·Loss_gen`.
pub fn loss_r(sse: f64, gen: f64, lambda: f64) -> f64 {
    sse + lambda * gen
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Mean binary cross-entropy of logits against a constant target (1 for
/// real, 0 for generated), with its gradient w.r.t. the logits.
pub fn bce_with_logits<T: Scalar>(logits: &Tensor<T>, target: f64) -> (f64, Tensor<T>) {
    let n = logits.len().max(1) as f64;
    let loss = logits
        .data()
        .iter()
        .map(|z| {
            let z = z.to_f64().unwrap();
            target * softplus(-z) + (1.0 - target) * softplus(z)
        })
        .sum::<f64>();
    let grad = logits.map(|z| T::lit((sigmoid(z.to_f64().unwrap()) - target) / n));
    (loss / n, grad)
}

/// Non-saturating generator objective `mean(−log D(G))` from logits, with
/// gradient. This is what the generator minimizes; it pushes `D(G)` up just
/// as the literal `log(1 − D(G))` term does but does not vanish when the
/// discriminator is confident.
pub fn generator_adversarial<T: Scalar>(logits: &Tensor<T>) -> (f64, Tensor<T>) {
    bce_with_logits(logits, 1.0)
}

/// Values of one generator objective evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GeneratorLoss {
    pub sse: f64,
    /// Literal `log(1 − D(G))` batch mean.
    pub gen: f64,
    /// `sse + λ·gen`.
    pub loss_r: f64,
    /// What gets minimized: `sse + λ·mean(−log D(G))`.
    pub objective: f64,
}

/// Forward through the discriminator on generated images and back to the
/// generated pixels. Returns the losses and `∂objective/∂generated`.
/// Discriminator parameter gradients are accumulated as a side effect and
/// must be zeroed before its own update.
pub fn generator_objective<T: Scalar>(
    generated: &Tensor<T>,
    target: &Tensor<T>,
    disc: &mut Discriminator<T>,
    lambda: f64,
    pool: usize,
) -> Result<(GeneratorLoss, Tensor<T>)> {
    if lambda < 0.0 {
        return Err(Error::argument(format!("lambda {lambda} must be non-negative")));
    }
    let (sse, mut grad) = loss_sse(generated, target, pool)?;
    if lambda == 0.0 {
        return Ok((GeneratorLoss { sse, gen: 0.0, loss_r: sse, objective: sse }, grad));
    }
    let (logits, saved) = disc.forward(generated, Mode::Train)?;
    let probs: Vec<f64> = logits.data().iter().map(|z| sigmoid(z.to_f64().unwrap())).collect();
    let (adv, dlogits) = generator_adversarial(&logits);
    let scale = T::lit(lambda);
    let dimg = disc.backward(&saved, &dlogits.map(|g| g * scale))?;
    grad.add_assign(&dimg);
    let gen = loss_gen(&probs);
    Ok((GeneratorLoss { sse, gen, loss_r: loss_r(sse, gen, lambda), objective: sse + lambda * adv }, grad))
}
