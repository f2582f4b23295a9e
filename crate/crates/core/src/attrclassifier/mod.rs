//! Part-based attribute classifier: one shared residual backbone applied to
//! the whole body and three overlapping horizontal parts, a linear scorer per
//! (attribute, region), whole-body score plus the best part score, and a
//! ratio-weighted binary cross-entropy.

use rand::Rng;

use crate::error::{Error, Result};
use crate::netblocks::{
    sigmoid, Affine, BatchNorm2d, Conv2d, GlobalAvgPool, Layer, LayerSpec, Mode, Network, ParamVisitor,
    ParamVisitorRef, Relu, ResidualBlock, Saved, Sequential,
};
use crate::tensor::{shape_string, Scalar, Tensor};

/// Regions in scoring order; index 0 is the whole body.
pub const REGIONS: [&str; 4] = ["body", "head", "upper", "lower"];

/// Clamp applied to predicted probabilities inside the loss.
pub const PROB_CLAMP: f64 = 1e-7;

/// Row ranges `[start, end)` of the four regions for height `h`: the body,
/// blocks 1–4 (head-shoulders), 3–7 (upper body) and 6–10 (lower body) of
/// ten equal blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PartPartition {
    pub body: (usize, usize),
    pub head: (usize, usize),
    pub upper: (usize, usize),
    pub lower: (usize, usize),
}

impl PartPartition {
    pub fn new(h: usize) -> Result<Self> {
        if h == 0 || h % 10 != 0 {
            return Err(Error::config(format!("image height {h} is not divisible into 10 blocks")));
        }
        let b = h / 10;
        Ok(PartPartition { body: (0, h), head: (0, 4 * b), upper: (2 * b, 7 * b), lower: (5 * b, 10 * b) })
    }

    pub fn ranges(&self) -> [(usize, usize); 4] {
        [self.body, self.head, self.upper, self.lower]
    }
}

/// Crops an NCHW batch into (body, head, upper, lower).
pub fn decompose<T: Scalar>(image: &Tensor<T>) -> Result<[Tensor<T>; 4]> {
    if image.shape().len() != 4 {
        return Err(Error::argument(format!("expected an NCHW batch, got {}", shape_string(image.shape()))));
    }
    let p = PartPartition::new(image.shape()[2])?;
    Ok(p.ranges().map(|(a, b)| image.rows(a, b)))
}

/// `Score_i = body_i + max_p part_{p,i}` for `(N, A)` score matrices. Returns
/// the fused scores and, per entry, which part (0..3) won; ties go to the
/// lowest index.
pub fn fuse_scores<T: Scalar>(body: &Tensor<T>, parts: [&Tensor<T>; 3]) -> Result<(Tensor<T>, Vec<u8>)> {
    for p in parts {
        if p.shape() != body.shape() {
            return Err(Error::Size { expected: shape_string(body.shape()), actual: shape_string(p.shape()) });
        }
    }
    let mut winners = Vec::with_capacity(body.len());
    let data = (0..body.len())
        .map(|k| {
            let mut best = 0u8;
            for j in 1..3u8 {
                if parts[j as usize].data()[k] > parts[best as usize].data()[k] {
                    best = j;
                }
            }
            winners.push(best);
            body.data()[k] + parts[best as usize].data()[k]
        })
        .collect();
    Ok((Tensor::from_vec(body.shape(), data)?, winners))
}

/// Ratio-weighted binary cross-entropy on raw `(N, A)` scores, averaged over
/// the batch. Returns the loss and its gradient w.r.t. the scores. Entries
/// whose probability hits the clamp get zero gradient.
pub fn weighted_bce<T: Scalar>(scores: &Tensor<T>, labels: &[Vec<u8>], ratios: &[f64]) -> Result<(f64, Tensor<T>)> {
    let (n, a) = match scores.shape() {
        [n, a] => (*n, *a),
        s => return Err(Error::argument(format!("scores must be (N, A), got {}", shape_string(s)))),
    };
    if labels.len() != n || labels.iter().any(|l| l.len() != a) || ratios.len() != a {
        return Err(Error::argument(format!(
            "scores {} do not match {} label rows / {} ratios",
            shape_string(scores.shape()),
            labels.len(),
            ratios.len()
        )));
    }
    if let Some(r) = ratios.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
        return Err(Error::config(format!("attribute ratio {r} outside (0, 1)")));
    }
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(n * a);
    for (i, row) in labels.iter().enumerate() {
        for (j, &y) in row.iter().enumerate() {
            let s = scores.data()[i * a + j].to_f64().unwrap();
            let raw = sigmoid(s);
            let p = raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            let clamped = p != raw;
            let g = if y == 1 {
                let w = 0.5 / ratios[j];
                loss -= w * p.ln();
                if clamped { 0.0 } else { w * (p - 1.0) }
            } else {
                let w = 0.5 / (1.0 - ratios[j]);
                loss -= w * (1.0 - p).ln();
                if clamped { 0.0 } else { w * p }
            };
            grad.push(T::lit(g * inv_n));
        }
    }
    Ok((loss * inv_n, Tensor::from_vec(&[n, a], grad)?))
}

/// Everything the backward pass needs from one classifier forward.
pub struct ClassifierSaved<T> {
    backbone: Saved<T>,
    heads: Vec<Saved<T>>,
    winners: Vec<u8>,
}

pub struct Classifier<T> {
    backbone: Sequential<T>,
    heads: Vec<Affine<T>>,
    channels: Vec<usize>,
    attributes: usize,
}

impl<T: Scalar> Classifier<T> {
    /// Stem conv (stride 2) then, per stage, a residual block, with a
    /// stride-2 conv between stages; global average pooling gives features
    /// of length `channels.last()`.
    pub fn new(channels: &[usize], attributes: usize, rng: &mut impl Rng) -> Result<Self> {
        if channels.is_empty() || channels.contains(&0) || attributes == 0 {
            return Err(Error::config("classifier needs at least one non-zero stage width and one attribute"));
        }
        let mut layers: Vec<Box<dyn Layer<T>>> = vec![
            Box::new(Conv2d::new(3, channels[0], 3, 2, false, rng).normed()),
            Box::new(BatchNorm2d::new(channels[0])),
            Box::new(Relu::new(channels[0])),
            Box::new(ResidualBlock::new(channels[0], rng)),
        ];
        for w in channels.windows(2) {
            layers.push(Box::new(Conv2d::new(w[0], w[1], 3, 2, false, rng).normed()));
            layers.push(Box::new(BatchNorm2d::new(w[1])));
            layers.push(Box::new(Relu::new(w[1])));
            layers.push(Box::new(ResidualBlock::new(w[1], rng)));
        }
        let c = *channels.last().unwrap();
        layers.push(Box::new(GlobalAvgPool::new(c)));
        let heads = (0..REGIONS.len()).map(|_| Affine::new(c, attributes, rng)).collect();
        Ok(Classifier { backbone: Sequential::new(layers), heads, channels: channels.to_vec(), attributes })
    }

    pub fn attributes(&self) -> usize {
        self.attributes
    }

    pub fn feature_len(&self) -> usize {
        *self.channels.last().unwrap()
    }

    /// Spatial dims of every region must survive this many halvings.
    pub fn downsamples(&self) -> usize {
        self.channels.len()
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        let mut specs = self.backbone.specs();
        for h in &self.heads {
            specs.extend(h.specs());
        }
        specs
    }

    pub fn heads_mut(&mut self) -> &mut [Affine<T>] {
        &mut self.heads
    }

    fn check_region(&self, region: &Tensor<T>) -> Result<()> {
        let step = 1usize << self.downsamples();
        let s = region.shape();
        if s.len() != 4 || s[1] != 3 || s[2] % step != 0 || s[3] % step != 0 {
            return Err(Error::config(format!(
                "region {} must be (N, 3, H, W) with H and W divisible by {step}",
                shape_string(s)
            )));
        }
        Ok(())
    }

    /// Pooled backbone features, `(N, C)` per region, computed jointly so
    /// that batch statistics are shared across the group.
    pub fn region_features(&self, regions: &[Tensor<T>], mode: Mode) -> Result<(Vec<Tensor<T>>, Saved<T>)> {
        for r in regions {
            self.check_region(r)?;
        }
        let (feats, saved) = self.backbone.forward_group(regions, mode)?;
        let c = self.feature_len();
        let feats = feats.into_iter().map(|f| f.reshape(&[regions[0].shape()[0], c])).collect::<Result<_>>()?;
        Ok((feats, saved))
    }

    /// Raw fused scores `(N, A)` for an NCHW batch.
    pub fn forward(&self, image: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, ClassifierSaved<T>)> {
        let regions = decompose(image)?;
        let (feats, backbone) = self.region_features(&regions, mode)?;
        let mut scores = Vec::with_capacity(4);
        let mut heads = Vec::with_capacity(4);
        for (head, f) in self.heads.iter().zip(&feats) {
            let (s, saved) = head.forward(f, mode)?;
            scores.push(s);
            heads.push(saved);
        }
        let (fused, winners) = fuse_scores(&scores[0], [&scores[1], &scores[2], &scores[3]])?;
        Ok((fused, ClassifierSaved { backbone, heads, winners }))
    }

    /// Accumulates parameter gradients for a gradient on the fused scores.
    pub fn backward(&mut self, saved: &ClassifierSaved<T>, grad: &Tensor<T>) -> Result<()> {
        let mut feat_grads = Vec::with_capacity(4);
        for (r, (head, hs)) in self.heads.iter_mut().zip(&saved.heads).enumerate() {
            let g = if r == 0 {
                grad.clone()
            } else {
                let part = (r - 1) as u8;
                let data = grad
                    .data()
                    .iter()
                    .zip(&saved.winners)
                    .map(|(&g, &w)| if w == part { g } else { T::zero() })
                    .collect();
                Tensor::from_vec(grad.shape(), data)?
            };
            let df = head.backward(hs, &g)?;
            let n = df.shape()[0];
            feat_grads.push(df.reshape(&[n, self.channels.last().copied().unwrap(), 1, 1])?);
        }
        self.backbone.backward_group(&saved.backbone, &feat_grads)?;
        Ok(())
    }

    /// Sigmoid probabilities `(N, A)` in eval mode. The input must be
    /// exactly `(N, 3, height, width)`.
    pub fn predict(&self, image: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
        let s = image.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != height || s[3] != width {
            return Err(Error::Size {
                expected: format!("(N, 3, {height}, {width})"),
                actual: shape_string(s),
            });
        }
        let (scores, _) = self.forward(image, Mode::Eval)?;
        Ok(scores.map(sigmoid))
    }

    /// `predict` over `(N, 3, height, width)` in chunks of `chunk` images,
    /// as one probability row per image.
    pub fn predict_rows(&self, images: &Tensor<T>, height: usize, width: usize, chunk: usize) -> Result<Vec<Vec<f64>>> {
        let n = images.shape().first().copied().unwrap_or(0);
        let mut rows = Vec::with_capacity(n);
        for start in (0..n).step_by(chunk.max(1)) {
            let probs = self.predict(&images.batch_range(start, (start + chunk).min(n)), height, width)?;
            let a = probs.shape()[1];
            rows.extend(probs.data().chunks(a).map(|r| r.iter().map(|v| v.to_f64().expect("finite float")).collect()));
        }
        Ok(rows)
    }

    /// One forward/backward on a batch; returns the loss.
    pub fn loss_and_grad(&mut self, image: &Tensor<T>, labels: &[Vec<u8>], ratios: &[f64]) -> Result<f64> {
        let (scores, saved) = self.forward(image, Mode::Train)?;
        let (loss, grad) = weighted_bce(&scores, labels, ratios)?;
        self.backward(&saved, &grad)?;
        Ok(loss)
    }
}

impl<T: Scalar> Network<T> for Classifier<T> {
    fn for_each_param(&mut self, f: &mut ParamVisitor<'_, T>) {
        self.backbone.visit_params("backbone.", f);
        for (name, head) in REGIONS.iter().zip(self.heads.iter_mut()) {
            head.visit_params(&format!("heads.{name}."), f);
        }
    }

    fn for_each_param_ref(&self, f: &mut ParamVisitorRef<'_, T>) {
        self.backbone.visit_params_ref("backbone.", f);
        for (name, head) in REGIONS.iter().zip(self.heads.iter()) {
            head.visit_params_ref(&format!("heads.{name}."), f);
        }
    }
}

#[cfg(test)]
mod tests;
