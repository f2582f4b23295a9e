//! Training schedules for the classifier and the two GANs, plus the
//! checkpoint plumbing that makes runs resumable and reproducible.

mod checkpoint;
mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointHeader, ModelMeta, NamedTensor, NetworkKind, RngState, TensorEntry, FORMAT_VERSION, MAGIC};
pub use optim::{Adam, Optimizer, OptimizerKind, OptimizerMeta, Sgd, SlotTensors};

use crate::attrclassifier::Classifier;
use crate::config::RunConfig;
use crate::enhancers::{bce_with_logits, generator_objective, Discriminator, EnhancerKind, Generator};
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::netblocks::{sigmoid, Mode, Network};
use crate::synthgen::{downsample_tensor, occlude, other_index, random_rate, ImageSample, LoadedSet};
use crate::tensor::{shape_string, Tensor};

/// Mean D(fake) below this for `SATURATION_PATIENCE` consecutive batches is
/// reported as discriminator saturation.
pub const SATURATION_LEVEL: f64 = 1e-6;
pub const SATURATION_PATIENCE: usize = 100;

/// Images per chunk when evaluating.
const EVAL_CHUNK: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierEpoch {
    pub epoch: usize,
    pub loss: f64,
    #[serde(rename = "test_mA")]
    pub test_ma: Option<f64>,
    pub learning_rate: f64,
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanEpoch {
    pub epoch: usize,
    pub sse: f64,
    /// Clamped mean log(1 − D(G(x))), logged only.
    pub gen_literal: f64,
    /// The optimized generator objective.
    pub loss_r: f64,
    pub d_loss: f64,
    pub d_real: f64,
    pub d_fake: f64,
    pub d_steps: u64,
    pub g_steps: u64,
    pub warnings: Vec<String>,
}

pub struct ClassifierRun {
    pub model: Classifier<f32>,
    pub history: Vec<ClassifierEpoch>,
    pub checkpoint: Checkpoint,
}

pub struct GanRun {
    pub generator: Generator<f32>,
    pub discriminator: Discriminator<f32>,
    pub history: Vec<GanEpoch>,
    pub generator_checkpoint: Checkpoint,
    pub discriminator_checkpoint: Checkpoint,
}

/// Independent random streams per network, all from the run seed.
fn run_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn check_images(set: &LoadedSet, height: usize, width: usize) -> Result<()> {
    if let Some(s) = set.samples.iter().find(|s| s.image.shape() != [3, height, width]) {
        return Err(Error::Size {
            expected: shape_string(&[3, height, width]),
            actual: format!("{} for {}", shape_string(s.image.shape()), s.id),
        });
    }
    Ok(())
}

fn gather(samples: &[ImageSample], idx: &[usize]) -> Result<Tensor<f32>> {
    let shape = samples[idx[0]].image.shape().to_vec();
    let mut data = Vec::with_capacity(idx.len() * samples[idx[0]].image.len());
    for &i in idx {
        data.extend_from_slice(samples[i].image.data());
    }
    Tensor::from_vec(&[idx.len(), shape[0], shape[1], shape[2]], data)
}

pub fn classifier_meta(config: &RunConfig, attributes: &[String]) -> ModelMeta {
    ModelMeta {
        height: config.data.height,
        width: config.data.width,
        channels: config.classifier.channels.clone(),
        attributes: attributes.to_vec(),
        width_divisor: 0,
    }
}

pub fn enhancer_meta(config: &RunConfig) -> ModelMeta {
    ModelMeta { height: config.data.height, width: config.data.width, width_divisor: config.gan.width_divisor, ..ModelMeta::default() }
}

pub fn generator_kind(kind: EnhancerKind) -> NetworkKind {
    match kind {
        EnhancerKind::Reconstruction => NetworkKind::ReconstructionGenerator,
        EnhancerKind::Sr => NetworkKind::SrGenerator,
    }
}

pub fn discriminator_kind(kind: EnhancerKind) -> NetworkKind {
    match kind {
        EnhancerKind::Reconstruction => NetworkKind::ReconstructionDiscriminator,
        EnhancerKind::Sr => NetworkKind::SrDiscriminator,
    }
}

/// Rebuilds a classifier from its checkpoint.
pub fn load_classifier(ckpt: &Checkpoint) -> Result<Classifier<f32>> {
    ckpt.expect_kind(NetworkKind::Classifier)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Classifier::new(&ckpt.model.channels, ckpt.model.attributes.len(), &mut rng)?;
    ckpt.restore_into(&mut model)?;
    Ok(model)
}

pub fn load_generator(ckpt: &Checkpoint, kind: EnhancerKind) -> Result<Generator<f32>> {
    ckpt.expect_kind(generator_kind(kind))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Generator::new(kind, ckpt.model.width_divisor.max(1), &mut rng);
    ckpt.restore_into(&mut g)?;
    Ok(g)
}

pub fn load_discriminator(ckpt: &Checkpoint, kind: EnhancerKind) -> Result<Discriminator<f32>> {
    ckpt.expect_kind(discriminator_kind(kind))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut d = Discriminator::new(kind, ckpt.model.width_divisor.max(1), ckpt.model.height, ckpt.model.width, &mut rng);
    ckpt.restore_into(&mut d)?;
    Ok(d)
}

/// Probability rows of `model` on every sample of `set`.
pub fn classify_set(model: &Classifier<f32>, samples: &[ImageSample], height: usize, width: usize) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::with_capacity(samples.len());
    let idx: Vec<usize> = (0..samples.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        rows.extend(model.predict_rows(&gather(samples, chunk)?, height, width, EVAL_CHUNK)?);
    }
    Ok(rows)
}

/// Minimizes the weighted BCE with momentum SGD. `on_epoch` sees every
/// epoch record together with a resumable checkpoint.
pub fn train_classifier(
    train: &LoadedSet,
    test: Option<&LoadedSet>,
    config: &RunConfig,
    resume: Option<&Checkpoint>,
    on_epoch: &mut dyn FnMut(&ClassifierEpoch, &Checkpoint) -> Result<()>,
) -> Result<ClassifierRun> {
    let (h, w) = (config.data.height, config.data.width);
    if h % 10 != 0 || h % 16 != 0 {
        return Err(Error::config(format!("image height {h} must be divisible by 10 and 16")));
    }
    if train.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    check_images(train, h, w)?;
    if let Some(t) = test {
        check_images(t, h, w)?;
        if t.schema.names != train.schema.names {
            return Err(Error::Dataset("train and test schemas differ".into()));
        }
    }
    let cc = &config.classifier;
    let hash = config.hash();
    let meta = classifier_meta(config, &train.schema.names);
    let mut rng = run_rng(config.seed, 1);
    let mut model = Classifier::<f32>::new(&cc.channels, train.schema.names.len(), &mut rng)?;
    let mut opt = Sgd::new(cc.learning_rate, cc.decay, cc.momentum);
    let mut start = 0;
    if let Some(ckpt) = resume {
        ckpt.expect_kind(NetworkKind::Classifier)?;
        ckpt.expect_config(&hash)?;
        ckpt.restore_into(&mut model)?;
        ckpt.restore_optimizer(&mut opt)?;
        rng = ckpt.rng.as_ref().ok_or_else(|| Error::Checkpoint("checkpoint has no rng state".into()))?.restore()?;
        start = ckpt.epoch;
    }

    let labels = train.labels();
    let ratios = &train.schema.ratios;
    let mut history = Vec::new();
    let mut checkpoint = Checkpoint::capture(&model, NetworkKind::Classifier, meta.clone(), &hash, start).with_optimizer(&opt).with_rng(&rng);
    for epoch in start..cc.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for idx in order.chunks(cc.batch_size) {
            let x = gather(&train.samples, idx)?;
            let y: Vec<Vec<u8>> = idx.iter().map(|&i| labels[i].clone()).collect();
            model.zero_grad();
            let loss = model.loss_and_grad(&x, &y, ratios)?;
            if !loss.is_finite() {
                let ids: Vec<&str> = idx.iter().map(|&i| train.samples[i].id.as_str()).collect();
                return Err(Error::NonFinite(format!("classifier loss {loss} in epoch {epoch}, batch {:?}", ids)));
            }
            opt.step(&mut model);
            total += loss;
            batches += 1;
        }
        let test_ma = match test {
            Some(t) => {
                let probs = classify_set(&model, &t.samples, h, w)?;
                Some(evaluate(&probs, &t.labels(), &t.schema.names, config.pipeline.threshold)?.mean_accuracy)
            }
            None => None,
        };
        let record = ClassifierEpoch {
            epoch: epoch + 1,
            loss: total / batches as f64,
            test_ma,
            learning_rate: opt.current_rate(),
            steps: opt.steps(),
        };
        checkpoint = Checkpoint::capture(&model, NetworkKind::Classifier, meta.clone(), &hash, epoch + 1)
            .with_optimizer(&opt)
            .with_rng(&rng);
        on_epoch(&record, &checkpoint)?;
        history.push(record);
    }
    Ok(ClassifierRun { model, history, checkpoint })
}

/// Corrupted inputs and clean targets for one batch.
fn gan_batch(
    kind: EnhancerKind,
    clean: &[&ImageSample],
    idx: &[usize],
    occlusion_index: usize,
    lowres_factor: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let owned: Vec<ImageSample> = idx.iter().map(|&i| clean[i].clone()).collect();
    let target = gather(&owned, &(0..owned.len()).collect::<Vec<_>>())?;
    let input = match kind {
        EnhancerKind::Reconstruction => {
            let mut occluded = Vec::with_capacity(idx.len());
            for &i in idx {
                let donor = other_index(clean.len(), i, rng);
                let rate = random_rate(rng);
                occluded.push(occlude(clean[i], clean[donor], rate, occlusion_index)?);
            }
            gather(&occluded, &(0..occluded.len()).collect::<Vec<_>>())?
        }
        EnhancerKind::Sr => downsample_tensor(&target, lowres_factor)?,
    };
    Ok((input, target))
}

fn mean_prob(logits: &Tensor<f32>) -> f64 {
    logits.data().iter().map(|&z| sigmoid(z as f64)).sum::<f64>() / logits.len() as f64
}

/// Alternates one discriminator step and one generator step per batch for
/// `config.gan.k` = 1, or `k` discriminator steps on successive batches
/// before each generator step otherwise. Only clean training images are
/// used; corruptions are drawn fresh every batch.
pub fn train_gan(
    train: &LoadedSet,
    kind: EnhancerKind,
    config: &RunConfig,
    resume: Option<(&Checkpoint, &Checkpoint)>,
    on_epoch: &mut dyn FnMut(&GanEpoch, &Checkpoint, &Checkpoint) -> Result<()>,
) -> Result<GanRun> {
    let (h, w) = (config.data.height, config.data.width);
    check_images(train, h, w)?;
    let clean: Vec<&ImageSample> = train.samples.iter().filter(|s| s.corruption.is_none()).collect();
    if clean.len() < 2 {
        return Err(Error::Dataset("GAN training needs at least two clean training images".into()));
    }
    let gc = &config.gan;
    let ec = match kind {
        EnhancerKind::Reconstruction => &gc.reconstruction,
        EnhancerKind::Sr => &gc.super_resolution,
    };
    let hash = config.hash();
    let meta = enhancer_meta(config);
    let mut rng = run_rng(config.seed, 2 + kind as u64);
    let mut gen = Generator::<f32>::new(kind, gc.width_divisor, &mut rng);
    let mut disc = Discriminator::<f32>::new(kind, gc.width_divisor, h, w, &mut rng);
    let adam = || Adam::new(gc.learning_rate, gc.beta1, gc.beta2, gc.epsilon);
    let (mut opt_g, mut opt_d) = (adam(), adam());
    let mut start = 0;
    if let Some((gk, dk)) = resume {
        for (ck, nk) in [(gk, generator_kind(kind)), (dk, discriminator_kind(kind))] {
            ck.expect_kind(nk)?;
            ck.expect_config(&hash)?;
        }
        gk.restore_into(&mut gen)?;
        gk.restore_optimizer(&mut opt_g)?;
        dk.restore_into(&mut disc)?;
        dk.restore_optimizer(&mut opt_d)?;
        rng = gk.rng.as_ref().ok_or_else(|| Error::Checkpoint("checkpoint has no rng state".into()))?.restore()?;
        start = gk.epoch;
    }
    let snapshot = |gen: &Generator<f32>, disc: &Discriminator<f32>, opt_g: &Adam, opt_d: &Adam, rng: &ChaCha8Rng, epoch| {
        (
            Checkpoint::capture(gen, generator_kind(kind), meta.clone(), &hash, epoch).with_optimizer(opt_g).with_rng(rng),
            Checkpoint::capture(disc, discriminator_kind(kind), meta.clone(), &hash, epoch).with_optimizer(opt_d),
        )
    };

    let occ = train.schema.occlusion_down_index;
    let k = gc.k.max(1);
    let mut history = Vec::new();
    let mut streak = 0usize;
    let (mut gk, mut dk) = snapshot(&gen, &disc, &opt_g, &opt_d, &rng, start);
    for epoch in start..ec.epochs {
        let mut order: Vec<usize> = (0..clean.len()).collect();
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 6];
        let (mut d_batches, mut g_batches) = (0usize, 0usize);
        let mut warnings = Vec::new();
        for (b, idx) in order.chunks(gc.batch_size).enumerate() {
            let (input, target) = gan_batch(kind, &clean, idx, occ, config.data.lowres_factor, &mut rng)?;
            let (fake, saved) = gen.forward(&input, Mode::Train)?;

            disc.zero_grad();
            let (real_logits, sr) = disc.forward(&target, Mode::Train)?;
            let (loss_real, g) = bce_with_logits(&real_logits, 1.0);
            disc.backward(&sr, &g)?;
            let (fake_logits, sf) = disc.forward(&fake, Mode::Train)?;
            let (loss_fake, g) = bce_with_logits(&fake_logits, 0.0);
            disc.backward(&sf, &g)?;
            let d_loss = loss_real + loss_fake;
            if !d_loss.is_finite() {
                return Err(Error::NonFinite(format!("discriminator loss {d_loss} in epoch {epoch}, batch {b}")));
            }
            opt_d.step(&mut disc);
            let d_fake = mean_prob(&fake_logits);
            sums[2] += d_loss;
            sums[3] += mean_prob(&real_logits);
            sums[4] += d_fake;
            d_batches += 1;
            streak = if d_fake < SATURATION_LEVEL { streak + 1 } else { 0 };
            if streak == SATURATION_PATIENCE {
                warnings.push(format!(
                    "discriminator saturated: D(fake) < {SATURATION_LEVEL:e} for {SATURATION_PATIENCE} batches (epoch {}, batch {b})",
                    epoch + 1
                ));
            }

            if (b + 1) % k != 0 {
                continue;
            }
            gen.zero_grad();
            let (loss, grad) = generator_objective(&fake, &target, &mut disc, ec.lambda, ec.sse_pool)?;
            if !loss.objective.is_finite() {
                return Err(Error::NonFinite(format!("generator objective {} in epoch {epoch}, batch {b}", loss.objective)));
            }
            gen.backward(&saved, &grad)?;
            opt_g.step(&mut gen);
            sums[0] += loss.sse;
            sums[1] += loss.gen;
            sums[5] += loss.loss_r;
            g_batches += 1;
        }
        let gd = g_batches.max(1) as f64;
        let dd = d_batches.max(1) as f64;
        let record = GanEpoch {
            epoch: epoch + 1,
            sse: sums[0] / gd,
            gen_literal: sums[1] / gd,
            loss_r: sums[5] / gd,
            d_loss: sums[2] / dd,
            d_real: sums[3] / dd,
            d_fake: sums[4] / dd,
            d_steps: opt_d.steps(),
            g_steps: opt_g.steps(),
            warnings,
        };
        (gk, dk) = snapshot(&gen, &disc, &opt_g, &opt_d, &rng, epoch + 1);
        on_epoch(&record, &gk, &dk)?;
        history.push(record);
    }
    Ok(GanRun { generator: gen, discriminator: disc, history, generator_checkpoint: gk, discriminator_checkpoint: dk })
}

/// Per-image PSNR in dB for images in [0, 1].
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<Vec<f64>> {
    if a.shape() != b.shape() {
        return Err(Error::Size { expected: shape_string(a.shape()), actual: shape_string(b.shape()) });
    }
    let n = a.shape()[0];
    let per = a.len() / n;
    Ok((0..n)
        .map(|i| {
            let mse = a.data()[i * per..(i + 1) * per]
                .iter()
                .zip(&b.data()[i * per..(i + 1) * per])
                .map(|(x, y)| ((x - y) as f64).powi(2))
                .sum::<f64>()
                / per as f64;
            if mse == 0.0 { f64::INFINITY } else { 10.0 * (1.0 / mse).log10() }
        })
        .collect())
}

#[cfg(test)]
mod tests;
