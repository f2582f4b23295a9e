//! Experiment configuration: a single TOML document describing data, model
//! sizes, optimizers and seeds. Files are merged over the desk preset, so a
//! config only lists what it changes; unknown keys are rejected.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub classifier: ClassifierConfig,
    pub gan: GanConfig,
    pub pipeline: PipelineConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub train_count: usize,
    pub test_count: usize,
    /// Share of the training split stored as bottom-occluded samples, so the
    /// classifier sees positives for the occlusion attribute.
    pub train_occluded_fraction: f64,
    pub lowres_factor: usize,
    pub priors: AttributePriors,
}

/// Sampling probabilities of the synthetic renderer. Some attributes are
/// conditioned on others so that the visible top of an occluded person
/// carries evidence about the hidden bottom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributePriors {
    pub female: f64,
    pub hat: f64,
    pub backpack: f64,
    pub long_sleeves: f64,
    pub dark_upper: f64,
    pub dark_lower_given_dark_upper: f64,
    pub dark_lower_given_light_upper: f64,
    pub skirt_given_female: f64,
    pub skirt_given_male: f64,
    pub shorts_given_no_skirt: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    /// Backbone stage widths (stem + one residual block per stage).
    pub channels: Vec<usize>,
    pub learning_rate: f64,
    pub decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GanConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    /// Discriminator updates per generator update.
    pub k: usize,
    /// Divides every channel count of the four enhancer networks; 1 gives the
    /// full-width architectures.
    pub width_divisor: usize,
    pub reconstruction: EnhancerConfig,
    pub super_resolution: EnhancerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnhancerConfig {
    pub lambda: f64,
    pub sse_pool: usize,
    pub epochs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Occlusion-down probability above which an image is reconstructed.
    pub trigger: f64,
    /// Binarization threshold for metrics.
    pub threshold: f64,
}

impl Default for AttributePriors {
    fn default() -> Self {
        AttributePriors {
            female: 0.45,
            hat: 0.3,
            backpack: 0.35,
            long_sleeves: 0.5,
            dark_upper: 0.45,
            dark_lower_given_dark_upper: 0.8,
            dark_lower_given_light_upper: 0.3,
            skirt_given_female: 0.7,
            skirt_given_male: 0.03,
            shorts_given_no_skirt: 0.35,
        }
    }
}

impl RunConfig {
    /// CPU-sized defaults: 160×32 images, 2000/500 split, enhancers at 1/8 width,
    /// and training settings tuned to fit the CPU budget.
    pub fn desk() -> Self {
        RunConfig {
            seed: 17,
            data: DataConfig {
                height: 160,
                width: 32,
                train_count: 2000,
                test_count: 500,
                train_occluded_fraction: 0.25,
                lowres_factor: 4,
                priors: AttributePriors::default(),
            },
            classifier: ClassifierConfig {
                channels: vec![16, 32, 64],
                learning_rate: 0.01,
                decay: 1e-6,
                momentum: 0.9,
                batch_size: 8,
                epochs: 6,
            },
            gan: GanConfig {
                learning_rate: 0.002,
                beta1: 0.5,
                beta2: 0.999,
                epsilon: 1e-8,
                batch_size: 8,
                k: 1,
                width_divisor: 8,
                reconstruction: EnhancerConfig { lambda: 0.1, sse_pool: 1, epochs: 20 },
                super_resolution: EnhancerConfig { lambda: 1.0, sse_pool: 1, epochs: 12 },
            },
            pipeline: PipelineConfig { trigger: 0.5, threshold: 0.5 },
        }
    }

    /// Full-size 320×128 images, full-width enhancers and the published
    /// classifier learning rate.
    pub fn full_size() -> Self {
        let mut c = Self::desk();
        c.classifier.learning_rate = 1e-5;
        c.data.height = 320;
        c.data.width = 128;
        c.gan.width_divisor = 1;
        c.gan.reconstruction.sse_pool = 4;
        c.gan.super_resolution.sse_pool = 4;
        c
    }

    /// Parses a TOML document over the desk preset, then applies
    /// `dotted.key=value` overrides.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut base = toml::Value::try_from(Self::desk()).map_err(|e| Error::config(e.to_string()))?;
        let doc: toml::Value = text.parse::<toml::Table>().map(toml::Value::Table).map_err(|e| Error::config(e.to_string()))?;
        let mut unknown = Vec::new();
        merge(&mut base, &doc, "", &mut unknown);
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override `{item}` is not key=value")))?;
            let value = parse_override_value(raw.trim());
            let mut patch = value;
            for part in key.trim().split('.').rev() {
                let mut t = toml::Table::new();
                t.insert(part.to_string(), patch);
                patch = toml::Value::Table(t);
            }
            merge(&mut base, &patch, "", &mut unknown);
        }
        if !unknown.is_empty() {
            return Err(Error::config(format!("unknown config keys: {}", unknown.join(", "))));
        }
        let config: RunConfig = base.try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 over the canonical JSON form; embedded in every checkpoint.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn lowres_dims(&self) -> (usize, usize) {
        (self.data.height / self.data.lowres_factor, self.data.width / self.data.lowres_factor)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        let mut problems = Vec::new();
        if d.height % 10 != 0 {
            problems.push(format!("data.height {} must be divisible by 10 for the part partition", d.height));
        }
        if d.lowres_factor != 4 {
            problems.push(format!("data.lowres_factor must be 4, got {}", d.lowres_factor));
        }
        // Reconstruction net needs /16; super-resolution needs (dim/4) divisible by 8.
        for (name, v) in [("height", d.height), ("width", d.width)] {
            if v % 32 != 0 {
                problems.push(format!("data.{name} {v} must be divisible by 32 (enhancer strides)"));
            }
        }
        if d.train_count < 2 || d.test_count < 2 {
            problems.push("train_count and test_count must be at least 2 (occlusion donors)".into());
        }
        if !(0.0..1.0).contains(&d.train_occluded_fraction) {
            problems.push("data.train_occluded_fraction must be in [0, 1)".into());
        }
        let p = &d.priors;
        for (name, v) in [
            ("female", p.female),
            ("hat", p.hat),
            ("backpack", p.backpack),
            ("long_sleeves", p.long_sleeves),
            ("dark_upper", p.dark_upper),
            ("dark_lower_given_dark_upper", p.dark_lower_given_dark_upper),
            ("dark_lower_given_light_upper", p.dark_lower_given_light_upper),
            ("skirt_given_female", p.skirt_given_female),
            ("skirt_given_male", p.skirt_given_male),
            ("shorts_given_no_skirt", p.shorts_given_no_skirt),
        ] {
            if !(0.0..=1.0).contains(&v) {
                problems.push(format!("data.priors.{name} must be a probability, got {v}"));
            }
        }
        let c = &self.classifier;
        if c.channels.is_empty() || c.channels.contains(&0) {
            problems.push("classifier.channels must be non-empty and positive".into());
        }
        if c.learning_rate <= 0.0 || c.decay < 0.0 || !(0.0..1.0).contains(&c.momentum) || c.batch_size == 0 {
            problems.push("classifier optimizer needs lr > 0, decay >= 0, momentum in [0,1), batch >= 1".into());
        }
        let g = &self.gan;
        if g.learning_rate <= 0.0 || !(0.0..1.0).contains(&g.beta1) || !(0.0..1.0).contains(&g.beta2) || g.epsilon <= 0.0 {
            problems.push("gan optimizer needs lr > 0, betas in [0,1), epsilon > 0".into());
        }
        if g.k < 1 {
            problems.push("gan.k must be >= 1".into());
        }
        if g.batch_size == 0 || g.width_divisor == 0 {
            problems.push("gan.batch_size and gan.width_divisor must be >= 1".into());
        }
        for (name, e, (h, w)) in [
            ("reconstruction", &g.reconstruction, (d.height, d.width)),
            ("super_resolution", &g.super_resolution, (d.height, d.width)),
        ] {
            if e.lambda < 0.0 {
                problems.push(format!("gan.{name}.lambda must be >= 0"));
            }
            if e.sse_pool == 0 || h % e.sse_pool != 0 || w % e.sse_pool != 0 {
                problems.push(format!("gan.{name}.sse_pool {} must divide {h}x{w}", e.sse_pool));
            }
        }
        let pl = &self.pipeline;
        if !(0.0 < pl.trigger && pl.trigger < 1.0) || !(0.0 < pl.threshold && pl.threshold < 1.0) {
            problems.push("pipeline.trigger and pipeline.threshold must be in (0, 1)".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::config(problems.join("; ")))
        }
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Deep-merges `patch` into `base`, recording keys that `base` does not have.
fn merge(base: &mut toml::Value, patch: &toml::Value, path: &str, unknown: &mut Vec<String>) {
    match (base, patch) {
        (toml::Value::Table(b), toml::Value::Table(p)) => {
            for (k, v) in p {
                let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v, &key, unknown),
                    None => unknown.push(key),
                }
            }
        }
        (slot, v) => {
            // Integers are accepted where floats are expected.
            *slot = match (&*slot, v) {
                (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(*i as f64),
                _ => v.clone(),
            };
        }
    }
}
