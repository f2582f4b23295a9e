//! Procedural synthetic-person dataset: rendering, corruption operators
//! (bottom occlusion, 4× area downsampling, bilinear upsampling) and the
//! on-disk manifest format.

mod corrupt;
mod dataset;
mod render;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use corrupt::{
    bilinear_upsample, bilinear_upsample_tensor, downsample, downsample_tensor, occlude, occluded_rows,
    MAX_OCCLUSION_RATE, MIN_OCCLUSION_RATE,
};
pub use dataset::{
    build_dataset, load_manifest, read_records, read_schema, stack_images, DatasetSummary, LoadedSet, ManifestRecord,
    Variant, MANIFEST_FILE, SCHEMA_FILE,
};
pub(crate) use dataset::{other_index, random_rate};
pub use render::{marginal_priors, render_person, PersonTraits};

/// Attributes the renderer can produce, in label order. The last one is the
/// occlusion attribute, which rendering always leaves at 0.
pub const CANDIDATE_ATTRIBUTES: [&str; 9] = [
    "female",
    "hat",
    "backpack",
    "long_sleeves",
    "dark_upper",
    "dark_lower",
    "skirt",
    "shorts",
    OCCLUSION_DOWN,
];

pub const OCCLUSION_DOWN: &str = "occlusion_down";

/// Attributes rarer than this in the training split are dropped from the schema.
pub const MIN_POSITIVE_RATIO: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Corruption {
    None,
    Occluded { rate: f64 },
    Lowres { factor: usize },
}

impl Corruption {
    pub fn is_none(&self) -> bool {
        matches!(self, Corruption::None)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    /// `(3, H, W)` RGB in `[0, 1]`.
    pub image: Tensor<f32>,
    /// One 0/1 entry per schema attribute.
    pub labels: Vec<u8>,
    pub corruption: Corruption,
}

impl ImageSample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// The image as a one-element NCHW batch.
    pub fn batch(&self) -> Tensor<f32> {
        let (h, w) = (self.height(), self.width());
        self.image.clone().reshape(&[1, 3, h, w]).expect("3-channel image")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub names: Vec<String>,
    pub ratios: Vec<f64>,
    pub occlusion_down_index: usize,
}

impl AttributeSchema {
    /// Ratios `positives_i / N` over the given label rows, keeping only
    /// attributes with `0.01 < r_i < 0.99`. Returns the schema and the kept
    /// candidate indices.
    pub fn from_labels(names: &[&str], rows: &[Vec<u8>]) -> Result<(Self, Vec<usize>)> {
        if rows.is_empty() {
            return Err(Error::Dataset("cannot compute attribute ratios from an empty split".into()));
        }
        let n = rows.len() as f64;
        let mut kept = Vec::new();
        let mut schema = AttributeSchema { names: Vec::new(), ratios: Vec::new(), occlusion_down_index: usize::MAX };
        for (i, name) in names.iter().enumerate() {
            let positives = rows.iter().filter(|r| r[i] == 1).count() as f64;
            let ratio = positives / n;
            if ratio > MIN_POSITIVE_RATIO && ratio < 1.0 - MIN_POSITIVE_RATIO {
                if *name == OCCLUSION_DOWN {
                    schema.occlusion_down_index = schema.names.len();
                }
                schema.names.push(name.to_string());
                schema.ratios.push(ratio);
                kept.push(i);
            }
        }
        if schema.occlusion_down_index == usize::MAX {
            return Err(Error::config(
                "occlusion_down has no usable positive ratio in the training split; raise data.train_occluded_fraction",
            ));
        }
        Ok((schema, kept))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.names.len() != self.ratios.len() {
            return Err(Error::Dataset("schema names and ratios differ in length".into()));
        }
        if self.names.iter().filter(|n| n.as_str() == OCCLUSION_DOWN).count() != 1
            || self.names.get(self.occlusion_down_index).map(String::as_str) != Some(OCCLUSION_DOWN)
        {
            return Err(Error::Dataset("schema must contain occlusion_down exactly once at its index".into()));
        }
        if let Some((name, r)) = self.names.iter().zip(&self.ratios).find(|(_, r)| !(**r > 0.0 && **r < 1.0)) {
            return Err(Error::config(format!("attribute {name} has ratio {r} outside (0, 1)")));
        }
        Ok(())
    }
}
