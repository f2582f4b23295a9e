//! The complete model: super-resolve quarter-size inputs, classify, and
//! reconstruct then reclassify images the classifier flags as occluded.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attrclassifier::Classifier;
use crate::config::RunConfig;
use crate::enhancers::{reconstruct, super_resolve, EnhancerKind, Generator};
use crate::error::{Error, Result};
use crate::metrics::{compare, evaluate, DeltaTable, MetricsReport};
use crate::synthgen::{bilinear_upsample_tensor, Corruption, ImageSample, OCCLUSION_DOWN};
use crate::tensor::{shape_string, Tensor};
use crate::trainloop::{load_classifier, load_generator, psnr, Checkpoint, NetworkKind};

/// The three trained networks the pipeline dispatches between.
pub struct Models {
    pub classifier: Classifier<f32>,
    pub reconstruction: Option<Generator<f32>>,
    pub sr: Option<Generator<f32>>,
    pub attributes: Vec<String>,
    pub height: usize,
    pub width: usize,
    pub config_hash: String,
}

impl Models {
    /// Loads `classifier.aenh`, `reconstruction-generator.aenh` and
    /// `sr-generator.aenh` from `dir`. All three must exist and agree on
    /// config hash and image size.
    pub fn load(dir: &Path) -> Result<Self> {
        let read = |kind: NetworkKind| -> Result<Checkpoint> {
            let path = dir.join(kind.file_name());
            if !path.exists() {
                return Err(Error::config(format!("missing model checkpoint {}", path.display())));
            }
            Checkpoint::read(&path)
        };
        let c = read(NetworkKind::Classifier)?;
        let r = read(NetworkKind::ReconstructionGenerator)?;
        let s = read(NetworkKind::SrGenerator)?;
        for other in [&r, &s] {
            if other.config_hash != c.config_hash {
                return Err(Error::config(format!(
                    "{} was trained under config {}, classifier under {}",
                    other.kind, other.config_hash, c.config_hash
                )));
            }
            if (other.model.height, other.model.width) != (c.model.height, c.model.width) {
                return Err(Error::config(format!("{} was trained for a different image size", other.kind)));
            }
        }
        Ok(Models {
            classifier: load_classifier(&c)?,
            reconstruction: Some(load_generator(&r, EnhancerKind::Reconstruction)?),
            sr: Some(load_generator(&s, EnhancerKind::Sr)?),
            attributes: c.model.attributes.clone(),
            height: c.model.height,
            width: c.model.width,
            config_hash: c.config_hash,
        })
    }

    pub fn occlusion_index(&self) -> Result<usize> {
        self.attributes
            .iter()
            .position(|a| a == OCCLUSION_DOWN)
            .ok_or_else(|| Error::config("classifier has no occlusion_down attribute"))
    }

    fn classify(&self, image: &Tensor<f32>) -> Result<Vec<f64>> {
        Ok(self.classifier.predict_rows(image, self.height, self.width, 1)?.remove(0))
    }

    fn reconstruction(&self) -> Result<&Generator<f32>> {
        self.reconstruction.as_ref().ok_or_else(|| Error::config("reconstruction model is not loaded"))
    }

    fn sr(&self) -> Result<&Generator<f32>> {
        self.sr.as_ref().ok_or_else(|| Error::config("super-resolution model is not loaded"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineDecision {
    pub used_sr: bool,
    pub used_reconstruction: bool,
    pub first_pass_probs: Vec<f64>,
    /// Last classification, except occlusion_down which keeps its first-pass
    /// value: reconstruction removes the evidence for it.
    pub final_probs: Vec<f64>,
    pub intermediates_retained: bool,
    #[serde(skip)]
    pub super_resolved: Option<Tensor<f32>>,
    #[serde(skip)]
    pub reconstructed: Option<Tensor<f32>>,
}

/// Routes one `(3, H, W)` or `(1, 3, H, W)` image. Accepted sizes are the
/// classifier input and exactly a quarter of it along both axes.
pub fn run(image: &Tensor<f32>, models: &Models, trigger: f64, retain: bool) -> Result<PipelineDecision> {
    let s = image.shape();
    let x = match s.len() {
        3 => image.clone().reshape(&[1, s[0], s[1], s[2]])?,
        4 if s[0] == 1 => image.clone(),
        _ => return Err(size_error(models, s)),
    };
    let (_, c, h, w) = x.dims4();
    let (fh, fw) = (models.height, models.width);
    let quarter = (fh / 4, fw / 4);
    let used_sr = if c == 3 && (h, w) == (fh, fw) {
        false
    } else if c == 3 && (h, w) == quarter {
        true
    } else {
        return Err(size_error(models, s));
    };
    let occ = models.occlusion_index()?;

    let full = if used_sr { super_resolve(&x, models.sr()?)? } else { x };
    let first = models.classify(&full)?;
    let used_reconstruction = first[occ] > trigger;
    let (final_probs, reconstructed) = if used_reconstruction {
        let restored = reconstruct(&full, models.reconstruction()?)?;
        let mut second = models.classify(&restored)?;
        second[occ] = first[occ];
        (second, Some(restored))
    } else {
        (first.clone(), None)
    };
    Ok(PipelineDecision {
        used_sr,
        used_reconstruction,
        first_pass_probs: first,
        final_probs,
        intermediates_retained: retain,
        super_resolved: if retain && used_sr { Some(full) } else { None },
        reconstructed: if retain { reconstructed } else { None },
    })
}

fn size_error(models: &Models, actual: &[usize]) -> Error {
    Error::Size {
        expected: format!(
            "(3, {}, {}) or (3, {}, {})",
            models.height,
            models.width,
            models.height / 4,
            models.width / 4
        ),
        actual: shape_string(actual),
    }
}

/// Plain-classifier input for a manifest image: quarter-size images are
/// bilinearly upsampled to the classifier size.
pub fn direct_input(sample: &ImageSample, models: &Models) -> Result<Tensor<f32>> {
    let x = sample.batch();
    if (sample.height(), sample.width()) == (models.height / 4, models.width / 4) {
        bilinear_upsample_tensor(&x, 4)
    } else {
        Ok(x)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecisionCounts {
    pub images: usize,
    pub used_sr: usize,
    pub used_reconstruction: usize,
    /// Images whose manifest corruption is an occlusion.
    pub occluded: usize,
    /// Images whose manifest corruption is a downsampling.
    pub lowres: usize,
    /// Reconstruction on an image the manifest does not mark as occluded.
    pub false_triggers: usize,
    /// No reconstruction on an image the manifest marks as occluded.
    pub missed_triggers: usize,
    /// `false_triggers` over the number of non-occluded images.
    pub false_trigger_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRoute {
    pub id: String,
    pub used_sr: bool,
    pub used_reconstruction: bool,
    pub occlusion_down: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub corrupted: MetricsReport,
    pub restored: MetricsReport,
    pub delta: DeltaTable,
    pub counts: DecisionCounts,
    pub routes: Vec<ImageRoute>,
    /// Images whose restored probabilities differ from the direct ones.
    pub changed: usize,
}

/// Evaluates the plain classifier and the complete pipeline on the same
/// samples.
pub fn run_batch(samples: &[ImageSample], models: &Models, config: &RunConfig) -> Result<BatchReport> {
    if samples.is_empty() {
        return Err(Error::Dataset("manifest is empty".into()));
    }
    let threshold = config.pipeline.threshold;
    let mut direct = Vec::with_capacity(samples.len());
    let mut restored = Vec::with_capacity(samples.len());
    let mut counts = DecisionCounts { images: samples.len(), ..Default::default() };
    let mut routes = Vec::with_capacity(samples.len());
    let mut changed = 0;
    let occ = models.occlusion_index()?;
    for s in samples {
        let plain = models.classify(&direct_input(s, models)?)?;
        let d = run(&s.batch(), models, config.pipeline.trigger, false)?;
        let occluded = matches!(s.corruption, Corruption::Occluded { .. });
        counts.occluded += occluded as usize;
        counts.lowres += matches!(s.corruption, Corruption::Lowres { .. }) as usize;
        counts.used_sr += d.used_sr as usize;
        counts.used_reconstruction += d.used_reconstruction as usize;
        counts.false_triggers += (d.used_reconstruction && !occluded) as usize;
        counts.missed_triggers += (!d.used_reconstruction && occluded) as usize;
        changed += (d.final_probs != plain) as usize;
        routes.push(ImageRoute {
            id: s.id.clone(),
            used_sr: d.used_sr,
            used_reconstruction: d.used_reconstruction,
            occlusion_down: d.first_pass_probs[occ],
        });
        direct.push(plain);
        restored.push(d.final_probs);
    }
    let clean_like = counts.images - counts.occluded;
    counts.false_trigger_rate = if clean_like == 0 { 0.0 } else { counts.false_triggers as f64 / clean_like as f64 };
    let labels: Vec<Vec<u8>> = samples.iter().map(|s| s.labels.clone()).collect();
    let corrupted = evaluate(&direct, &labels, &models.attributes, threshold)?;
    let restored = evaluate(&restored, &labels, &models.attributes, threshold)?;
    let delta = compare(&corrupted, &restored)?;
    Ok(BatchReport { corrupted, restored, delta, counts, routes, changed })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub name: String,
    #[serde(rename = "mA")]
    pub mean_accuracy: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl TableRow {
    fn new(name: &str, r: &MetricsReport) -> Self {
        TableRow {
            name: name.to_string(),
            mean_accuracy: r.mean_accuracy,
            accuracy: r.accuracy,
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
        }
    }

    pub fn values(&self) -> [f64; 5] {
        [self.mean_accuracy, self.accuracy, self.precision, self.recall, self.f1]
    }
}

/// Corrupted-versus-restored summary over the occluded, low-resolution and
/// merged test sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestorationTable {
    /// occluded, occluded+net, lowres, lowres+net, corrupted, restored.
    pub rows: Vec<TableRow>,
    pub clean: TableRow,
    pub psnr_bilinear: f64,
    pub psnr_sr: f64,
    pub merged: DecisionCounts,
}

impl RestorationTable {
    pub fn row(&self, name: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("setting,mA,accuracy,precision,recall,f1\n");
        for r in std::iter::once(&self.clean).chain(&self.rows) {
            let v = r.values();
            out.push_str(&format!("{},{:.6},{:.6},{:.6},{:.6},{:.6}\n", r.name, v[0], v[1], v[2], v[3], v[4]));
        }
        out
    }
}

fn labels_of(samples: &[ImageSample]) -> Vec<Vec<u8>> {
    samples.iter().map(|s| s.labels.clone()).collect()
}

/// `clean`, `occluded` and `lowres` are the three test variants of the same
/// people, in the same order.
pub fn restoration_table(
    clean: &[ImageSample],
    occluded: &[ImageSample],
    lowres: &[ImageSample],
    merged: &[ImageSample],
    models: &Models,
    config: &RunConfig,
) -> Result<RestorationTable> {
    let t = config.pipeline.threshold;
    let names = &models.attributes;
    let occ = models.occlusion_index()?;
    let eval_rows = |rows: &[Vec<f64>], set: &[ImageSample]| evaluate(rows, &labels_of(set), names, t);

    let clean_rows: Vec<Vec<f64>> = clean.iter().map(|s| models.classify(&s.batch())).collect::<Result<_>>()?;
    let clean_report = eval_rows(&clean_rows, clean)?;

    let mut occ_plain = Vec::new();
    let mut occ_net = Vec::new();
    for s in occluded {
        let x = s.batch();
        let first = models.classify(&x)?;
        let mut second = models.classify(&reconstruct(&x, models.reconstruction()?)?)?;
        second[occ] = first[occ];
        occ_plain.push(first);
        occ_net.push(second);
    }

    let mut low_plain = Vec::new();
    let mut low_net = Vec::new();
    let mut psnr_bilinear = Vec::new();
    let mut psnr_sr = Vec::new();
    for (s, c) in lowres.iter().zip(clean) {
        let x = s.batch();
        let up = bilinear_upsample_tensor(&x, 4)?;
        let sr = super_resolve(&x, models.sr()?)?;
        let target = c.batch();
        psnr_bilinear.extend(psnr(&up, &target)?);
        psnr_sr.extend(psnr(&sr, &target)?);
        low_plain.push(models.classify(&up)?);
        low_net.push(models.classify(&sr)?);
    }
    if lowres.len() != clean.len() {
        return Err(Error::Dataset("lowres and clean test variants differ in length".into()));
    }

    let batch = run_batch(merged, models, config)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    Ok(RestorationTable {
        rows: vec![
            TableRow::new("occluded", &eval_rows(&occ_plain, occluded)?),
            TableRow::new("occluded+net", &eval_rows(&occ_net, occluded)?),
            TableRow::new("lowres", &eval_rows(&low_plain, lowres)?),
            TableRow::new("lowres+net", &eval_rows(&low_net, lowres)?),
            TableRow::new("corrupted", &batch.corrupted),
            TableRow::new("restored", &batch.restored),
        ],
        clean: TableRow::new("clean", &clean_report),
        psnr_bilinear: mean(&psnr_bilinear),
        psnr_sr: mean(&psnr_sr),
        merged: batch.counts,
    })
}
