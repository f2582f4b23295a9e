use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    downsample, occlude, render_person, AttributeSchema, Corruption, ImageSample, CANDIDATE_ATTRIBUTES,
    MAX_OCCLUSION_RATE, MIN_OCCLUSION_RATE,
};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::tensor::{shape_string, Tensor};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SCHEMA_FILE: &str = "schema.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Train,
    Clean,
    Occluded,
    Lowres,
    /// Occluded and low-resolution test samples together.
    Merged,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Train, Variant::Clean, Variant::Occluded, Variant::Lowres, Variant::Merged];

    pub fn file_name(self) -> &'static str {
        match self {
            Variant::Train => "train.jsonl",
            Variant::Clean => "test_clean.jsonl",
            Variant::Occluded => "test_occluded.jsonl",
            Variant::Lowres => "test_lowres.jsonl",
            Variant::Merged => "test_merged.jsonl",
        }
    }

    fn split(self) -> &'static str {
        match self {
            Variant::Train => "train",
            Variant::Clean => "test_clean",
            Variant::Occluded => "test_occluded",
            Variant::Lowres => "test_lowres",
            Variant::Merged => "test_merged",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub path: String,
    pub labels: Vec<u8>,
    pub corruption: Corruption,
    pub split: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub train: usize,
    pub test_per_variant: usize,
    pub schema: AttributeSchema,
}

/// One manifest split with its images decoded.
#[derive(Clone, Debug)]
pub struct LoadedSet {
    pub schema: AttributeSchema,
    pub records: Vec<ManifestRecord>,
    pub samples: Vec<ImageSample>,
}

impl LoadedSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<Vec<u8>> {
        self.samples.iter().map(|s| s.labels.clone()).collect()
    }
}

/// Stacks same-shaped samples into an `(N, 3, H, W)` batch.
pub fn stack_images(samples: &[ImageSample]) -> Result<Tensor<f32>> {
    let first = samples.first().ok_or_else(|| Error::argument("cannot stack an empty sample list"))?;
    let shape = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.image.len());
    for s in samples {
        if s.image.shape() != shape.as_slice() {
            return Err(Error::Size { expected: shape_string(&shape), actual: shape_string(s.image.shape()) });
        }
        data.extend_from_slice(s.image.data());
    }
    Tensor::from_vec(&[samples.len(), shape[0], shape[1], shape[2]], data)
}

pub(crate) fn random_rate(rng: &mut impl Rng) -> f64 {
    // Three decimals keep the manifest readable and the value exactly reparsable.
    (rng.gen_range(MIN_OCCLUSION_RATE..=MAX_OCCLUSION_RATE) * 1000.0).round() / 1000.0
}

pub(crate) fn other_index(n: usize, i: usize, rng: &mut impl Rng) -> usize {
    let j = rng.gen_range(0..n - 1);
    if j >= i {
        j + 1
    } else {
        j
    }
}

fn render_all(prefix: &str, seeds: &[u64], config: &RunConfig) -> Result<Vec<ImageSample>> {
    seeds
        .iter()
        .enumerate()
        .map(|(i, &seed)| {
            let mut s = render_person(seed, config)?;
            s.id = format!("{prefix}_{i:05}");
            Ok(s)
        })
        .collect()
}

fn occlude_with_random_donors(
    originals: &[ImageSample],
    which: &[usize],
    rng: &mut impl Rng,
) -> Result<Vec<(usize, ImageSample)>> {
    let occ = CANDIDATE_ATTRIBUTES.len() - 1;
    which
        .iter()
        .map(|&i| {
            let donor = other_index(originals.len(), i, rng);
            let rate = random_rate(rng);
            Ok((i, occlude(&originals[i], &originals[donor], rate, occ)?))
        })
        .collect()
}

fn save_png(sample: &ImageSample, path: &Path) -> Result<()> {
    let (h, w) = (sample.height(), sample.width());
    let plane = h * w;
    let src = sample.image.data();
    let mut raw = Vec::with_capacity(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            raw.push((src[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized to image");
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

fn load_png(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    for (p, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + p] = px.0[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

fn write_jsonl(path: &Path, records: &[&ManifestRecord]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Renders the train split and the three test variants and writes images,
/// per-split manifests and the attribute schema under `out`.
pub fn build_dataset(config: &RunConfig, out: &Path, overwrite: bool) -> Result<DatasetSummary> {
    config.validate()?;
    if out.exists() && fs::read_dir(out)?.next().is_some() {
        if !overwrite {
            return Err(Error::argument(format!(
                "output directory {} is not empty; pass --overwrite to replace it",
                out.display()
            )));
        }
        fs::remove_dir_all(out)?;
    }
    fs::create_dir_all(out.join("images"))?;

    let d = &config.data;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let train_seeds: Vec<u64> = (0..d.train_count).map(|_| rng.gen()).collect();
    let test_seeds: Vec<u64> = (0..d.test_count).map(|_| rng.gen()).collect();

    let mut train = render_all("train", &train_seeds, config)?;
    let n_occ = (d.train_occluded_fraction * d.train_count as f64).round() as usize;
    let mut picks = sample(&mut rng, d.train_count, n_occ).into_vec();
    picks.sort_unstable();
    for (i, s) in occlude_with_random_donors(&train, &picks, &mut rng)? {
        train[i] = s;
    }

    let clean = render_all("test", &test_seeds, config)?;
    let all: Vec<usize> = (0..clean.len()).collect();
    let occluded: Vec<ImageSample> = occlude_with_random_donors(&clean, &all, &mut rng)?
        .into_iter()
        .map(|(i, mut s)| {
            s.id = format!("occ_{i:05}");
            s
        })
        .collect();
    let lowres: Vec<ImageSample> = clean
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut low = downsample(s, d.lowres_factor)?;
            low.id = format!("low_{i:05}");
            Ok(low)
        })
        .collect::<Result<_>>()?;

    let train_labels: Vec<Vec<u8>> = train.iter().map(|s| s.labels.clone()).collect();
    let (schema, kept) = AttributeSchema::from_labels(&CANDIDATE_ATTRIBUTES, &train_labels)?;

    let mut records: Vec<(Variant, ManifestRecord)> = Vec::new();
    for (variant, set) in
        [(Variant::Train, &train), (Variant::Clean, &clean), (Variant::Occluded, &occluded), (Variant::Lowres, &lowres)]
    {
        for s in set.iter() {
            let path = format!("images/{}.png", s.id);
            save_png(s, &out.join(&path))?;
            records.push((
                variant,
                ManifestRecord {
                    id: s.id.clone(),
                    path,
                    labels: kept.iter().map(|&k| s.labels[k]).collect(),
                    corruption: s.corruption.clone(),
                    split: variant.split().to_string(),
                },
            ));
        }
    }

    write_jsonl(&out.join(MANIFEST_FILE), &records.iter().map(|(_, r)| r).collect::<Vec<_>>())?;
    for variant in Variant::ALL {
        let chosen: Vec<&ManifestRecord> = records
            .iter()
            .filter(|(v, _)| match variant {
                Variant::Merged => matches!(v, Variant::Occluded | Variant::Lowres),
                _ => *v == variant,
            })
            .map(|(_, r)| r)
            .collect();
        write_jsonl(&out.join(variant.file_name()), &chosen)?;
    }
    fs::write(out.join(SCHEMA_FILE), serde_json::to_string_pretty(&schema)? + "\n")?;

    Ok(DatasetSummary { train: train.len(), test_per_variant: clean.len(), schema })
}

pub fn read_schema(dir: &Path) -> Result<AttributeSchema> {
    let path = dir.join(SCHEMA_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
    let schema: AttributeSchema = serde_json::from_str(&text)?;
    schema.validate()?;
    Ok(schema)
}

pub fn read_records(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::Dataset(format!("cannot open {}: {e}", path.display())))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Dataset(format!("{}:{}: {e}", path.display(), n + 1)))?;
        records.push(record);
    }
    Ok(records)
}

/// Loads a manifest split file (any `*.jsonl` in a dataset directory); the
/// schema is read from the same directory.
pub fn load_manifest(path: &Path) -> Result<LoadedSet> {
    let dir: PathBuf = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let schema = read_schema(&dir)?;
    let records = read_records(path)?;
    let mut samples = Vec::with_capacity(records.len());
    for r in &records {
        if r.labels.len() != schema.len() || r.labels.iter().any(|&b| b > 1) {
            return Err(Error::Dataset(format!("record {} has an invalid label vector", r.id)));
        }
        samples.push(ImageSample {
            id: r.id.clone(),
            image: load_png(&dir.join(&r.path))?,
            labels: r.labels.clone(),
            corruption: r.corruption.clone(),
        });
    }
    Ok(LoadedSet { schema, records, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::desk();
        cfg.data.train_count = 120;
        cfg.data.test_count = 10;
        cfg
    }

    #[test]
    fn dataset_round_trips_and_matches_contract() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("data");
        let cfg = tiny_config();
        let summary = build_dataset(&cfg, &out, false).unwrap();
        assert_eq!(summary.train, 120);

        let manifest = read_records(&out.join(MANIFEST_FILE)).unwrap();
        assert_eq!(manifest.len(), 120 + 3 * 10);

        let train = load_manifest(&out.join(Variant::Train.file_name())).unwrap();
        let occ = summary.schema.occlusion_down_index;
        let n = train.len() as f64;
        for (i, r) in summary.schema.ratios.iter().enumerate() {
            let positives = train.samples.iter().filter(|s| s.labels[i] == 1).count() as f64;
            assert_eq!(*r, positives / n);
        }
        assert_eq!(train.samples.iter().filter(|s| s.labels[occ] == 1).count(), 30);

        let clean = load_manifest(&out.join(Variant::Clean.file_name())).unwrap();
        assert!(clean.samples.iter().all(|s| s.labels[occ] == 0));
        let occluded = load_manifest(&out.join(Variant::Occluded.file_name())).unwrap();
        assert!(occluded.samples.iter().all(|s| s.labels[occ] == 1));
        let lowres = load_manifest(&out.join(Variant::Lowres.file_name())).unwrap();
        assert!(lowres.samples.iter().all(|s| s.image.shape() == [3, cfg.data.height / 4, cfg.data.width / 4]));
        let merged = load_manifest(&out.join(Variant::Merged.file_name())).unwrap();
        assert_eq!(merged.len(), 20);

        // In-memory rendering is already 8-bit, so the PNG round trip is exact.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let rendered = render_person(rng.gen(), &cfg).unwrap();
        let first = train.samples.iter().find(|s| s.id == "train_00000").unwrap();
        if first.corruption.is_none() {
            assert_eq!(first.image, rendered.image);
        }
    }

    #[test]
    fn existing_output_needs_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        build_dataset(&cfg, dir.path(), false).unwrap();
        assert!(matches!(build_dataset(&cfg, dir.path(), false), Err(Error::Argument(_))));
        build_dataset(&cfg, dir.path(), true).unwrap();
    }

    #[test]
    fn same_seed_builds_identical_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        build_dataset(&cfg, a.path(), false).unwrap();
        build_dataset(&cfg, b.path(), false).unwrap();
        for f in [MANIFEST_FILE, SCHEMA_FILE, "images/occ_00003.png", "images/train_00007.png"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn stacking_rejects_mixed_shapes() {
        let cfg = tiny_config();
        let a = render_person(1, &cfg).unwrap();
        let b = downsample(&a, 4).unwrap();
        assert!(stack_images(&[a.clone(), a.clone()]).is_ok());
        assert!(matches!(stack_images(&[a, b]), Err(Error::Size { .. })));
    }
}
