use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;

use attrenhance::config::RunConfig;
use attrenhance::enhancers::EnhancerKind;
use attrenhance::metrics::evaluate;
use attrenhance::pipeline::{restoration_table, run_batch, Models};
use attrenhance::synthgen::{bilinear_upsample_tensor, build_dataset, load_manifest, ImageSample, LoadedSet, Variant};
use attrenhance::trainloop::{self, Checkpoint, NetworkKind};
use attrenhance::{Error, Tensor};

use crate::{plot, ConfigArgs, EvalArgs, TrainArgs, Which};

pub const CONFIG_SNAPSHOT: &str = "config.resolved.toml";
pub const RUN_LOG: &str = "run.log";
pub const SEED_ENV: &str = "ATTRENHANCE_SEED";
const EVAL_CHUNK: usize = 50;

/// Invalid input rather than a failed run; decides exit code 1 versus 2.
pub fn is_validation(e: &anyhow::Error) -> bool {
    e.chain().any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_validation))
}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Error::Argument(msg.into()).into()
}

/// File, then ATTRENHANCE_SEED, then `--set` overrides. Without `--config`
/// the snapshot in `fallback` is used when present, else the desk preset.
fn resolve_config(args: &ConfigArgs, fallback: Option<&Path>) -> Result<RunConfig> {
    let path = args.config.clone().or_else(|| fallback.map(|d| d.join(CONFIG_SNAPSHOT)).filter(|p| p.exists()));
    let text = match &path {
        Some(p) => fs::read_to_string(p).map_err(|e| invalid(format!("cannot read config {}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut overrides = Vec::new();
    if let Ok(seed) = std::env::var(SEED_ENV) {
        let seed: u64 = seed.trim().parse().map_err(|_| invalid(format!("{SEED_ENV}={seed} is not an unsigned integer")))?;
        overrides.push(format!("seed={seed}"));
    }
    overrides.extend(args.set.iter().cloned());
    Ok(RunConfig::from_toml_str(&text, &overrides)?)
}

fn write_snapshot(config: &RunConfig, path: &Path) -> Result<()> {
    let text = format!("# config hash {}\n{}", config.hash(), config.to_toml_string());
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    parent_dir(path)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn parent_dir(path: &Path) -> Result<PathBuf> {
    let dir = path.parent().map(Path::to_path_buf).filter(|p| !p.as_os_str().is_empty()).unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

/// Snapshot path for a single-file output: `report.json` gets
/// `report.config.resolved.toml` beside it.
fn snapshot_beside(path: &Path) -> Result<PathBuf> {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    Ok(parent_dir(path)?.join(format!("{stem}.{CONFIG_SNAPSHOT}")))
}

/// Timestamped sidecar log; timestamps never enter reports or checkpoints.
struct RunLog {
    file: File,
    start: Instant,
}

impl RunLog {
    fn open(dir: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(dir.join(RUN_LOG))?;
        let mut log = RunLog { file, start: Instant::now() };
        let args: Vec<String> = std::env::args().collect();
        log.line(&format!("start: {}", args.join(" ")))?;
        Ok(log)
    }

    fn line(&mut self, msg: &str) -> std::io::Result<()> {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
        writeln!(self.file, "[{}.{:03}] {msg}", now.as_secs(), now.subsec_millis())
    }

    fn finish(mut self) -> Result<()> {
        let secs = self.start.elapsed().as_secs_f64();
        Ok(self.line(&format!("done in {secs:.1} s"))?)
    }
}

pub fn dataset_build(args: &ConfigArgs, out: &Path, overwrite: bool) -> Result<()> {
    let config = resolve_config(args, None)?;
    let summary = build_dataset(&config, out, overwrite)?;
    write_snapshot(&config, &out.join(CONFIG_SNAPSHOT))?;
    let mut log = RunLog::open(out)?;
    log.line(&format!("config {}", config.hash()))?;
    log.finish()?;
    println!(
        "dataset: {} train, {} per test variant, attributes: {}",
        summary.train,
        summary.test_per_variant,
        summary.schema.names.join(", ")
    );
    Ok(())
}

fn load_split(data: &Path, variant: Variant) -> Result<LoadedSet> {
    let path = data.join(variant.file_name());
    load_manifest(&path).with_context(|| format!("loading {}", path.display()))
}

/// Keeps the first `epochs` lines of a history file so a resumed run
/// continues it without duplicates.
fn truncate_history(path: &Path, epochs: usize) -> Result<()> {
    let lines: Vec<String> = match File::open(path) {
        Ok(f) => BufReader::new(f).lines().take(epochs).collect::<std::io::Result<_>>()?,
        Err(_) => Vec::new(),
    };
    if lines.len() != epochs {
        return Err(Error::Checkpoint(format!("{} has {} records, checkpoint is at epoch {epochs}", path.display(), lines.len())).into());
    }
    let mut text = lines.join("\n");
    if !text.is_empty() {
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn append_jsonl(path: &Path, value: &impl Serialize) -> attrenhance::Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(value)?)?;
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(invalid(format!("cannot resume: {} does not exist", path.display())));
    }
    Ok(Checkpoint::read(path)?)
}

pub fn train_classifier(args: &TrainArgs) -> Result<()> {
    let config = resolve_config(&args.config, None)?;
    fs::create_dir_all(&args.out)?;
    let train = load_split(&args.data, Variant::Train)?;
    let test = load_split(&args.data, Variant::Clean)?;
    let ckpt_path = args.out.join(NetworkKind::Classifier.file_name());
    let history = args.out.join("history.jsonl");
    let resume = if args.resume { Some(read_checkpoint(&ckpt_path)?) } else { None };
    match &resume {
        Some(c) => truncate_history(&history, c.epoch)?,
        None => fs::write(&history, "")?,
    }
    write_snapshot(&config, &args.out.join(CONFIG_SNAPSHOT))?;
    let mut log = RunLog::open(&args.out)?;
    log.line(&format!("train classifier, config {}", config.hash()))?;
    let total = config.classifier.epochs;
    let run = trainloop::train_classifier(&train, Some(&test), &config, resume.as_ref(), &mut |r, ckpt| {
        ckpt.write(&ckpt_path)?;
        append_jsonl(&history, r)?;
        let ma = r.test_ma.map_or("-".to_string(), |m| format!("{m:.4}"));
        let msg = format!("epoch {}/{total}: loss {:.5}, test mA {ma}, lr {:.3e}", r.epoch, r.loss, r.learning_rate);
        eprintln!("{msg}");
        log.line(&msg)?;
        Ok(())
    })?;
    run.checkpoint.write(&ckpt_path)?;
    log.finish()
}

fn enhancer_kind(which: Which) -> EnhancerKind {
    match which {
        Which::Reconstruction => EnhancerKind::Reconstruction,
        Which::Sr => EnhancerKind::Sr,
    }
}

fn which_name(which: Which) -> &'static str {
    match which {
        Which::Reconstruction => "reconstruction",
        Which::Sr => "sr",
    }
}

pub fn train_gan(args: &TrainArgs, which: Which) -> Result<()> {
    let config = resolve_config(&args.config, None)?;
    let kind = enhancer_kind(which);
    fs::create_dir_all(&args.out)?;
    let train = load_split(&args.data, Variant::Train)?;
    let g_path = args.out.join(trainloop::generator_kind(kind).file_name());
    let d_path = args.out.join(trainloop::discriminator_kind(kind).file_name());
    let history = args.out.join(format!("{}-history.jsonl", which_name(which)));
    let resume = if args.resume { Some((read_checkpoint(&g_path)?, read_checkpoint(&d_path)?)) } else { None };
    match &resume {
        Some((g, _)) => truncate_history(&history, g.epoch)?,
        None => fs::write(&history, "")?,
    }
    write_snapshot(&config, &args.out.join(CONFIG_SNAPSHOT))?;
    let mut log = RunLog::open(&args.out)?;
    log.line(&format!("train gan {}, config {}", which_name(which), config.hash()))?;
    let total = match kind {
        EnhancerKind::Reconstruction => config.gan.reconstruction.epochs,
        EnhancerKind::Sr => config.gan.super_resolution.epochs,
    };
    let run = trainloop::train_gan(&train, kind, &config, resume.as_ref().map(|(g, d)| (g, d)), &mut |r, g, d| {
        g.write(&g_path)?;
        d.write(&d_path)?;
        append_jsonl(&history, r)?;
        let msg = format!(
            "epoch {}/{total}: sse {:.4}, loss_r {:.4}, d_loss {:.4}, D(real) {:.3}, D(fake) {:.3}",
            r.epoch, r.sse, r.loss_r, r.d_loss, r.d_real, r.d_fake
        );
        eprintln!("{msg}");
        log.line(&msg)?;
        for w in &r.warnings {
            eprintln!("warning: {w}");
            log.line(&format!("warning: {w}"))?;
        }
        Ok(())
    })?;
    run.generator_checkpoint.write(&g_path)?;
    run.discriminator_checkpoint.write(&d_path)?;
    log.finish()
}

/// Classifier input for a manifest image: quarter-size images are
/// bilinearly upsampled, full-size ones pass through.
fn classifier_input(s: &ImageSample, height: usize, width: usize) -> Result<Tensor<f32>> {
    let dims = (s.height(), s.width());
    if dims == (height, width) {
        Ok(s.batch())
    } else if dims == (height / 4, width / 4) {
        Ok(bilinear_upsample_tensor(&s.batch(), 4)?)
    } else {
        Err(Error::Size {
            expected: format!("(3, {height}, {width}) or (3, {}, {})", height / 4, width / 4),
            actual: format!("(3, {}, {}) for {}", dims.0, dims.1, s.id),
        }
        .into())
    }
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let config = resolve_config(&args.config, Some(&args.models))?;
    let ckpt_path = args.models.join(NetworkKind::Classifier.file_name());
    if !ckpt_path.exists() {
        return Err(Error::Config(format!("missing model checkpoint {}", ckpt_path.display())).into());
    }
    let ckpt = Checkpoint::read(&ckpt_path)?;
    let model = trainloop::load_classifier(&ckpt)?;
    let (h, w) = (ckpt.model.height, ckpt.model.width);
    let set = load_manifest(&args.manifest).with_context(|| format!("loading {}", args.manifest.display()))?;
    if set.schema.names != ckpt.model.attributes {
        return Err(Error::Config("manifest schema differs from the classifier's attributes".into()).into());
    }
    let mut rows = Vec::with_capacity(set.len());
    for chunk in set.samples.chunks(EVAL_CHUNK) {
        let mut data = Vec::with_capacity(chunk.len() * 3 * h * w);
        for s in chunk {
            data.extend_from_slice(classifier_input(s, h, w)?.data());
        }
        let x = Tensor::from_vec(&[chunk.len(), 3, h, w], data)?;
        rows.extend(model.predict_rows(&x, h, w, EVAL_CHUNK)?);
    }
    let report = evaluate(&rows, &set.labels(), &ckpt.model.attributes, config.pipeline.threshold)?;
    write_json(&args.out, &report)?;
    write_snapshot(&config, &snapshot_beside(&args.out)?)?;
    println!(
        "mA {:.4}  accuracy {:.4}  precision {:.4}  recall {:.4}  F1 {:.4}  ({} samples)",
        report.mean_accuracy, report.accuracy, report.precision, report.recall, report.f1, report.samples
    );
    Ok(())
}

pub fn pipeline_run(args: &EvalArgs, trigger: Option<f64>) -> Result<()> {
    let mut config = resolve_config(&args.config, Some(&args.models))?;
    if let Some(t) = trigger {
        if !(t > 0.0 && t < 1.0) {
            return Err(invalid(format!("--trigger {t} must lie in (0, 1)")));
        }
        config.pipeline.trigger = t;
    }
    let models = Models::load(&args.models)?;
    let set = load_manifest(&args.manifest).with_context(|| format!("loading {}", args.manifest.display()))?;
    let report = run_batch(&set.samples, &models, &config)?;
    write_json(&args.out, &report)?;
    write_snapshot(&config, &snapshot_beside(&args.out)?)?;
    let c = &report.counts;
    println!(
        "corrupted mA {:.4} -> restored mA {:.4}; {} images, {} super-resolved, {} reconstructed, false-trigger rate {:.4}",
        report.corrupted.mean_accuracy, report.restored.mean_accuracy, c.images, c.used_sr, c.used_reconstruction, c.false_trigger_rate
    );
    Ok(())
}

pub fn report_plot(history: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(history).map_err(|e| invalid(format!("cannot read {}: {e}", history.display())))?;
    let table = plot::HistoryTable::parse(&text).map_err(invalid)?;
    parent_dir(out)?;
    fs::write(out, plot::svg(&table))?;
    fs::write(out.with_extension("csv"), table.to_csv())?;
    Ok(())
}

pub fn report_restoration(args: &ConfigArgs, models_dir: &Path, data: &Path, out: &Path) -> Result<()> {
    let config = resolve_config(args, Some(models_dir))?;
    let models = Models::load(models_dir)?;
    let clean = load_split(data, Variant::Clean)?;
    let occluded = load_split(data, Variant::Occluded)?;
    let lowres = load_split(data, Variant::Lowres)?;
    let merged = load_split(data, Variant::Merged)?;
    let table = restoration_table(&clean.samples, &occluded.samples, &lowres.samples, &merged.samples, &models, &config)?;
    fs::create_dir_all(out)?;
    write_json(&out.join("restoration.json"), &table)?;
    fs::write(out.join("restoration.csv"), table.to_csv())?;
    write_snapshot(&config, &out.join(CONFIG_SNAPSHOT))?;
    println!("{:<14} {:>7} {:>9} {:>9} {:>7} {:>7}", "", "mA", "accuracy", "precision", "recall", "F1");
    for r in std::iter::once(&table.clean).chain(&table.rows) {
        let v = r.values();
        println!("{:<14} {:>7.4} {:>9.4} {:>9.4} {:>7.4} {:>7.4}", r.name, v[0], v[1], v[2], v[3], v[4]);
    }
    println!("mean PSNR: bilinear {:.2} dB, super-resolution {:.2} dB", table.psnr_bilinear, table.psnr_sr);
    Ok(())
}
