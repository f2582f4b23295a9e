use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::attrclassifier::weighted_bce;
use crate::synthgen::{build_dataset, load_manifest, Variant};

fn toy_config(train: usize, extra: &[&str]) -> RunConfig {
    let mut overrides: Vec<String> = [
        format!("data.train_count={train}"),
        "data.test_count=4".into(),
        "data.train_occluded_fraction=0.25".into(),
        "classifier.channels=[4, 8]".into(),
        "classifier.learning_rate=0.01".into(),
        "classifier.batch_size=4".into(),
        "classifier.epochs=2".into(),
        "gan.width_divisor=64".into(),
        "gan.batch_size=4".into(),
        "gan.reconstruction.epochs=2".into(),
        "gan.super_resolution.epochs=2".into(),
    ]
    .into_iter()
    .collect();
    overrides.extend(extra.iter().map(|s| s.to_string()));
    RunConfig::from_toml_str("", &overrides).unwrap()
}

fn toy_sets(config: &RunConfig) -> (tempfile::TempDir, LoadedSet, LoadedSet) {
    let dir = tempfile::tempdir().unwrap();
    build_dataset(config, dir.path(), false).unwrap();
    let train = load_manifest(&dir.path().join(Variant::Train.file_name())).unwrap();
    let test = load_manifest(&dir.path().join(Variant::Clean.file_name())).unwrap();
    (dir, train, test)
}

fn no_callback() -> impl FnMut(&ClassifierEpoch, &Checkpoint) -> Result<()> {
    |_, _| Ok(())
}

fn small_classifier() -> Classifier<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    Classifier::new(&[2, 3], 2, &mut rng).unwrap()
}

fn meta() -> ModelMeta {
    ModelMeta { height: 40, width: 8, channels: vec![2, 3], attributes: vec!["a".into(), "b".into()], width_divisor: 0 }
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let net = small_classifier();
    let mut opt = Sgd::new(0.1, 0.0, 0.9);
    let mut stepped = small_classifier();
    stepped.for_each_param(&mut |_, p| p.grad.fill(0.5));
    opt.step(&mut stepped);
    let rng = ChaCha8Rng::seed_from_u64(9);
    let ckpt = Checkpoint::capture(&net, NetworkKind::Classifier, meta(), "abc", 3).with_optimizer(&opt).with_rng(&rng);
    let bytes = ckpt.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(&bytes[..4], MAGIC);
}

#[test]
fn tensor_table_covers_payload_without_gaps() {
    let net = small_classifier();
    let ckpt = Checkpoint::capture(&net, NetworkKind::Classifier, meta(), "abc", 0).with_optimizer(&Sgd::new(0.1, 0.0, 0.9));
    let header = ckpt.header();
    let mut end = 0;
    for e in &header.tensors {
        assert_eq!(e.offset, end, "{}", e.name);
        assert_eq!(e.len, 4 * e.shape.iter().product::<usize>());
        end += e.len;
    }
    let bytes = ckpt.to_bytes();
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    assert_eq!(bytes.len() - 16 - header_len, end);
}

#[test]
fn checkpoint_refusals() {
    let net = small_classifier();
    let ckpt = Checkpoint::capture(&net, NetworkKind::Classifier, meta(), "abc", 0);
    let err = load_generator(&ckpt, EnhancerKind::Sr).err().unwrap().to_string();
    assert!(err.contains("classifier") && err.contains("sr-generator"), "{err}");
    assert!(ckpt.expect_config("other").is_err());

    let mut bytes = ckpt.to_bytes();
    bytes[4] = 9;
    assert!(Checkpoint::from_bytes(&bytes).unwrap_err().to_string().contains("version 9"));
    assert!(Checkpoint::from_bytes(b"NOPE0000000000000000").is_err());
    let bytes = ckpt.to_bytes();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());

    let mut other = small_classifier();
    let mut bad = ckpt.clone();
    bad.tensors.pop();
    assert!(bad.restore_into(&mut other).is_err());
    let restored = load_classifier(&ckpt).unwrap();
    let x = Tensor::full(&[1, 3, 40, 8], 0.3f32);
    assert_eq!(restored.predict(&x, 40, 8).unwrap(), net.predict(&x, 40, 8).unwrap());
}

#[test]
fn tiny_sgd_step_decreases_single_sample_loss() {
    let mut net = small_classifier();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::from_vec(&[1, 3, 40, 8], (0..960).map(|_| rand::Rng::gen_range(&mut rng, 0.0..1.0)).collect()).unwrap();
    let labels = vec![vec![1, 0]];
    let ratios = [0.4, 0.3];
    // f64 copy of the same weights so the tiny step is not lost to rounding.
    let mut net64 = Classifier::<f64>::new(&[2, 3], 2, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let x64 = x.cast::<f64>();
    net64.zero_grad();
    let before = net64.loss_and_grad(&x64, &labels, &ratios).unwrap();
    let eta = 1e-8;
    net64.for_each_param(&mut |_, p| {
        if p.trainable {
            let g = p.grad.clone();
            for (w, g) in p.value.data_mut().iter_mut().zip(g.data()) {
                *w -= eta * g;
            }
        }
    });
    let (s, _) = net64.forward(&x64, Mode::Train).unwrap();
    let after = weighted_bce(&s, &labels, &ratios).unwrap().0;
    assert!(after < before, "{after} !< {before}");
    // The f32 optimizer path takes the same direction.
    net.zero_grad();
    net.loss_and_grad(&x, &labels, &ratios).unwrap();
    let mut opt = Sgd::new(1e-3, 0.0, 0.0);
    opt.step(&mut net);
    let (s, _) = net.forward(&x, Mode::Train).unwrap();
    assert!(weighted_bce(&s, &labels, &ratios).unwrap().0 < before);
}

#[test]
fn classifier_overfits_two_samples() {
    let config = toy_config(8, &["classifier.epochs=100", "classifier.batch_size=8"]);
    let (_dir, mut train, _) = toy_sets(&config);
    // Keep one clean and one occluded sample.
    let occ = train.samples.iter().position(|s| !s.corruption.is_none()).unwrap();
    let clean = train.samples.iter().position(|s| s.corruption.is_none()).unwrap();
    train.samples = vec![train.samples[clean].clone(), train.samples[occ].clone()];
    let run = train_classifier(&train, None, &config, None, &mut no_callback()).unwrap();
    assert_eq!(run.history.len(), 100);
    assert_eq!(run.history.last().unwrap().steps, 100);
    assert!(run.history.last().unwrap().loss < run.history[0].loss);
}

#[test]
fn classifier_runs_are_deterministic_and_resumable() {
    let config = toy_config(8, &[]);
    let (_dir, train, test) = toy_sets(&config);
    let a = train_classifier(&train, Some(&test), &config, None, &mut no_callback()).unwrap();
    let b = train_classifier(&train, Some(&test), &config, None, &mut no_callback()).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    assert!(a.history.iter().all(|r| r.test_ma.is_some()));

    let mut first = None;
    let mut grab = |r: &ClassifierEpoch, c: &Checkpoint| {
        if r.epoch == 1 {
            first = Some(c.clone());
        }
        Ok(())
    };
    train_classifier(&train, Some(&test), &config, None, &mut grab).unwrap();
    let first = first.unwrap();
    let resumed = train_classifier(&train, Some(&test), &config, Some(&first), &mut no_callback()).unwrap();
    assert_eq!(resumed.history, a.history[1..]);
    assert_eq!(resumed.checkpoint.to_bytes(), a.checkpoint.to_bytes());

    let other = toy_config(8, &["classifier.learning_rate=0.02"]);
    let err = train_classifier(&train, Some(&test), &other, Some(&first), &mut no_callback()).err().unwrap();
    assert!(matches!(err, Error::Checkpoint(_)), "{err}");
}

#[test]
fn zero_lambda_gan_reduces_sse_and_alternates() {
    let config = toy_config(
        8,
        &["gan.reconstruction.lambda=0.0", "gan.reconstruction.epochs=30", "gan.learning_rate=0.01"],
    );
    let (_dir, train, _) = toy_sets(&config);
    let run = train_gan(&train, EnhancerKind::Reconstruction, &config, None, &mut |_, _, _| Ok(())).unwrap();
    let first = run.history.first().unwrap().sse;
    let last = run.history.last().unwrap().sse;
    assert!(last < first, "{last} !< {first}");
    for r in &run.history {
        assert!(r.d_steps.abs_diff(r.g_steps) <= 1);
        assert!((0.0..=1.0).contains(&r.d_real) && (0.0..=1.0).contains(&r.d_fake));
    }
}

#[test]
fn gan_runs_are_deterministic_and_resumable() {
    let config = toy_config(8, &[]);
    let (_dir, train, _) = toy_sets(&config);
    let a = train_gan(&train, EnhancerKind::Sr, &config, None, &mut |_, _, _| Ok(())).unwrap();
    let b = train_gan(&train, EnhancerKind::Sr, &config, None, &mut |_, _, _| Ok(())).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.generator_checkpoint.to_bytes(), b.generator_checkpoint.to_bytes());
    assert_eq!(a.discriminator_checkpoint.to_bytes(), b.discriminator_checkpoint.to_bytes());

    let mut first = None;
    train_gan(&train, EnhancerKind::Sr, &config, None, &mut |r, g, d| {
        if r.epoch == 1 {
            first = Some((g.clone(), d.clone()));
        }
        Ok(())
    })
    .unwrap();
    let (g, d) = first.unwrap();
    let resumed = train_gan(&train, EnhancerKind::Sr, &config, Some((&g, &d)), &mut |_, _, _| Ok(())).unwrap();
    assert_eq!(resumed.history, a.history[1..]);
    assert_eq!(resumed.generator_checkpoint.to_bytes(), a.generator_checkpoint.to_bytes());

    let gen = load_generator(&a.generator_checkpoint, EnhancerKind::Sr).unwrap();
    let x = Tensor::full(&[1, 3, 40, 8], 0.5f32);
    assert_eq!(gen.enhance(&x).unwrap(), a.generator.enhance(&x).unwrap());
    load_discriminator(&a.discriminator_checkpoint, EnhancerKind::Sr).unwrap();
}

#[test]
fn psnr_of_identical_images_is_infinite() {
    let a = Tensor::full(&[2, 3, 4, 4], 0.5f32);
    let mut b = a.clone();
    b.data_mut()[0] = 0.6;
    let p = psnr(&a, &b).unwrap();
    assert!(p[0].is_finite() && p[0] > 20.0);
    assert!(p[1].is_infinite());
}
