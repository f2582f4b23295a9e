use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::netblocks::gradient_check;

fn t2(n: usize, a: usize, v: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(&[n, a], v).unwrap()
}

fn random_image(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

#[test]
fn partition_follows_ten_blocks() {
    let p = PartPartition::new(320).unwrap();
    assert_eq!(p.head, (0, 128));
    assert_eq!(p.upper, (64, 224));
    assert_eq!(p.lower, (160, 320));
    let p = PartPartition::new(80).unwrap();
    assert_eq!((p.head, p.upper, p.lower), ((0, 32), (16, 56), (40, 80)));
    assert!(matches!(PartPartition::new(85), Err(Error::Config(_))));
}

#[test]
fn decompose_crops_without_modifying() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_image(&[2, 3, 40, 4], &mut rng);
    let [body, head, upper, lower] = decompose(&x).unwrap();
    assert_eq!(body, x);
    assert_eq!(head.shape(), &[2, 3, 16, 4]);
    assert_eq!(upper.shape(), &[2, 3, 20, 4]);
    assert_eq!(lower.shape(), &[2, 3, 20, 4]);
    let (h, w) = (40, 4);
    for c in 0..3 {
        for y in 0..20 {
            for xx in 0..w {
                let src = x.data()[(3 + c) * h * w + (20 + y) * w + xx];
                assert_eq!(lower.data()[(3 + c) * 20 * w + y * w + xx], src);
            }
        }
    }
}

#[test]
fn fusion_adds_body_to_best_part() {
    let body = t2(1, 1, vec![0.2]);
    let (parts0, parts1, parts2) = (t2(1, 1, vec![-0.1]), t2(1, 1, vec![0.5]), t2(1, 1, vec![0.3]));
    let (fused, winners) = fuse_scores(&body, [&parts0, &parts1, &parts2]).unwrap();
    assert!((fused.data()[0] - 0.7).abs() < 1e-12);
    assert_eq!(winners, vec![1]);

    let same = t2(1, 1, vec![0.4]);
    let (fused, winners) = fuse_scores(&body, [&same, &same, &same]).unwrap();
    assert!((fused.data()[0] - 0.6).abs() < 1e-12);
    assert_eq!(winners, vec![0]);
}

#[test]
fn weighted_bce_hand_values() {
    let ln2 = std::f64::consts::LN_2;
    let (l, _) = weighted_bce(&t2(1, 1, vec![0.0]), &[vec![1]], &[0.5]).unwrap();
    assert!((l - ln2).abs() < 1e-12);
    let (l, _) = weighted_bce(&t2(1, 1, vec![0.0]), &[vec![1]], &[0.1]).unwrap();
    assert!((l - 5.0 * ln2).abs() < 1e-12, "{l}");
    // A saturated correct prediction costs only the clamp floor.
    let (l, g) = weighted_bce(&t2(1, 1, vec![60.0]), &[vec![1]], &[0.3]).unwrap();
    assert!(l < 1e-6);
    assert_eq!(g.data()[0], 0.0);
    assert!(matches!(weighted_bce(&t2(1, 1, vec![0.0]), &[vec![1]], &[1.0]), Err(Error::Config(_))));
}

#[test]
fn weighted_bce_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let scores: Vec<f64> = (0..12).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let labels: Vec<Vec<u8>> = (0..4).map(|_| (0..3).map(|_| rng.gen_range(0..2)).collect()).collect();
    let ratios = [0.2, 0.5, 0.7];
    let (_, g) = weighted_bce(&t2(4, 3, scores.clone()), &labels, &ratios).unwrap();
    for k in 0..12 {
        let mut plus = scores.clone();
        plus[k] += 1e-6;
        let mut minus = scores.clone();
        minus[k] -= 1e-6;
        let lp = weighted_bce(&t2(4, 3, plus), &labels, &ratios).unwrap().0;
        let lm = weighted_bce(&t2(4, 3, minus), &labels, &ratios).unwrap().0;
        let numeric = (lp - lm) / 2e-6;
        assert!((numeric - g.data()[k]).abs() < 1e-7, "coord {k}: {numeric} vs {}", g.data()[k]);
    }
}

fn toy(seed: u64) -> (Classifier<f64>, Tensor<f64>, Vec<Vec<u8>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Classifier::<f64>::new(&[2, 3], 2, &mut rng).unwrap();
    // Larger scoring weights give the loss a non-trivial gradient everywhere.
    for head in net.heads_mut() {
        let w = head.weight_mut();
        for v in w.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    let x = random_image(&[2, 3, 40, 8], &mut rng);
    let labels = vec![vec![1, 0], vec![0, 1]];
    (net, x, labels)
}

#[test]
fn classifier_loss_passes_gradient_check() {
    let (mut net, x, labels) = toy(3);
    assert!(net.trainable_param_count() <= 5000);
    let ratios = [0.3, 0.6];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let report = gradient_check(
        &mut net,
        |net, with_grad| {
            if with_grad {
                net.loss_and_grad(&x, &labels, &ratios)
            } else {
                let (s, _) = net.forward(&x, Mode::Train)?;
                Ok(weighted_bce(&s, &labels, &ratios)?.0)
            }
        },
        500,
        1e-5,
        &mut rng,
    )
    .unwrap();
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}

#[test]
fn part_gradient_reaches_only_the_winning_part() {
    let (mut net, x, _) = toy(5);
    let x = x.batch_item(0);
    let (scores, saved) = net.forward(&x, Mode::Train).unwrap();
    net.zero_grad();
    net.backward(&saved, &Tensor::full(scores.shape(), 1.0)).unwrap();
    let mut grads = std::collections::BTreeMap::new();
    net.for_each_param_ref(&mut |name, p| {
        if name.starts_with("heads.") && name.ends_with(".weight") {
            grads.insert(name.to_string(), p.grad.clone());
        }
    });
    let c = net.feature_len();
    for attr in 0..2 {
        let winner = saved.winners[attr] as usize;
        for (p, region) in REGIONS[1..].iter().enumerate() {
            let g = &grads[&format!("heads.{region}.weight")];
            let row_norm: f64 = g.data()[attr * c..(attr + 1) * c].iter().map(|v| v.abs()).sum();
            if p == winner {
                assert!(row_norm > 0.0, "winner {region} got no gradient");
            } else {
                assert_eq!(row_norm, 0.0, "{region} is not the winner but got gradient");
            }
        }
        let body = &grads["heads.body.weight"];
        assert!(body.data()[attr * c..(attr + 1) * c].iter().any(|v| *v != 0.0));
    }
}

#[test]
fn predict_checks_size_and_is_deterministic() {
    let (net, x, _) = toy(6);
    let err = net.predict(&x, 80, 8).unwrap_err();
    assert!(matches!(err, Error::Size { .. }), "{err}");
    let a = net.predict(&x, 40, 8).unwrap();
    let b = net.predict(&x, 40, 8).unwrap();
    assert_eq!(a, b);
    assert!(a.data().iter().all(|p| *p > 0.0 && *p < 1.0));
}

#[test]
fn features_have_fixed_length_and_reject_tiny_regions() {
    let (net, x, _) = toy(7);
    let regions = decompose(&x).unwrap();
    let (feats, _) = net.region_features(&regions, Mode::Eval).unwrap();
    assert!(feats.iter().all(|f| f.shape() == [2, 3]));
    let (twin, _) = net.region_features(&[regions[1].clone(), regions[1].clone()], Mode::Eval).unwrap();
    assert_eq!(twin[0], twin[1]);
    let zeros = Tensor::zeros(&[1, 3, 8, 8]);
    let (f, _) = net.region_features(&[zeros], Mode::Eval).unwrap();
    assert!(f[0].all_finite());
    assert!(matches!(net.region_features(&[Tensor::zeros(&[1, 3, 6, 8])], Mode::Eval), Err(Error::Config(_))));
}

#[test]
fn closed_form_parameter_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let net = Classifier::<f32>::new(&[16, 32, 64], 9, &mut rng).unwrap();
    assert_eq!(net.trainable_param_count(), crate::netblocks::closed_form_param_count(&net.specs()));
}

fn bce_unweighted(scores: &[f64], labels: &[u8]) -> f64 {
    scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            let p = sigmoid(s).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if y == 1 { -p.ln() } else { -(1.0 - p).ln() }
        })
        .sum()
}

proptest! {
    #[test]
    fn shifting_all_parts_shifts_the_score(
        body in -5.0f64..5.0,
        parts in proptest::array::uniform3(-5.0f64..5.0),
        c in -5.0f64..5.0,
    ) {
        let b = t2(1, 1, vec![body]);
        let p: Vec<Tensor<f64>> = parts.iter().map(|&v| t2(1, 1, vec![v])).collect();
        let q: Vec<Tensor<f64>> = parts.iter().map(|&v| t2(1, 1, vec![v + c])).collect();
        let (f0, w0) = fuse_scores(&b, [&p[0], &p[1], &p[2]]).unwrap();
        let (f1, w1) = fuse_scores(&b, [&q[0], &q[1], &q[2]]).unwrap();
        prop_assert!((f1.data()[0] - f0.data()[0] - c).abs() < 1e-9);
        // Adding c can merge near-ties by rounding; only check strict winners.
        let sorted = { let mut s = parts; s.sort_by(|a, b| b.partial_cmp(a).unwrap()); s };
        if sorted[0] - sorted[1] > 1e-9 {
            prop_assert_eq!(w0, w1);
        }
    }

    #[test]
    fn balanced_ratios_give_plain_bce(
        scores in proptest::collection::vec(-8.0f64..8.0, 6),
        labels in proptest::collection::vec(0u8..2, 6),
    ) {
        let rows: Vec<Vec<u8>> = labels.chunks(3).map(|c| c.to_vec()).collect();
        let (l, _) = weighted_bce(&t2(2, 3, scores.clone()), &rows, &[0.5; 3]).unwrap();
        let expected = bce_unweighted(&scores, &labels) / 2.0;
        prop_assert!((l - expected).abs() < 1e-12);
    }

    #[test]
    fn loss_is_non_negative(
        scores in proptest::collection::vec(-30.0f64..30.0, 4),
        labels in proptest::collection::vec(0u8..2, 4),
        ratios in proptest::collection::vec(0.02f64..0.98, 4),
    ) {
        let (l, g) = weighted_bce(&t2(1, 4, scores), &[labels], &ratios).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert!(g.all_finite());
    }
}
