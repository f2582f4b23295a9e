//! Brute-force reference for the five metrics: explicit index sets per
//! sample and explicit filtering per attribute.

use std::collections::BTreeSet;

use rand::Rng;

pub struct OracleMetrics {
    pub mean_accuracy: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn oracle(predictions: &[Vec<f64>], labels: &[Vec<u8>], threshold: f64) -> OracleMetrics {
    let n = labels.len();
    let a = labels.first().map_or(0, Vec::len);

    let mut rates = Vec::new();
    for j in 0..a {
        let pos: Vec<usize> = (0..n).filter(|&i| labels[i][j] == 1).collect();
        let neg: Vec<usize> = (0..n).filter(|&i| labels[i][j] == 0).collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let hit = pos.iter().filter(|&&i| predictions[i][j] >= threshold).count();
        let rej = neg.iter().filter(|&&i| predictions[i][j] < threshold).count();
        rates.push((hit as f64 / pos.len() as f64 + rej as f64 / neg.len() as f64) / 2.0);
    }
    let mean_accuracy = if rates.is_empty() { 0.0 } else { rates.iter().sum::<f64>() / rates.len() as f64 };

    let (mut acc, mut prec, mut rec) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..n {
        let truth: BTreeSet<usize> = (0..a).filter(|&j| labels[i][j] == 1).collect();
        let hat: BTreeSet<usize> = (0..a).filter(|&j| predictions[i][j] >= threshold).collect();
        let inter = truth.intersection(&hat).count() as f64;
        let union = truth.union(&hat).count() as f64;
        acc.push(if union == 0.0 { 1.0 } else { inter / union });
        prec.push(if hat.is_empty() { if truth.is_empty() { 1.0 } else { 0.0 } } else { inter / hat.len() as f64 });
        rec.push(if truth.is_empty() { if hat.is_empty() { 1.0 } else { 0.0 } } else { inter / truth.len() as f64 });
    }
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let (accuracy, precision, recall) = (mean(&acc), mean(&prec), mean(&rec));
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    OracleMetrics { mean_accuracy, accuracy, precision, recall, f1 }
}

/// Random instance with per-attribute positive rates spread over [0, 1], so
/// some attributes are all-negative or all-positive.
pub fn random_instance(n: usize, a: usize, rng: &mut impl Rng) -> (Vec<Vec<f64>>, Vec<Vec<u8>>) {
    let rates: Vec<f64> = (0..a)
        .map(|j| match j % 8 {
            0 => 0.0,
            1 => 1.0,
            _ => rng.gen_range(0.0..1.0),
        })
        .collect();
    let labels: Vec<Vec<u8>> = (0..n).map(|_| rates.iter().map(|&r| rng.gen_bool(r) as u8).collect()).collect();
    let preds = labels
        .iter()
        .map(|row| {
            row.iter()
                .map(|&y| {
                    let noise: f64 = rng.gen_range(0.0..1.0);
                    if rng.gen_bool(0.7) { 0.5 * noise + 0.5 * y as f64 } else { noise }
                })
                .collect()
        })
        .collect();
    (preds, labels)
}
