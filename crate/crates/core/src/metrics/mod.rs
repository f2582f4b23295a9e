//! Label-based mean accuracy and example-based accuracy, precision, recall
//! and F1 for multi-label attribute predictions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeReport {
    pub name: String,
    /// `None` when the attribute has no positive samples.
    pub tpr: Option<f64>,
    /// `None` when the attribute has no negative samples.
    pub tnr: Option<f64>,
    /// `2TP / (2TP + FP + FN)`, 0 when that denominator is 0.
    pub f1: f64,
    /// Number of positive labels.
    pub support: usize,
}

impl AttributeReport {
    /// `(TPR + TNR) / 2`, defined only when both rates are.
    pub fn mean_accuracy(&self) -> Option<f64> {
        Some((self.tpr? + self.tnr?) / 2.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "mA")]
    pub mean_accuracy: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_attribute: Vec<AttributeReport>,
    pub threshold: f64,
    pub samples: usize,
    /// Attributes left out of mA because one class is absent.
    pub notes: Vec<String>,
}

impl MetricsReport {
    pub fn attribute(&self, name: &str) -> Option<&AttributeReport> {
        self.per_attribute.iter().find(|a| a.name == name)
    }
}

fn check_shapes(predictions: &[Vec<f64>], labels: &[Vec<u8>], names: &[String]) -> Result<()> {
    if predictions.len() != labels.len() {
        return Err(Error::argument(format!(
            "{} prediction rows but {} label rows",
            predictions.len(),
            labels.len()
        )));
    }
    let a = names.len();
    if let Some((i, _)) = predictions.iter().zip(labels).enumerate().find(|(_, (p, l))| p.len() != a || l.len() != a) {
        return Err(Error::argument(format!("row {i} does not have {a} attributes")));
    }
    if labels.iter().flatten().any(|&y| y > 1) {
        return Err(Error::argument("labels must be 0 or 1"));
    }
    Ok(())
}

/// Binarizes `predictions` at `threshold` (`p >= threshold` is positive)
/// and scores them against `labels`.
pub fn evaluate(predictions: &[Vec<f64>], labels: &[Vec<u8>], names: &[String], threshold: f64) -> Result<MetricsReport> {
    check_shapes(predictions, labels, names)?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::argument(format!("threshold {threshold} outside (0, 1)")));
    }
    let a = names.len();
    let n = labels.len();
    let mut tp = vec![0usize; a];
    let mut fp = vec![0usize; a];
    let mut tn = vec![0usize; a];
    let mut fn_ = vec![0usize; a];
    let (mut acc, mut prec, mut rec) = (0.0, 0.0, 0.0);
    for (p, y) in predictions.iter().zip(labels) {
        let (mut inter, mut union, mut predicted, mut actual) = (0usize, 0usize, 0usize, 0usize);
        for j in 0..a {
            let hat = p[j] >= threshold;
            let truth = y[j] == 1;
            match (truth, hat) {
                (true, true) => tp[j] += 1,
                (false, true) => fp[j] += 1,
                (false, false) => tn[j] += 1,
                (true, false) => fn_[j] += 1,
            }
            inter += (truth && hat) as usize;
            union += (truth || hat) as usize;
            predicted += hat as usize;
            actual += truth as usize;
        }
        acc += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        prec += match predicted {
            0 => (actual == 0) as u8 as f64,
            k => inter as f64 / k as f64,
        };
        rec += match actual {
            0 => (predicted == 0) as u8 as f64,
            k => inter as f64 / k as f64,
        };
    }
    let denom = n.max(1) as f64;
    let (accuracy, precision, recall) = (acc / denom, prec / denom, rec / denom);
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };

    let mut per_attribute = Vec::with_capacity(a);
    let mut notes = Vec::new();
    let mut ma_sum = 0.0;
    let mut ma_count = 0usize;
    for j in 0..a {
        let positives = tp[j] + fn_[j];
        let negatives = tn[j] + fp[j];
        let tpr = (positives > 0).then(|| tp[j] as f64 / positives as f64);
        let tnr = (negatives > 0).then(|| tn[j] as f64 / negatives as f64);
        let f1_den = 2 * tp[j] + fp[j] + fn_[j];
        let report = AttributeReport {
            name: names[j].clone(),
            tpr,
            tnr,
            f1: if f1_den == 0 { 0.0 } else { 2.0 * tp[j] as f64 / f1_den as f64 },
            support: positives,
        };
        match report.mean_accuracy() {
            Some(m) => {
                ma_sum += m;
                ma_count += 1;
            }
            None => notes.push(format!(
                "{} excluded from mA: {} positives, {} negatives",
                names[j], positives, negatives
            )),
        }
        per_attribute.push(report);
    }
    Ok(MetricsReport {
        mean_accuracy: if ma_count == 0 { 0.0 } else { ma_sum / ma_count as f64 },
        accuracy,
        precision,
        recall,
        f1,
        per_attribute,
        threshold,
        samples: n,
        notes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub metric: String,
    pub a: Option<f64>,
    pub b: Option<f64>,
    /// `b − a`.
    pub delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaTable {
    pub rows: Vec<DeltaRow>,
}

impl DeltaTable {
    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from("metric,a,b,delta\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.metric, cell(r.a), cell(r.b), cell(r.delta)));
        }
        out
    }
}

/// Five aggregate rows then one row per attribute (its `(TPR + TNR) / 2`).
pub fn compare(a: &MetricsReport, b: &MetricsReport) -> Result<DeltaTable> {
    let names_a: Vec<&str> = a.per_attribute.iter().map(|r| r.name.as_str()).collect();
    let names_b: Vec<&str> = b.per_attribute.iter().map(|r| r.name.as_str()).collect();
    if names_a != names_b {
        return Err(Error::argument(format!("attribute schemas differ: {names_a:?} vs {names_b:?}")));
    }
    if a.threshold != b.threshold {
        return Err(Error::argument(format!("thresholds differ: {} vs {}", a.threshold, b.threshold)));
    }
    let row = |metric: &str, x: Option<f64>, y: Option<f64>| DeltaRow {
        metric: metric.to_string(),
        a: x,
        b: y,
        delta: x.zip(y).map(|(x, y)| y - x),
    };
    let mut rows = vec![
        row("mA", Some(a.mean_accuracy), Some(b.mean_accuracy)),
        row("accuracy", Some(a.accuracy), Some(b.accuracy)),
        row("precision", Some(a.precision), Some(b.precision)),
        row("recall", Some(a.recall), Some(b.recall)),
        row("f1", Some(a.f1), Some(b.f1)),
    ];
    for (x, y) in a.per_attribute.iter().zip(&b.per_attribute) {
        rows.push(row(&x.name, x.mean_accuracy(), y.mean_accuracy()));
    }
    Ok(DeltaTable { rows })
}
