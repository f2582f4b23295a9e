//! Training-history curves as a plain SVG (one panel per series) plus the
//! same numbers as CSV.

use std::collections::BTreeSet;
use std::fmt::Write;

use serde_json::{Map, Value};

const WIDTH: f64 = 640.0;
const PANEL: f64 = 170.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 30.0;

/// Numeric fields of a history file, one row per epoch. Missing or
/// non-numeric entries are `None`.
#[derive(Debug, PartialEq)]
pub struct HistoryTable {
    pub epochs: Vec<f64>,
    pub series: Vec<(String, Vec<Option<f64>>)>,
}

impl HistoryTable {
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut records: Vec<Map<String, Value>> = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            match serde_json::from_str(line) {
                Ok(Value::Object(m)) => records.push(m),
                _ => return Err(format!("history line {} is not a JSON object", n + 1)),
            }
        }
        if records.is_empty() {
            return Err("history has no records".into());
        }
        let mut epochs = Vec::with_capacity(records.len());
        for (n, r) in records.iter().enumerate() {
            epochs.push(r.get("epoch").and_then(Value::as_f64).ok_or_else(|| format!("history record {} has no epoch", n + 1))?);
        }
        let names: BTreeSet<&String> =
            records.iter().flat_map(|r| r.iter().filter(|(k, v)| *k != "epoch" && v.is_number()).map(|(k, _)| k)).collect();
        let series = names
            .into_iter()
            .map(|name| (name.clone(), records.iter().map(|r| r.get(name).and_then(Value::as_f64)).collect()))
            .collect();
        Ok(HistoryTable { epochs, series })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch");
        for (name, _) in &self.series {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (i, e) in self.epochs.iter().enumerate() {
            out.push_str(&e.to_string());
            for (_, values) in &self.series {
                out.push(',');
                if let Some(v) = values[i] {
                    out.push_str(&v.to_string());
                }
            }
            out.push('\n');
        }
        out
    }
}

fn extent(values: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    values.filter(|v| v.is_finite()).fold(None, |acc, v| match acc {
        None => Some((v, v)),
        Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
    })
}

pub fn svg(table: &HistoryTable) -> String {
    let height = TOP + PANEL * table.series.len().max(1) as f64;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let (e0, e1) = extent(table.epochs.iter().copied()).unwrap_or((0.0, 1.0));
    let ex = if e1 > e0 { e1 - e0 } else { 1.0 };
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = PANEL - TOP - BOTTOM;
    for (k, (name, values)) in table.series.iter().enumerate() {
        let y0 = TOP + k as f64 * PANEL;
        let _ = writeln!(s, r#"<text x="{LEFT}" y="{:.1}" font-weight="bold">{name}</text>"#, y0 + 12.0);
        let _ = writeln!(
            s,
            r##"<rect x="{LEFT}" y="{:.1}" width="{plot_w}" height="{plot_h}" fill="none" stroke="#888"/>"##,
            y0 + TOP
        );
        let Some((lo, hi)) = extent(values.iter().flatten().copied()) else { continue };
        let span = if hi > lo { hi - lo } else { 1.0 };
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{hi:.4}</text>"#, LEFT - 4.0, y0 + TOP + 4.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{lo:.4}</text>"#, LEFT - 4.0, y0 + TOP + plot_h);
        let _ = writeln!(s, r#"<text x="{LEFT}" y="{:.1}">epoch {e0}</text>"#, y0 + PANEL - 8.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">epoch {e1}</text>"#, LEFT + plot_w, y0 + PANEL - 8.0);
        let points: Vec<String> = table
            .epochs
            .iter()
            .zip(values)
            .filter_map(|(e, v)| v.filter(|v| v.is_finite()).map(|v| (e, v)))
            .map(|(e, v)| {
                let x = LEFT + (e - e0) / ex * plot_w;
                let y = y0 + TOP + plot_h - (v - lo) / span * plot_h;
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            s,
            r##"<polyline fill="none" stroke="#1f5fa8" stroke-width="1.5" points="{}"/>"##,
            points.join(" ")
        );
    }
    s.push_str("</svg>\n");
    s
}
