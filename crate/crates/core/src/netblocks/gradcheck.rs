use rand::seq::index::sample;
use rand::Rng;

use super::Network;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares analytic gradients against central differences on `samples`
/// randomly chosen trainable coordinates.
///
/// `eval(net, with_grad)` must return the scalar loss; when `with_grad` is
/// true it must also accumulate parameter gradients (grads are zeroed
/// beforehand). The relative error of one coordinate is
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn gradient_check<N, F>(
    net: &mut N,
    mut eval: F,
    samples: usize,
    eps: f64,
    rng: &mut impl Rng,
) -> Result<GradCheckReport>
where
    N: Network<f64>,
    F: FnMut(&mut N, bool) -> Result<f64>,
{
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(Error::argument(format!("finite-difference eps {eps} outside [1e-5, 1e-2]")));
    }
    net.zero_grad();
    let base = eval(net, true)?;
    if !base.is_finite() {
        return Err(Error::Verification(format!("loss is {base} at the unperturbed point")));
    }

    // Flat coordinate table: (param name, element index, analytic grad).
    let mut coords: Vec<(String, usize, f64)> = Vec::new();
    net.for_each_param_ref(&mut |name, p| {
        if p.trainable {
            coords.extend(p.grad.data().iter().enumerate().map(|(i, &g)| (name.to_string(), i, g)));
        }
    });
    let picks: Vec<usize> = if samples >= coords.len() {
        (0..coords.len()).collect()
    } else {
        let mut v = sample(rng, coords.len(), samples).into_vec();
        v.sort_unstable();
        v
    };

    let mut report = GradCheckReport { max_relative_error: 0.0, worst: None, checked: 0 };
    for idx in picks {
        let (name, elem, analytic) = coords[idx].clone();
        let perturb = |net: &mut N, delta: f64| {
            net.for_each_param(&mut |n, p| {
                if n == name {
                    p.value.data_mut()[elem] += delta;
                }
            });
        };
        perturb(net, eps);
        let plus = eval(net, false)?;
        perturb(net, -2.0 * eps);
        let minus = eval(net, false)?;
        perturb(net, eps);
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Verification(format!(
                "non-finite loss when perturbing {name}[{elem}] (+eps: {plus}, -eps: {minus})"
            )));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        if rel > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = rel.max(report.max_relative_error);
            report.worst = Some((name.clone(), elem));
        }
        report.checked += 1;
    }
    Ok(report)
}
