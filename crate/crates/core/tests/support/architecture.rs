//! Full-width enhancer architectures at 320×128: shapes through every stage
//! and parameter counts against hand-written formulas. Each check returns a
//! description of the first mismatch.

use attrenhance::enhancers::{Discriminator, EnhancerKind, Generator};
use attrenhance::netblocks::{closed_form_param_count, LayerKind, LayerSpec, Mode, Network};
use attrenhance::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const H: usize = 320;
pub const W: usize = 128;

pub const RECONSTRUCTION_GENERATOR_PARAMS: usize = 8_662_883;
pub const SR_GENERATOR_PARAMS: usize = 35_670_147;
pub const RECONSTRUCTION_DISCRIMINATOR_PARAMS: usize = 17_217_537;
pub const SR_DISCRIMINATOR_PARAMS: usize = 69_651_457;

pub type Check = Result<(), String>;

fn same<T: PartialEq + std::fmt::Debug>(what: &str, actual: T, expected: T) -> Check {
    if actual == expected {
        Ok(())
    } else {
        Err(format!("{what}: got {actual:?}, expected {expected:?}"))
    }
}

fn conv(cin: usize, cout: usize) -> usize {
    25 * cin * cout
}

/// Bias-free k5 convs, each followed by a batch norm (γ and β).
fn normed_stages(cin: usize, widths: &[usize]) -> usize {
    let mut c = cin;
    let mut total = 0;
    for &w in widths {
        total += conv(c, w) + 2 * w;
        c = w;
    }
    total
}

pub fn generator_formula(encoder: &[usize], decoder: &[usize]) -> usize {
    let last = *decoder.last().unwrap();
    normed_stages(3, encoder) + normed_stages(*encoder.last().unwrap(), decoder) + conv(last, 3) + 3
}

/// Biased first conv without norm, normed strided stages, then a linear
/// layer to one logit.
pub fn discriminator_formula(widths: &[usize]) -> usize {
    let first = conv(3, widths[0]) + widths[0];
    let last = *widths.last().unwrap();
    first + normed_stages(widths[0], &widths[1..]) + last + 1
}

fn widths(specs: &[LayerSpec], kind: LayerKind) -> Vec<usize> {
    specs.iter().filter(|s| s.kind == kind).map(|s| s.out_channels).collect()
}

fn counts(what: &str, net: &impl Network<f32>, specs: &[LayerSpec], formula: usize, constant: usize) -> Check {
    same(&format!("{what} formula"), formula, constant)?;
    same(&format!("{what} parameters"), net.trainable_param_count(), formula)?;
    same(&format!("{what} closed-form count"), closed_form_param_count(specs), formula)
}

pub fn reconstruction_generator() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = Generator::<f32>::new(EnhancerKind::Reconstruction, 1, &mut rng);
    let trace = g.trace(&Tensor::full(&[1, 3, H, W], 0.5)).map_err(|e| e.to_string())?;
    let encoder_out: Vec<Vec<usize>> = [2, 5, 8, 11].iter().map(|&i| trace[i].shape().to_vec()).collect();
    same(
        "reconstruction encoder outputs",
        encoder_out,
        vec![vec![1, 64, H / 2, W / 2], vec![1, 128, H / 4, W / 4], vec![1, 256, H / 8, W / 8], vec![1, 512, H / 16, W / 16]],
    )?;
    same("reconstruction output", trace.last().unwrap().shape().to_vec(), vec![1, 3, H, W])?;
    same("reconstruction decoder widths", widths(&g.specs(), LayerKind::TransposedConv), vec![256, 128, 64, 32])?;
    let formula = generator_formula(&[64, 128, 256, 512], &[256, 128, 64, 32]);
    counts("reconstruction generator", &g, &g.specs(), formula, RECONSTRUCTION_GENERATOR_PARAMS)
}

pub fn sr_generator() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = Generator::<f32>::new(EnhancerKind::Sr, 1, &mut rng);
    let trace = g.trace(&Tensor::full(&[1, 3, H / 4, W / 4], 0.5)).map_err(|e| e.to_string())?;
    // Encoder ends at input / 8 = output / 32.
    same("sr bottleneck", trace[8].shape().to_vec(), vec![1, 1024, H / 32, W / 32])?;
    let decoder_out: Vec<usize> = [11, 14, 17, 20, 23].iter().map(|&i| trace[i].shape()[2]).collect();
    same("sr decoder heights", decoder_out, vec![H / 16, H / 8, H / 4, H / 2, H])?;
    same("sr output", trace.last().unwrap().shape().to_vec(), vec![1, 3, H, W])?;
    same("sr encoder widths", widths(&g.specs(), LayerKind::StridedConv), vec![256, 512, 1024])?;
    same("sr decoder widths", widths(&g.specs(), LayerKind::TransposedConv), vec![512, 256, 256, 128, 128])?;
    let formula = generator_formula(&[256, 512, 1024], &[512, 256, 256, 128, 128]);
    counts("sr generator", &g, &g.specs(), formula, SR_GENERATOR_PARAMS)
}

pub fn discriminators() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (kind, schedule, constant) in [
        (EnhancerKind::Reconstruction, vec![128, 256, 512, 1024], RECONSTRUCTION_DISCRIMINATOR_PARAMS),
        (EnhancerKind::Sr, vec![128, 256, 512, 1024, 2048], SR_DISCRIMINATOR_PARAMS),
    ] {
        let d = Discriminator::<f32>::new(kind, 1, H, W, &mut rng);
        let what = format!("{kind} discriminator");
        same(&format!("{what} widths"), widths(&d.specs(), LayerKind::StridedConv), schedule.clone())?;
        counts(&what, &d, &d.specs(), discriminator_formula(&schedule), constant)?;
        let (logits, _) = d.forward(&Tensor::full(&[1, 3, H, W], 0.5), Mode::Eval).map_err(|e| e.to_string())?;
        same(&format!("{what} output"), logits.shape().to_vec(), vec![1, 1])?;
    }
    Ok(())
}
