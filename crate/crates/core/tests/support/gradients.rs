//! The three gradient checks on toy networks: the weighted classification
//! loss through score fusion, the pooled SSE, and the combined generator
//! objective for both enhancers. Shared by the integration tests and the
//! acceptance harness.

use attrenhance::attrclassifier::{weighted_bce, Classifier};
use attrenhance::enhancers::{generator_objective, loss_sse, Discriminator, EnhancerKind, Generator, KERNEL};
use attrenhance::netblocks::{
    gradient_check, Conv2d, GradCheckReport, Layer, Mode, Network, ParamVisitor, ParamVisitorRef, Sequential,
};
use attrenhance::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const MAX_PARAMS: usize = 5000;
pub const TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-5;

/// Name, trainable parameter count and the check's report.
pub type GradientCase = (String, usize, GradCheckReport);

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

pub fn classifier_loss() -> Result<GradientCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut net = Classifier::<f64>::new(&[2, 3], 2, &mut rng)?;
    // Larger scoring weights give the loss a non-trivial gradient everywhere.
    for head in net.heads_mut() {
        for v in head.weight_mut().data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    let x = random(&[2, 3, 40, 8], &mut rng);
    let labels = vec![vec![1, 0], vec![0, 1]];
    let ratios = [0.3, 0.6];
    let params = net.trainable_param_count();
    let mut pick = ChaCha8Rng::seed_from_u64(4);
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
        EPS,
        &mut pick,
    )?;
    Ok(("classification loss through fusion".into(), params, report))
}

struct OneConv {
    net: Sequential<f64>,
    x: Tensor<f64>,
    target: Tensor<f64>,
}

impl Network<f64> for OneConv {
    fn for_each_param(&mut self, f: &mut ParamVisitor<'_, f64>) {
        self.net.visit_params("", f);
    }

    fn for_each_param_ref(&self, f: &mut ParamVisitorRef<'_, f64>) {
        self.net.visit_params_ref("", f);
    }
}

pub fn pooled_sse() -> Result<GradientCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut net = OneConv {
        net: Sequential::new(vec![Box::new(Conv2d::new(3, 3, KERNEL, 1, true, &mut rng))]),
        x: random(&[2, 3, 8, 8], &mut rng),
        target: random(&[2, 3, 8, 8], &mut rng),
    };
    let params = net.trainable_param_count();
    let report = gradient_check(
        &mut net,
        |n, with_grad| {
            let (y, saved) = n.net.forward(&n.x, Mode::Train)?;
            let (loss, g) = loss_sse(&y, &n.target, 2)?;
            if with_grad {
                n.net.backward(&saved, &g)?;
            }
            Ok(loss)
        },
        300,
        EPS,
        &mut rng,
    )?;
    Ok(("pooled SSE".into(), params, report))
}

/// Generator plus a frozen discriminator; only generator parameters are
/// exposed because the objective is the generator's.
struct Pair {
    generator: Generator<f64>,
    disc: Discriminator<f64>,
    input: Tensor<f64>,
    target: Tensor<f64>,
    lambda: f64,
}

impl Pair {
    fn eval(&mut self, with_grad: bool) -> Result<f64> {
        let (out, saved) = self.generator.forward(&self.input, Mode::Train)?;
        let (loss, grad) = generator_objective(&out, &self.target, &mut self.disc, self.lambda, 2)?;
        if with_grad {
            self.generator.backward(&saved, &grad)?;
        }
        Ok(loss.objective)
    }
}

impl Network<f64> for Pair {
    fn for_each_param(&mut self, f: &mut ParamVisitor<'_, f64>) {
        self.generator.for_each_param(f);
    }

    fn for_each_param_ref(&self, f: &mut ParamVisitorRef<'_, f64>) {
        self.generator.for_each_param_ref(f);
    }
}

/// One encoder stage and as many decoder stages as the upscaling needs.
/// Central differences are wrong wherever a ReLU sits within eps of its
/// kink, so the instance is small and the seed fixed.
pub fn generator_objective_case(kind: EnhancerKind, lambda: f64) -> Result<GradientCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let decoder: &[usize] = match kind {
        EnhancerKind::Reconstruction => &[4],
        EnhancerKind::Sr => &[4, 4, 4],
    };
    let generator = Generator::from_schedule(kind, &[4], decoder, &mut rng);
    let ih = match kind {
        EnhancerKind::Reconstruction => 8,
        EnhancerKind::Sr => 4,
    };
    let (h, w) = (ih * kind.upscale(), ih * kind.upscale());
    let disc = Discriminator::from_schedule(kind, &[4, 8], h, w, &mut rng);
    let input = random(&[2, 3, ih, ih], &mut rng);
    let target = random(&[2, 3, h, w], &mut rng);
    let mut pair = Pair { generator, disc, input, target, lambda };
    let params = pair.trainable_param_count() + pair.disc.trainable_param_count();
    let mut pick = ChaCha8Rng::seed_from_u64(8);
    let report = gradient_check(&mut pair, |p, g| p.eval(g), 500, EPS, &mut pick)?;
    Ok((format!("{kind} generator objective (lambda {lambda})"), params, report))
}

pub fn all_cases() -> Result<Vec<GradientCase>> {
    Ok(vec![
        classifier_loss()?,
        pooled_sse()?,
        generator_objective_case(EnhancerKind::Reconstruction, 0.1)?,
        generator_objective_case(EnhancerKind::Sr, 1.0)?,
    ])
}
