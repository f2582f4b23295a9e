use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Corruption, ImageSample, CANDIDATE_ATTRIBUTES};
use crate::config::{AttributePriors, RunConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sampled attribute bits of one rendered person, in `CANDIDATE_ATTRIBUTES` order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PersonTraits {
    pub female: bool,
    pub hat: bool,
    pub backpack: bool,
    pub long_sleeves: bool,
    pub dark_upper: bool,
    pub dark_lower: bool,
    pub skirt: bool,
    pub shorts: bool,
}

impl PersonTraits {
    pub fn sample(priors: &AttributePriors, rng: &mut impl Rng) -> Self {
        let female = rng.gen_bool(priors.female);
        let hat = rng.gen_bool(priors.hat);
        let backpack = rng.gen_bool(priors.backpack);
        let long_sleeves = rng.gen_bool(priors.long_sleeves);
        let dark_upper = rng.gen_bool(priors.dark_upper);
        let dark_lower = rng.gen_bool(if dark_upper {
            priors.dark_lower_given_dark_upper
        } else {
            priors.dark_lower_given_light_upper
        });
        let skirt = rng.gen_bool(if female { priors.skirt_given_female } else { priors.skirt_given_male });
        let shorts = !skirt && rng.gen_bool(priors.shorts_given_no_skirt);
        PersonTraits { female, hat, backpack, long_sleeves, dark_upper, dark_lower, skirt, shorts }
    }

    /// Label vector over all candidate attributes; occlusion_down is 0.
    pub fn labels(&self) -> Vec<u8> {
        let bits = [
            self.female,
            self.hat,
            self.backpack,
            self.long_sleeves,
            self.dark_upper,
            self.dark_lower,
            self.skirt,
            self.shorts,
            false,
        ];
        debug_assert_eq!(bits.len(), CANDIDATE_ATTRIBUTES.len());
        bits.iter().map(|&b| b as u8).collect()
    }
}

/// Marginal positive probability of each candidate attribute under the priors.
pub fn marginal_priors(p: &AttributePriors) -> [f64; 9] {
    let dark_lower = p.dark_upper * p.dark_lower_given_dark_upper
        + (1.0 - p.dark_upper) * p.dark_lower_given_light_upper;
    let skirt = p.female * p.skirt_given_female + (1.0 - p.female) * p.skirt_given_male;
    let shorts = (1.0 - skirt) * p.shorts_given_no_skirt;
    [p.female, p.hat, p.backpack, p.long_sleeves, p.dark_upper, dark_lower, skirt, shorts, 0.0]
}

type Rgb = [f32; 3];

fn hsv(h: f32, s: f32, v: f32) -> Rgb {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn garment(dark: bool, rng: &mut impl Rng) -> Rgb {
    let v = if dark { rng.gen_range(0.08..0.28) } else { rng.gen_range(0.65..0.95) };
    hsv(rng.gen(), rng.gen_range(0.2..0.6), v)
}

/// Pixel canvas in fractional body coordinates: `y` in units of H, `x` in
/// units of W, both measured from the top-left corner.
struct Canvas {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Canvas {
    fn new(h: usize, w: usize) -> Self {
        Canvas { h, w, data: vec![0.0; 3 * h * w] }
    }

    fn put(&mut self, y: usize, x: usize, c: Rgb) {
        let plane = self.h * self.w;
        for (k, v) in c.iter().enumerate() {
            self.data[k * plane + y * self.w + x] = *v;
        }
    }

    fn row_span(&self, y0: f32, y1: f32) -> std::ops::Range<usize> {
        let a = (y0 * self.h as f32).round().clamp(0.0, self.h as f32) as usize;
        let b = (y1 * self.h as f32).round().clamp(0.0, self.h as f32) as usize;
        a..b.max(a)
    }

    fn col_span(&self, x0: f32, x1: f32) -> std::ops::Range<usize> {
        let a = (x0 * self.w as f32).round().clamp(0.0, self.w as f32) as usize;
        let b = (x1 * self.w as f32).round().clamp(0.0, self.w as f32) as usize;
        a..b.max(a + 1).min(self.w)
    }

    fn rect(&mut self, y0: f32, y1: f32, x0: f32, x1: f32, c: Rgb) {
        for y in self.row_span(y0, y1) {
            for x in self.col_span(x0, x1) {
                self.put(y, x, c);
            }
        }
    }

    /// Rectangle whose half-width grows linearly from `top` to `bottom`.
    fn trapezoid(&mut self, y0: f32, y1: f32, cx: f32, top: f32, bottom: f32, c: Rgb) {
        let rows = self.row_span(y0, y1);
        let n = rows.len().max(1) as f32;
        for (i, y) in rows.enumerate() {
            let half = top + (bottom - top) * (i as f32 + 0.5) / n;
            for x in self.col_span(cx - half, cx + half) {
                self.put(y, x, c);
            }
        }
    }

    fn ellipse(&mut self, cy: f32, cx: f32, ry: f32, rx: f32, c: Rgb) {
        let (hf, wf) = (self.h as f32, self.w as f32);
        for y in self.row_span(cy - ry, cy + ry) {
            for x in 0..self.w {
                let dy = ((y as f32 + 0.5) / hf - cy) / ry;
                let dx = ((x as f32 + 0.5) / wf - cx) / rx;
                if dx * dx + dy * dy <= 1.0 {
                    self.put(y, x, c);
                }
            }
        }
    }
}

/// Renders one person deterministically from `seed`. Labels cover every
/// candidate attribute; the image is quantized to 8 bits so that it survives
/// a PNG round trip unchanged.
pub fn render_person(seed: u64, config: &RunConfig) -> Result<ImageSample> {
    let (h, w) = (config.data.height, config.data.width);
    if h == 0 || h % 10 != 0 {
        return Err(Error::config(format!("image height {h} must be a positive multiple of 10")));
    }
    if w == 0 {
        return Err(Error::config("image width must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = PersonTraits::sample(&config.data.priors, &mut rng);
    let mut cv = Canvas::new(h, w);

    // Background: vertical gradient between two muted tones plus a distractor block.
    let top = hsv(rng.gen(), rng.gen_range(0.0..0.3), rng.gen_range(0.35..0.6));
    let bottom = hsv(rng.gen(), rng.gen_range(0.0..0.3), rng.gen_range(0.35..0.6));
    for y in 0..h {
        let a = y as f32 / (h - 1).max(1) as f32;
        let c = [0, 1, 2].map(|k| top[k] * (1.0 - a) + bottom[k] * a);
        for x in 0..w {
            cv.put(y, x, c);
        }
    }
    let block = hsv(rng.gen(), rng.gen_range(0.0..0.3), rng.gen_range(0.35..0.6));
    let (by, bx) = (rng.gen_range(0.0..0.8), if rng.gen_bool(0.5) { 0.0 } else { 0.85 });
    cv.rect(by, by + rng.gen_range(0.05..0.2), bx, bx + 0.15, block);

    let cx = 0.5 + rng.gen_range(-0.06..0.06);
    let skin = hsv(rng.gen_range(0.03..0.1), rng.gen_range(0.3..0.55), rng.gen_range(0.6..0.95));
    let hair = hsv(rng.gen_range(0.0..0.12), rng.gen_range(0.3..0.7), rng.gen_range(0.1..0.45));
    let shirt = garment(t.dark_upper, &mut rng);
    let pants = garment(t.dark_lower, &mut rng);
    let bag = hsv(rng.gen(), rng.gen_range(0.7..1.0), rng.gen_range(0.5..0.9));
    let hat = hsv(rng.gen(), rng.gen_range(0.6..1.0), rng.gen_range(0.45..0.9));
    let shoes = hsv(rng.gen(), 0.2, rng.gen_range(0.05..0.2));
    let shoulder = if t.female { 0.19 } else { 0.23 };

    if t.backpack {
        let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let outer = cx + side * (shoulder + 0.16);
        let (x0, x1) = if side > 0.0 { (cx, outer) } else { (outer, cx) };
        cv.rect(0.21, 0.44, x0, x1, bag);
    }
    if t.female {
        cv.rect(0.05, 0.26, cx - 0.2, cx + 0.2, hair);
    }
    cv.ellipse(0.105, cx, 0.055, 0.17, skin);
    if t.female {
        cv.rect(0.045, 0.07, cx - 0.17, cx + 0.17, hair);
    } else {
        cv.rect(0.048, 0.065, cx - 0.14, cx + 0.14, hair);
    }
    if t.hat {
        cv.rect(0.015, 0.06, cx - 0.15, cx + 0.15, hat);
        cv.rect(0.055, 0.07, cx - 0.24, cx + 0.24, hat);
    }
    cv.rect(0.16, 0.19, cx - 0.07, cx + 0.07, skin);

    // Arms, then torso over them.
    let arm_w = 0.11;
    for side in [-1.0f32, 1.0] {
        let (x0, x1) = if side < 0.0 {
            (cx - shoulder - arm_w, cx - shoulder)
        } else {
            (cx + shoulder, cx + shoulder + arm_w)
        };
        let sleeve_end = if t.long_sleeves { 0.48 } else { 0.27 };
        cv.rect(0.19, sleeve_end, x0, x1, shirt);
        cv.rect(sleeve_end, 0.5, x0, x1, skin);
    }
    cv.rect(0.18, 0.53, cx - shoulder, cx + shoulder, shirt);
    if t.backpack {
        let strap = [0, 1, 2].map(|k| bag[k] * 0.6);
        cv.rect(0.18, 0.34, cx - shoulder + 0.04, cx - shoulder + 0.1, strap);
        cv.rect(0.18, 0.34, cx + shoulder - 0.1, cx + shoulder - 0.04, strap);
    }

    // Lower body.
    let leg = 0.09;
    let gap = 0.02;
    let legs = |cv: &mut Canvas, y0: f32, y1: f32, c: Rgb| {
        cv.rect(y0, y1, cx - gap - 2.0 * leg, cx - gap, c);
        cv.rect(y0, y1, cx + gap, cx + gap + 2.0 * leg, c);
    };
    if t.skirt {
        legs(&mut cv, 0.7, 0.94, skin);
        cv.trapezoid(0.52, 0.72, cx, shoulder - 0.02, shoulder + 0.1, pants);
    } else if t.shorts {
        legs(&mut cv, 0.52, 0.94, skin);
        cv.rect(0.52, 0.58, cx - shoulder, cx + shoulder, pants);
        legs(&mut cv, 0.58, 0.66, pants);
    } else {
        cv.rect(0.52, 0.58, cx - shoulder, cx + shoulder, pants);
        legs(&mut cv, 0.58, 0.94, pants);
    }
    legs(&mut cv, 0.94, 0.97, shoes);

    for v in cv.data.iter_mut() {
        let noise: f32 = rng.gen_range(-0.02..0.02);
        *v = ((*v + noise).clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
    Ok(ImageSample {
        id: format!("person_{seed:016x}"),
        image: Tensor::from_vec(&[3, h, w], cv.data)?,
        labels: t.labels(),
        corruption: Corruption::None,
    })
}
