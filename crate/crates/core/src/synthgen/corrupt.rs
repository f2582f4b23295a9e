use super::{Corruption, ImageSample};
use crate::error::{Error, Result};
use crate::tensor::{shape_string, Tensor};

pub const MIN_OCCLUSION_RATE: f64 = 0.5;
pub const MAX_OCCLUSION_RATE: f64 = 0.8;

/// Number of bottom rows covered at `rate`: `⌊rate·H⌋`, with a tiny guard so
/// that rates like 0.6 on H=320 are not floored to 191 by rounding error.
pub fn occluded_rows(rate: f64, height: usize) -> usize {
    ((rate * height as f64 + 1e-9).floor() as usize).min(height)
}

/// Covers the bottom `⌊rate·H⌋` rows of `sample` with the top rows of
/// `donor` and sets the occlusion label.
pub fn occlude(sample: &ImageSample, donor: &ImageSample, rate: f64, occlusion_index: usize) -> Result<ImageSample> {
    if !(MIN_OCCLUSION_RATE..=MAX_OCCLUSION_RATE).contains(&rate) {
        return Err(Error::argument(format!(
            "occlusion rate {rate} outside [{MIN_OCCLUSION_RATE}, {MAX_OCCLUSION_RATE}]"
        )));
    }
    if !sample.corruption.is_none() {
        return Err(Error::argument(format!("sample {} is already corrupted", sample.id)));
    }
    if !donor.corruption.is_none() {
        return Err(Error::argument(format!("donor {} is corrupted", donor.id)));
    }
    if donor.id == sample.id {
        return Err(Error::argument(format!("sample {} cannot be its own donor", sample.id)));
    }
    if sample.image.shape() != donor.image.shape() {
        return Err(Error::Size { expected: shape_string(sample.image.shape()), actual: shape_string(donor.image.shape()) });
    }
    if occlusion_index >= sample.labels.len() {
        return Err(Error::argument(format!("occlusion index {occlusion_index} outside label vector")));
    }
    let (h, w) = (sample.height(), sample.width());
    let rows = occluded_rows(rate, h);
    let mut image = sample.image.clone();
    let out = image.data_mut();
    for c in 0..3 {
        let plane = c * h * w;
        let src = &donor.image.data()[plane..plane + rows * w];
        out[plane + (h - rows) * w..plane + h * w].copy_from_slice(src);
    }
    let mut labels = sample.labels.clone();
    labels[occlusion_index] = 1;
    Ok(ImageSample { id: sample.id.clone(), image, labels, corruption: Corruption::Occluded { rate } })
}

/// Area-average downsampling of an NCHW batch by an integer factor.
pub fn downsample_tensor(x: &Tensor<f32>, factor: usize) -> Result<Tensor<f32>> {
    let (n, c, h, w) = x.dims4();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::argument(format!("dims {h}x{w} not divisible by downsample factor {factor}")));
    }
    let (oh, ow) = (h / factor, w / factor);
    let scale = 1.0 / (factor * factor) as f64;
    let src = x.data();
    let mut out = vec![0.0f32; n * c * oh * ow];
    for p in 0..n * c {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                for dy in 0..factor {
                    let row = &plane[(oy * factor + dy) * w + ox * factor..][..factor];
                    acc += row.iter().map(|&v| v as f64).sum::<f64>();
                }
                out[p * oh * ow + oy * ow + ox] = (acc * scale) as f32;
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], out)
}

/// Source coordinate and blend weight for each output index along one axis,
/// with half-pixel centers and edge clamping.
fn bilinear_taps(size: usize, factor: usize) -> Vec<(usize, usize, f32)> {
    (0..size * factor)
        .map(|o| {
            let s = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (size - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(size - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect()
}

/// Bilinear upsampling of an NCHW batch by an integer factor.
pub fn bilinear_upsample_tensor(x: &Tensor<f32>, factor: usize) -> Result<Tensor<f32>> {
    let (n, c, h, w) = x.dims4();
    if factor == 0 {
        return Err(Error::argument("upsample factor must be at least 1"));
    }
    if factor == 1 {
        return Ok(x.clone());
    }
    let (oh, ow) = (h * factor, w * factor);
    let ys = bilinear_taps(h, factor);
    let xs = bilinear_taps(w, factor);
    let src = x.data();
    let mut out = vec![0.0f32; n * c * oh * ow];
    for p in 0..n * c {
        let plane = &src[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                dst[oy * ow + ox] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    Tensor::from_vec(&[n, c, oh, ow], out)
}

pub fn downsample(sample: &ImageSample, factor: usize) -> Result<ImageSample> {
    if !sample.corruption.is_none() {
        return Err(Error::argument(format!("sample {} is already corrupted", sample.id)));
    }
    let small = downsample_tensor(&sample.batch(), factor)?;
    let (_, c, h, w) = small.dims4();
    Ok(ImageSample {
        id: sample.id.clone(),
        image: small.reshape(&[c, h, w])?,
        labels: sample.labels.clone(),
        corruption: Corruption::Lowres { factor },
    })
}

/// Upsamples the image; labels and corruption metadata are carried over.
pub fn bilinear_upsample(sample: &ImageSample, factor: usize) -> Result<ImageSample> {
    let big = bilinear_upsample_tensor(&sample.batch(), factor)?;
    let (_, c, h, w) = big.dims4();
    Ok(ImageSample { image: big.reshape(&[c, h, w])?, ..sample.clone() })
}
