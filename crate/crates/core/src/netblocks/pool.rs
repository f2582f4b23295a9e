use super::{Layer, LayerKind, LayerSpec, Mode, Saved};
use crate::error::{Error, Result};
use crate::tensor::{shape_string, Scalar, Tensor};

/// `(N,C,H,W) → (N,C,1,1)` mean over all spatial positions.
pub struct GlobalAvgPool {
    channels: usize,
}

impl GlobalAvgPool {
    pub fn new(channels: usize) -> Self {
        GlobalAvgPool { channels }
    }
}

impl<T: Scalar> Layer<T> for GlobalAvgPool {
    fn specs(&self) -> Vec<LayerSpec> {
        vec![LayerSpec::simple(LayerKind::GlobalAvgPool, self.channels)]
    }

    fn forward_group(&self, xs: &[Tensor<T>], mode: Mode) -> Result<(Vec<Tensor<T>>, Saved<T>)> {
        let mut saved = Saved::new(mode);
        let mut ys = Vec::with_capacity(xs.len());
        for x in xs {
            if x.shape().len() != 4 {
                return Err(Error::Shape {
                    layer: "GlobalAvgPool".into(),
                    detail: format!("expected NCHW, got {}", shape_string(x.shape())),
                });
            }
            let (n, c, h, w) = x.dims4();
            let area = T::from_usize(h * w).unwrap();
            let data = x.data().chunks_exact(h * w).map(|p| p.iter().copied().sum::<T>() / area).collect();
            ys.push(Tensor::from_vec(&[n, c, 1, 1], data)?);
            saved.shapes.push(x.shape().to_vec());
        }
        Ok((ys, saved))
    }

    fn backward_group(&mut self, saved: &Saved<T>, grads: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        saved
            .shapes
            .iter()
            .zip(grads)
            .map(|(shape, g)| {
                let area = shape[2] * shape[3];
                let scale = T::one() / T::from_usize(area).unwrap();
                let data = g.data().iter().flat_map(|&v| std::iter::repeat(v * scale).take(area)).collect();
                Tensor::from_vec(shape, data)
            })
            .collect()
    }
}

/// Non-overlapping `k×k` average pooling (stride `k`); spatial dims must be
/// multiples of `k`.
pub struct AvgPool {
    channels: usize,
    k: usize,
}

impl AvgPool {
    pub fn new(channels: usize, k: usize) -> Self {
        assert!(k >= 1);
        AvgPool { channels, k }
    }
}

pub fn avg_pool<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4();
    if h % k != 0 || w % k != 0 {
        return Err(Error::argument(format!("pool {k} does not divide spatial dims {h}x{w}")));
    }
    let (oh, ow) = (h / k, w / k);
    let scale = T::one() / T::from_usize(k * k).unwrap();
    let mut out = vec![T::zero(); n * c * oh * ow];
    for (plane, dst) in x.data().chunks_exact(h * w).zip(out.chunks_exact_mut(oh * ow)) {
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            let drow = &mut dst[(y / k) * ow..(y / k + 1) * ow];
            for (xi, &v) in row.iter().enumerate() {
                drow[xi / k] += v;
            }
        }
        dst.iter_mut().for_each(|v| *v *= scale);
    }
    Tensor::from_vec(&[n, c, oh, ow], out)
}

/// Gradient of [`avg_pool`] w.r.t. its input, given the output gradient.
pub fn avg_pool_backward<T: Scalar>(g: &Tensor<T>, k: usize, input_shape: &[usize]) -> Result<Tensor<T>> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (oh, ow) = (h / k, w / k);
    let scale = T::one() / T::from_usize(k * k).unwrap();
    let mut out = vec![T::zero(); input_shape.iter().product()];
    for (gp, dst) in g.data().chunks_exact(oh * ow).zip(out.chunks_exact_mut(h * w)) {
        for y in 0..h {
            for xi in 0..w {
                dst[y * w + xi] = gp[(y / k) * ow + xi / k] * scale;
            }
        }
    }
    Tensor::from_vec(input_shape, out)
}

impl<T: Scalar> Layer<T> for AvgPool {
    fn specs(&self) -> Vec<LayerSpec> {
        let mut spec = LayerSpec::simple(LayerKind::AvgPool, self.channels);
        spec.kernel = self.k;
        spec.stride = self.k;
        vec![spec]
    }

    fn forward_group(&self, xs: &[Tensor<T>], mode: Mode) -> Result<(Vec<Tensor<T>>, Saved<T>)> {
        let mut saved = Saved::new(mode);
        let ys = xs
            .iter()
            .map(|x| {
                saved.shapes.push(x.shape().to_vec());
                avg_pool(x, self.k)
            })
            .collect::<Result<_>>()?;
        Ok((ys, saved))
    }

    fn backward_group(&mut self, saved: &Saved<T>, grads: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        saved
            .shapes
            .iter()
            .zip(grads)
            .map(|(shape, g)| avg_pool_backward(g, self.k, shape))
            .collect()
    }
}
