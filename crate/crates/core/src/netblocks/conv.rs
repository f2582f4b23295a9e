use rand::Rng;

use super::{LayerKind, LayerSpec, Mode, Param, ParamVisitor, ParamVisitorRef, Saved, INIT_STD};
use crate::error::{Error, Result};
use crate::netblocks::Layer;
use crate::tensor::{matmul, shape_string, MatRef, Scalar, Tensor};

/// Geometry of a convolution from a `(c, h, w)` image onto an `(oh, ow)` grid.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    /// Input coordinate for output coordinate `o` and kernel tap `t`, if in bounds.
    #[inline]
    fn source(&self, o: usize, t: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + t) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

/// Unfolds a batch into a `(c·k·k) × (n·oh·ow)` patch matrix.
fn im2col<T: Scalar>(x: &[T], n: usize, g: &Geometry) -> Vec<T> {
    let cols = n * g.cols();
    let mut col = vec![T::zero(); g.rows() * cols];
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst_row = &mut col[row * cols..(row + 1) * cols];
                for b in 0..n {
                    let plane = &x[(b * g.c + c) * g.h * g.w..(b * g.c + c + 1) * g.h * g.w];
                    let dst = &mut dst_row[b * g.cols()..(b + 1) * g.cols()];
                    for oy in 0..g.oh {
                        let Some(iy) = g.source(oy, ky, g.h) else { continue };
                        let src = &plane[iy * g.w..(iy + 1) * g.w];
                        let out = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                        for (ox, v) in out.iter_mut().enumerate() {
                            if let Some(ix) = g.source(ox, kx, g.w) {
                                *v = src[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters a patch matrix back onto the image grid.
fn col2im<T: Scalar>(col: &[T], n: usize, g: &Geometry) -> Vec<T> {
    let cols = n * g.cols();
    let mut x = vec![T::zero(); n * g.c * g.h * g.w];
    for c in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src_row = &col[row * cols..(row + 1) * cols];
                for b in 0..n {
                    let plane = &mut x[(b * g.c + c) * g.h * g.w..(b * g.c + c + 1) * g.h * g.w];
                    let src = &src_row[b * g.cols()..(b + 1) * g.cols()];
                    for oy in 0..g.oh {
                        let Some(iy) = g.source(oy, ky, g.h) else { continue };
                        let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                        for (ox, &v) in src[oy * g.ow..(oy + 1) * g.ow].iter().enumerate() {
                            if let Some(ix) = g.source(ox, kx, g.w) {
                                dst[ix] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `(n, c, p)` → `(c, n·p)`.
fn batch_to_channel_major<T: Scalar>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let src = &x[(b * c + ch) * p..(b * c + ch + 1) * p];
            out[ch * n * p + b * p..ch * n * p + (b + 1) * p].copy_from_slice(src);
        }
    }
    out
}

/// `(c, n·p)` → `(n, c, p)`.
fn channel_major_to_batch<T: Scalar>(x: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[(b * c + ch) * p..(b * c + ch + 1) * p]
                .copy_from_slice(&x[ch * n * p + b * p..ch * n * p + (b + 1) * p]);
        }
    }
    out
}

fn add_channel_bias<T: Scalar>(y: &mut [T], bias: &[T], p: usize) {
    for (plane, &b) in y.chunks_exact_mut(p).zip(bias.iter().cycle()) {
        plane.iter_mut().for_each(|v| *v += b);
    }
}

fn accumulate_bias_grad<T: Scalar>(grad: &mut [T], g: &[T], p: usize) {
    let c = grad.len();
    for (i, plane) in g.chunks_exact(p).enumerate() {
        grad[i % c] += plane.iter().copied().sum::<T>();
    }
}

/// Square-kernel convolution with "same" padding (`kernel / 2`). Stride 1
/// preserves spatial dims; stride 2 halves them and requires even input dims.
pub struct Conv2d<T> {
    weight: Param<T>,
    bias: Option<Param<T>>,
    spec: LayerSpec,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(kernel % 2 == 1, "same padding needs an odd kernel");
        assert!(stride == 1 || stride == 2, "supported strides are 1 and 2");
        let kind = if stride == 2 { LayerKind::StridedConv } else { LayerKind::Conv };
        Conv2d {
            weight: Param::truncated_normal(&[out_channels, in_channels, kernel, kernel], INIT_STD, rng),
            bias: bias.then(|| Param::new(Tensor::zeros(&[out_channels]))),
            spec: LayerSpec {
                kind,
                kernel,
                stride,
                in_channels,
                out_channels,
                bias,
                has_norm_before_activation: false,
            },
        }
    }

    /// Marks the conv as feeding a batch norm (recorded in its spec).
    pub fn normed(mut self) -> Self {
        self.spec.has_norm_before_activation = true;
        self
    }

    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let pad = self.spec.kernel / 2;
        let k = self.spec.kernel;
        ((h + 2 * pad - k) / self.spec.stride + 1, (w + 2 * pad - k) / self.spec.stride + 1)
    }

    fn geometry(&self, x: &Tensor<T>) -> Result<Geometry> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.spec.in_channels {
            return Err(Error::Shape {
                layer: self.spec.to_string(),
                detail: format!("expected (N,{},H,W), got {}", self.spec.in_channels, shape_string(shape)),
            });
        }
        let (h, w) = (shape[2], shape[3]);
        if self.spec.stride == 2 && (h % 2 != 0 || w % 2 != 0) {
            return Err(Error::Shape {
                layer: self.spec.to_string(),
                detail: format!("stride 2 needs even spatial dims, got {h}x{w}"),
            });
        }
        let (oh, ow) = self.output_dims(h, w);
        Ok(Geometry {
            c: self.spec.in_channels,
            h,
            w,
            k: self.spec.kernel,
            stride: self.spec.stride,
            pad: self.spec.kernel / 2,
            oh,
            ow,
        })
    }
}

impl<T: Scalar> Layer<T> for Conv2d<T> {
    fn specs(&self) -> Vec<LayerSpec> {
        vec![self.spec.clone()]
    }

    fn forward_group(&self, xs: &[Tensor<T>], mode: Mode) -> Result<(Vec<Tensor<T>>, Saved<T>)> {
        let mut saved = Saved::new(mode);
        let mut ys = Vec::with_capacity(xs.len());
        let cout = self.spec.out_channels;
        for x in xs {
            let g = self.geometry(x)?;
            let n = x.shape()[0];
            let col = im2col(x.data(), n, &g);
            let mut out = vec![T::zero(); cout * n * g.cols()];
            matmul(
                cout,
                g.rows(),
                n * g.cols(),
                MatRef::new(self.weight.value.data()),
                MatRef::new(&col),
                &mut out,
                false,
            );
            let mut y = channel_major_to_batch(&out, n, cout, g.cols());
            if let Some(b) = &self.bias {
                add_channel_bias(&mut y, b.value.data(), g.cols());
            }
            ys.push(Tensor::from_vec(&[n, cout, g.oh, g.ow], y)?);
            saved.tensors.push(x.clone());
        }
        Ok((ys, saved))
    }

    fn backward_group(&mut self, saved: &Saved<T>, grads: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let cout = self.spec.out_channels;
        let mut dxs = Vec::with_capacity(grads.len());
        for (x, gy) in saved.tensors.iter().zip(grads) {
            let g = self.geometry(x)?;
            let n = x.shape()[0];
            let col = im2col(x.data(), n, &g);
            let dout = batch_to_channel_major(gy.data(), n, cout, g.cols());
            matmul(
                cout,
                n * g.cols(),
                g.rows(),
                MatRef::new(&dout),
                MatRef::t(&col),
                self.weight.grad.data_mut(),
                true,
            );
            if let Some(b) = &mut self.bias {
                accumulate_bias_grad(b.grad.data_mut(), gy.data(), g.cols());
            }
            let mut dcol = vec![T::zero(); g.rows() * n * g.cols()];
            matmul(
                g.rows(),
                cout,
                n * g.cols(),
                MatRef::t(self.weight.value.data()),
                MatRef::new(&dout),
                &mut dcol,
                false,
            );
            dxs.push(Tensor::from_vec(x.shape(), col2im(&dcol, n, &g))?);
        }
        Ok(dxs)
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&format!("{prefix}weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&format!("{prefix}bias"), b);
        }
    }

    fn visit_params_ref(&self, prefix: &str, f: &mut ParamVisitorRef<'_, T>) {
        f(&format!("{prefix}weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&format!("{prefix}bias"), b);
        }
    }
}

/// Fractionally strided convolution that exactly doubles each spatial dim.
///
/// Implemented as the adjoint of a stride-2 [`Conv2d`] with padding
/// `kernel / 2`, i.e. output size `2H × 2W` for input `H × W`.
pub struct ConvTranspose2d<T> {
    weight: Param<T>,
    bias: Option<Param<T>>,
    spec: LayerSpec,
}

impl<T: Scalar> ConvTranspose2d<T> {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, bias: bool, rng: &mut impl Rng) -> Self {
        assert!(kernel % 2 == 1 && kernel >= 3, "doubling needs an odd kernel >= 3");
        ConvTranspose2d {
            weight: Param::truncated_normal(&[in_channels, out_channels, kernel, kernel], INIT_STD, rng),
            bias: bias.then(|| Param::new(Tensor::zeros(&[out_channels]))),
            spec: LayerSpec {
                kind: LayerKind::TransposedConv,
                kernel,
                stride: 2,
                in_channels,
                out_channels,
                bias,
                has_norm_before_activation: false,
            },
        }
    }

    pub fn normed(mut self) -> Self {
        self.spec.has_norm_before_activation = true;
        self
    }

    fn geometry(&self, x: &Tensor<T>) -> Result<Geometry> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.spec.in_channels {
            return Err(Error::Shape {
                layer: self.spec.to_string(),
                detail: format!("expected (N,{},H,W), got {}", self.spec.in_channels, shape_string(shape)),
            });
        }
        Ok(Geometry {
            c: self.spec.out_channels,
            h: 2 * shape[2],
            w: 2 * shape[3],
            k: self.spec.kernel,
            stride: 2,
            pad: self.spec.kernel / 2,
            oh: shape[2],
            ow: shape[3],
        })
    }
}

impl<T: Scalar> Layer<T> for ConvTranspose2d<T> {
    fn specs(&self) -> Vec<LayerSpec> {
        vec![self.spec.clone()]
    }

    fn forward_group(&self, xs: &[Tensor<T>], mode: Mode) -> Result<(Vec<Tensor<T>>, Saved<T>)> {
        let mut saved = Saved::new(mode);
        let mut ys = Vec::with_capacity(xs.len());
        let cin = self.spec.in_channels;
        for x in xs {
            let g = self.geometry(x)?;
            let n = x.shape()[0];
            let x_mat = batch_to_channel_major(x.data(), n, cin, g.cols());
            let mut col = vec![T::zero(); g.rows() * n * g.cols()];
            matmul(
                g.rows(),
                cin,
                n * g.cols(),
                MatRef::t(self.weight.value.data()),
                MatRef::new(&x_mat),
                &mut col,
                false,
            );
            let mut y = col2im(&col, n, &g);
            if let Some(b) = &self.bias {
                add_channel_bias(&mut y, b.value.data(), g.h * g.w);
            }
            ys.push(Tensor::from_vec(&[n, g.c, g.h, g.w], y)?);
            saved.tensors.push(x.clone());
        }
        Ok((ys, saved))
    }

    fn backward_group(&mut self, saved: &Saved<T>, grads: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let cin = self.spec.in_channels;
        let mut dxs = Vec::with_capacity(grads.len());
        for (x, gy) in saved.tensors.iter().zip(grads) {
            let g = self.geometry(x)?;
            let n = x.shape()[0];
            let x_mat = batch_to_channel_major(x.data(), n, cin, g.cols());
            let dcol = im2col(gy.data(), n, &g);
            matmul(
                cin,
                n * g.cols(),
                g.rows(),
                MatRef::new(&x_mat),
                MatRef::t(&dcol),
                self.weight.grad.data_mut(),
                true,
            );
            if let Some(b) = &mut self.bias {
                accumulate_bias_grad(b.grad.data_mut(), gy.data(), g.h * g.w);
            }
            let mut dx_mat = vec![T::zero(); cin * n * g.cols()];
            matmul(
                cin,
                g.rows(),
                n * g.cols(),
                MatRef::new(self.weight.value.data()),
                MatRef::new(&dcol),
                &mut dx_mat,
                false,
            );
            dxs.push(Tensor::from_vec(x.shape(), channel_major_to_batch(&dx_mat, n, cin, g.cols()))?);
        }
        Ok(dxs)
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&format!("{prefix}weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&format!("{prefix}bias"), b);
        }
    }

    fn visit_params_ref(&self, prefix: &str, f: &mut ParamVisitorRef<'_, T>) {
        f(&format!("{prefix}weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(&format!("{prefix}bias"), b);
        }
    }
}
