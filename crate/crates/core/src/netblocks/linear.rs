use rand::Rng;

use super::{Layer, LayerKind, LayerSpec, Mode, Param, ParamVisitor, ParamVisitorRef, Saved, INIT_STD};
use crate::error::{Error, Result};
use crate::tensor::{matmul, shape_string, MatRef, Scalar, Tensor};

/// `y = x·Wᵀ + b` on inputs flattened to `(N, in_features)`; output `(N, out)`.
pub struct Affine<T> {
    weight: Param<T>,
    bias: Param<T>,
    in_features: usize,
    out_features: usize,
}

impl<T: Scalar> Affine<T> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        Affine {
            weight: Param::truncated_normal(&[out_features, in_features], INIT_STD, rng),
            bias: Param::new(Tensor::zeros(&[out_features])),
            in_features,
            out_features,
        }
    }

    pub fn weight(&self) -> &Tensor<T> {
        &self.weight.value
    }

    pub fn weight_mut(&mut self) -> &mut Tensor<T> {
        &mut self.weight.value
    }

    pub fn bias_mut(&mut self) -> &mut Tensor<T> {
        &mut self.bias.value
    }
}

impl<T: Scalar> Layer<T> for Affine<T> {
    fn specs(&self) -> Vec<LayerSpec> {
        vec![LayerSpec {
            kind: LayerKind::Affine,
            kernel: 1,
            stride: 1,
            in_channels: self.in_features,
            out_channels: self.out_features,
            bias: true,
            has_norm_before_activation: false,
        }]
    }

    fn forward_group(&self, xs: &[Tensor<T>], mode: Mode) -> Result<(Vec<Tensor<T>>, Saved<T>)> {
        let mut saved = Saved::new(mode);
        let mut ys = Vec::with_capacity(xs.len());
        for x in xs {
            let n = x.shape()[0];
            if x.len() != n * self.in_features {
                return Err(Error::Shape {
                    layer: format!("Affine {}->{}", self.in_features, self.out_features),
                    detail: format!("input {} does not flatten to {} features", shape_string(x.shape()), self.in_features),
                });
            }
            let mut y = vec![T::zero(); n * self.out_features];
            matmul(
                n,
                self.in_features,
                self.out_features,
                MatRef::new(x.data()),
                MatRef::t(self.weight.value.data()),
                &mut y,
                false,
            );
            for row in y.chunks_exact_mut(self.out_features) {
                for (v, &b) in row.iter_mut().zip(self.bias.value.data()) {
                    *v += b;
                }
            }
            ys.push(Tensor::from_vec(&[n, self.out_features], y)?);
            saved.tensors.push(x.clone());
        }
        Ok((ys, saved))
    }

    fn backward_group(&mut self, saved: &Saved<T>, grads: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let mut dxs = Vec::with_capacity(grads.len());
        for (x, g) in saved.tensors.iter().zip(grads) {
            let n = x.shape()[0];
            matmul(
                self.out_features,
                n,
                self.in_features,
                MatRef::t(g.data()),
                MatRef::new(x.data()),
                self.weight.grad.data_mut(),
                true,
            );
            for row in g.data().chunks_exact(self.out_features) {
                for (b, &v) in self.bias.grad.data_mut().iter_mut().zip(row) {
                    *b += v;
                }
            }
            let mut dx = vec![T::zero(); n * self.in_features];
            matmul(
                n,
                self.out_features,
                self.in_features,
                MatRef::new(g.data()),
                MatRef::new(self.weight.value.data()),
                &mut dx,
                false,
            );
            dxs.push(Tensor::from_vec(x.shape(), dx)?);
        }
        Ok(dxs)
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&format!("{prefix}weight"), &mut self.weight);
        f(&format!("{prefix}bias"), &mut self.bias);
    }

    fn visit_params_ref(&self, prefix: &str, f: &mut ParamVisitorRef<'_, T>) {
        f(&format!("{prefix}weight"), &self.weight);
        f(&format!("{prefix}bias"), &self.bias);
    }
}
