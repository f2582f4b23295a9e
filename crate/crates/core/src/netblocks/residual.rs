use rand::Rng;

use super::{BatchNorm2d, Conv2d, Layer, LayerSpec, Mode, ParamVisitor, ParamVisitorRef, Relu, Saved, Sequential};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// `relu(x + bn(conv(relu(bn(conv(x))))))` with 3×3 convs and identity skip.
pub struct ResidualBlock<T> {
    body: Sequential<T>,
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Self {
        let body = Sequential::new(vec![
            Box::new(Conv2d::new(channels, channels, 3, 1, false, rng).normed()),
            Box::new(BatchNorm2d::new(channels)),
            Box::new(Relu::new(channels)),
            Box::new(Conv2d::new(channels, channels, 3, 1, false, rng).normed()),
            Box::new(BatchNorm2d::new(channels)),
        ]);
        ResidualBlock { body }
    }
}

impl<T: Scalar> Layer<T> for ResidualBlock<T> {
    fn specs(&self) -> Vec<LayerSpec> {
        self.body.specs()
    }

    fn forward_group(&self, xs: &[Tensor<T>], mode: Mode) -> Result<(Vec<Tensor<T>>, Saved<T>)> {
        let (hs, body_saved) = self.body.forward_group(xs, mode)?;
        let ys: Vec<Tensor<T>> = hs
            .iter()
            .zip(xs)
            .map(|(h, x)| h.zip_map(x, |a, b| (a + b).max(T::zero())))
            .collect();
        let mut saved = Saved::new(mode);
        saved.children.push(body_saved);
        saved.tensors = ys.clone();
        Ok((ys, saved))
    }

    fn backward_group(&mut self, saved: &Saved<T>, grads: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let gated: Vec<Tensor<T>> = saved
            .tensors
            .iter()
            .zip(grads)
            .map(|(y, g)| g.zip_map(y, |g, y| if y > T::zero() { g } else { T::zero() }))
            .collect();
        let mut dxs = self.body.backward_group(&saved.children[0], &gated)?;
        for (dx, g) in dxs.iter_mut().zip(&gated) {
            dx.add_assign(g);
        }
        Ok(dxs)
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.body.visit_params(&format!("{prefix}body."), f);
    }

    fn visit_params_ref(&self, prefix: &str, f: &mut ParamVisitorRef<'_, T>) {
        self.body.visit_params_ref(&format!("{prefix}body."), f);
    }
}
