use super::{Layer, LayerKind, LayerSpec, Mode, Saved};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Negative slope of every LeakyReLU in the enhancer networks.
pub const LEAKY_SLOPE: f64 = 0.2;

pub struct LeakyRelu {
    channels: usize,
    slope: f64,
}

impl LeakyRelu {
    pub fn new(channels: usize) -> Self {
        LeakyRelu { channels, slope: LEAKY_SLOPE }
    }
}

impl<T: Scalar> Layer<T> for LeakyRelu {
    fn specs(&self) -> Vec<LayerSpec> {
        vec![LayerSpec::simple(LayerKind::LeakyRelu, self.channels)]
    }

    fn forward_group(&self, xs: &[Tensor<T>], mode: Mode) -> Result<(Vec<Tensor<T>>, Saved<T>)> {
        let slope = T::lit(self.slope);
        let mut saved = Saved::new(mode);
        saved.tensors = xs.to_vec();
        let ys = xs
            .iter()
            .map(|x| x.map(|v| if v >= T::zero() { v } else { slope * v }))
            .collect();
        Ok((ys, saved))
    }

    fn backward_group(&mut self, saved: &Saved<T>, grads: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let slope = T::lit(self.slope);
        Ok(saved
            .tensors
            .iter()
            .zip(grads)
            .map(|(x, g)| g.zip_map(x, |g, x| if x >= T::zero() { g } else { slope * g }))
            .collect())
    }
}

pub struct Relu {
    channels: usize,
}

impl Relu {
    pub fn new(channels: usize) -> Self {
        Relu { channels }
    }
}

impl<T: Scalar> Layer<T> for Relu {
    fn specs(&self) -> Vec<LayerSpec> {
        vec![LayerSpec::simple(LayerKind::Relu, self.channels)]
    }

    fn forward_group(&self, xs: &[Tensor<T>], mode: Mode) -> Result<(Vec<Tensor<T>>, Saved<T>)> {
        let ys: Vec<Tensor<T>> = xs.iter().map(|x| x.map(|v| v.max(T::zero()))).collect();
        let mut saved = Saved::new(mode);
        saved.tensors = ys.clone();
        Ok((ys, saved))
    }

    fn backward_group(&mut self, saved: &Saved<T>, grads: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        Ok(saved
            .tensors
            .iter()
            .zip(grads)
            .map(|(y, g)| g.zip_map(y, |g, y| if y > T::zero() { g } else { T::zero() }))
            .collect())
    }
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub struct Sigmoid {
    channels: usize,
}

impl Sigmoid {
    pub fn new(channels: usize) -> Self {
        Sigmoid { channels }
    }
}

impl<T: Scalar> Layer<T> for Sigmoid {
    fn specs(&self) -> Vec<LayerSpec> {
        vec![LayerSpec::simple(LayerKind::Sigmoid, self.channels)]
    }

    fn forward_group(&self, xs: &[Tensor<T>], mode: Mode) -> Result<(Vec<Tensor<T>>, Saved<T>)> {
        let ys: Vec<Tensor<T>> = xs.iter().map(|x| x.map(sigmoid)).collect();
        let mut saved = Saved::new(mode);
        saved.tensors = ys.clone();
        Ok((ys, saved))
    }

    fn backward_group(&mut self, saved: &Saved<T>, grads: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        Ok(saved
            .tensors
            .iter()
            .zip(grads)
            .map(|(y, g)| g.zip_map(y, |g, y| g * y * (T::one() - y)))
            .collect())
    }
}
