use std::sync::Mutex;

use super::{Layer, LayerKind, LayerSpec, Mode, Param, ParamVisitor, ParamVisitorRef, Saved};
use crate::error::{Error, Result};
use crate::tensor::{shape_string, Scalar, Tensor};

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPSILON: f64 = 1e-5;

struct Running<T> {
    mean: Param<T>,
    var: Param<T>,
}

/// Per-channel batch normalization. In train mode statistics are pooled over
/// every tensor of the input group; running statistics follow
/// `r ← 0.9·r + 0.1·batch` (unbiased variance).
pub struct BatchNorm2d<T> {
    gamma: Param<T>,
    beta: Param<T>,
    running: Mutex<Running<T>>,
    channels: usize,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(Tensor::full(&[channels], T::one())),
            beta: Param::new(Tensor::zeros(&[channels])),
            running: Mutex::new(Running {
                mean: Param::buffer(Tensor::zeros(&[channels])),
                var: Param::buffer(Tensor::full(&[channels], T::one())),
            }),
            channels,
        }
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().len() != 4 || x.shape()[1] != self.channels {
            return Err(Error::Shape {
                layer: format!("BatchNorm({})", self.channels),
                detail: format!("expected (N,{},H,W), got {}", self.channels, shape_string(x.shape())),
            });
        }
        Ok(())
    }
}

/// Iterates `(channel, plane)` over an NCHW buffer.
fn planes<T>(data: &[T], channels: usize, plane: usize) -> impl Iterator<Item = (usize, &[T])> {
    data.chunks_exact(plane).enumerate().map(move |(i, p)| (i % channels, p))
}

impl<T: Scalar> Layer<T> for BatchNorm2d<T> {
    fn specs(&self) -> Vec<LayerSpec> {
        vec![LayerSpec::simple(LayerKind::BatchNorm, self.channels)]
    }

    fn forward_group(&self, xs: &[Tensor<T>], mode: Mode) -> Result<(Vec<Tensor<T>>, Saved<T>)> {
        let c = self.channels;
        for x in xs {
            self.check(x)?;
        }
        let eps = T::lit(BN_EPSILON);
        let (mean, var) = match mode {
            Mode::Train => {
                let mut sum = vec![T::zero(); c];
                let mut count = 0usize;
                for x in xs {
                    let (_, _, h, w) = x.dims4();
                    for (ch, p) in planes(x.data(), c, h * w) {
                        sum[ch] += p.iter().copied().sum::<T>();
                    }
                    count += x.len() / c;
                }
                let m = T::from_usize(count).unwrap();
                let mean: Vec<T> = sum.iter().map(|&s| s / m).collect();
                let mut sq = vec![T::zero(); c];
                for x in xs {
                    let (_, _, h, w) = x.dims4();
                    for (ch, p) in planes(x.data(), c, h * w) {
                        sq[ch] += p.iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
                    }
                }
                let var: Vec<T> = sq.iter().map(|&s| s / m).collect();
                let mut running = self.running.lock().expect("running stats lock");
                let momentum = T::lit(BN_MOMENTUM);
                let unbias = if count > 1 { m / (m - T::one()) } else { T::one() };
                for ch in 0..c {
                    let rm = &mut running.mean.value.data_mut()[ch];
                    *rm = momentum * *rm + (T::one() - momentum) * mean[ch];
                    let rv = &mut running.var.value.data_mut()[ch];
                    *rv = momentum * *rv + (T::one() - momentum) * var[ch] * unbias;
                }
                (mean, var)
            }
            Mode::Eval => {
                let running = self.running.lock().expect("running stats lock");
                (running.mean.value.data().to_vec(), running.var.value.data().to_vec())
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gamma = self.gamma.value.data();
        let beta = self.beta.value.data();
        let mut saved = Saved::new(mode);
        saved.tensors.push(Tensor::from_vec(&[c], inv_std.clone())?);
        let mut ys = Vec::with_capacity(xs.len());
        for x in xs {
            let (_, _, h, w) = x.dims4();
            let mut xhat = x.clone();
            let mut y = x.clone();
            for (i, (xp, yp)) in xhat
                .data_mut()
                .chunks_exact_mut(h * w)
                .zip(y.data_mut().chunks_exact_mut(h * w))
                .enumerate()
            {
                let ch = i % c;
                for (xv, yv) in xp.iter_mut().zip(yp.iter_mut()) {
                    *xv = (*xv - mean[ch]) * inv_std[ch];
                    *yv = gamma[ch] * *xv + beta[ch];
                }
            }
            saved.tensors.push(xhat);
            ys.push(y);
        }
        Ok((ys, saved))
    }

    fn backward_group(&mut self, saved: &Saved<T>, grads: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
        let c = self.channels;
        let inv_std = saved.tensors[0].data();
        let xhats = &saved.tensors[1..];
        let mut dbeta = vec![T::zero(); c];
        let mut dgamma = vec![T::zero(); c];
        let mut count = 0usize;
        for (xhat, g) in xhats.iter().zip(grads) {
            let (_, _, h, w) = xhat.dims4();
            for ((ch, xp), (_, gp)) in planes(xhat.data(), c, h * w).zip(planes(g.data(), c, h * w)) {
                for (&xv, &gv) in xp.iter().zip(gp) {
                    dbeta[ch] += gv;
                    dgamma[ch] += gv * xv;
                }
            }
            count += xhat.len() / c;
        }
        let m = T::from_usize(count).unwrap();
        let gamma = self.gamma.value.data().to_vec();
        for ch in 0..c {
            self.beta.grad.data_mut()[ch] += dbeta[ch];
            self.gamma.grad.data_mut()[ch] += dgamma[ch];
        }
        let mut dxs = Vec::with_capacity(grads.len());
        for (xhat, g) in xhats.iter().zip(grads) {
            let (_, _, h, w) = xhat.dims4();
            let mut dx = g.clone();
            for (i, (dp, xp)) in dx
                .data_mut()
                .chunks_exact_mut(h * w)
                .zip(xhat.data().chunks_exact(h * w))
                .enumerate()
            {
                let ch = i % c;
                let scale = gamma[ch] * inv_std[ch];
                if saved.train {
                    for (d, &xv) in dp.iter_mut().zip(xp) {
                        *d = scale / m * (m * *d - dbeta[ch] - xv * dgamma[ch]);
                    }
                } else {
                    dp.iter_mut().for_each(|d| *d *= scale);
                }
            }
            dxs.push(dx);
        }
        Ok(dxs)
    }

    fn visit_params(&mut self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(&format!("{prefix}gamma"), &mut self.gamma);
        f(&format!("{prefix}beta"), &mut self.beta);
        let running = self.running.get_mut().expect("running stats lock");
        f(&format!("{prefix}running_mean"), &mut running.mean);
        f(&format!("{prefix}running_var"), &mut running.var);
    }

    fn visit_params_ref(&self, prefix: &str, f: &mut ParamVisitorRef<'_, T>) {
        f(&format!("{prefix}gamma"), &self.gamma);
        f(&format!("{prefix}beta"), &self.beta);
        let running = self.running.lock().expect("running stats lock");
        f(&format!("{prefix}running_mean"), &running.mean);
        f(&format!("{prefix}running_var"), &running.var);
    }
}
