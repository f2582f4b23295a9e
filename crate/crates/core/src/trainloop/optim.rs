//! SGD with momentum and inverse-time decay, and Adam. State is keyed by
//! parameter name so it can be stored in checkpoints.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netblocks::Network;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Scalar part of an optimizer's state; the per-parameter buffers travel as
/// named tensors.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub kind: OptimizerKind,
    pub step: u64,
}

/// Buffers named `<slot>.<param>`.
pub type SlotTensors = Vec<(String, Vec<f32>)>;

pub trait Optimizer {
    fn step<N: Network<f32> + ?Sized>(&mut self, net: &mut N);
    fn steps(&self) -> u64;
    fn export(&self) -> (OptimizerMeta, SlotTensors);
    fn import(&mut self, meta: &OptimizerMeta, slots: SlotTensors) -> Result<()>;
}

fn export_slots(slots: &[(&str, &BTreeMap<String, Vec<f32>>)]) -> SlotTensors {
    let mut out = Vec::new();
    for (slot, map) in slots {
        for (name, v) in map.iter() {
            out.push((format!("{slot}.{name}"), v.clone()));
        }
    }
    out
}

fn import_slots(
    expected: OptimizerKind,
    meta: &OptimizerMeta,
    slots: SlotTensors,
    maps: &mut [(&str, &mut BTreeMap<String, Vec<f32>>)],
) -> Result<()> {
    if meta.kind != expected {
        return Err(Error::Checkpoint(format!(
            "optimizer state is {:?}, expected {:?}",
            meta.kind, expected
        )));
    }
    for (_, map) in maps.iter_mut() {
        map.clear();
    }
    for (key, v) in slots {
        let (slot, name) = key
            .split_once('.')
            .ok_or_else(|| Error::Checkpoint(format!("malformed optimizer tensor `{key}`")))?;
        let map = maps
            .iter_mut()
            .find(|(s, _)| *s == slot)
            .ok_or_else(|| Error::Checkpoint(format!("unknown optimizer slot `{slot}`")))?;
        map.1.insert(name.to_string(), v);
    }
    Ok(())
}

/// Momentum SGD: `v ← μ·v − η_t·g`, `θ ← θ + v`, with
/// `η_t = η / (1 + decay·t)` and `t` the number of completed steps.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub learning_rate: f64,
    pub decay: f64,
    pub momentum: f64,
    step: u64,
    velocity: BTreeMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(learning_rate: f64, decay: f64, momentum: f64) -> Self {
        Sgd { learning_rate, decay, momentum, step: 0, velocity: BTreeMap::new() }
    }

    pub fn current_rate(&self) -> f64 {
        self.learning_rate / (1.0 + self.decay * self.step as f64)
    }
}

impl Optimizer for Sgd {
    fn step<N: Network<f32> + ?Sized>(&mut self, net: &mut N) {
        let lr = self.current_rate() as f32;
        let mu = self.momentum as f32;
        let velocity = &mut self.velocity;
        net.for_each_param(&mut |name, p| {
            if !p.trainable {
                return;
            }
            let v = velocity.entry(name.to_string()).or_insert_with(|| vec![0.0; p.value.len()]);
            for ((w, g), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(v.iter_mut()) {
                *v = mu * *v - lr * g;
                *w += *v;
            }
        });
        self.step += 1;
    }

    fn steps(&self) -> u64 {
        self.step
    }

    fn export(&self) -> (OptimizerMeta, SlotTensors) {
        let meta = OptimizerMeta { kind: OptimizerKind::Sgd, step: self.step };
        (meta, export_slots(&[("velocity", &self.velocity)]))
    }

    fn import(&mut self, meta: &OptimizerMeta, slots: SlotTensors) -> Result<()> {
        import_slots(OptimizerKind::Sgd, meta, slots, &mut [("velocity", &mut self.velocity)])?;
        self.step = meta.step;
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl Adam {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Adam { learning_rate, beta1, beta2, epsilon, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }
}

impl Optimizer for Adam {
    fn step<N: Network<f32> + ?Sized>(&mut self, net: &mut N) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let lr = (self.learning_rate / c1) as f32;
        let c2 = c2 as f32;
        let eps = self.epsilon as f32;
        let (ms, vs) = (&mut self.m, &mut self.v);
        net.for_each_param(&mut |name, p| {
            if !p.trainable {
                return;
            }
            let m = ms.entry(name.to_string()).or_insert_with(|| vec![0.0; p.value.len()]);
            let v = vs.entry(name.to_string()).or_insert_with(|| vec![0.0; p.value.len()]);
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= lr * *m / ((*v / c2).sqrt() + eps);
            }
        });
    }

    fn steps(&self) -> u64 {
        self.step
    }

    fn export(&self) -> (OptimizerMeta, SlotTensors) {
        let meta = OptimizerMeta { kind: OptimizerKind::Adam, step: self.step };
        (meta, export_slots(&[("m", &self.m), ("v", &self.v)]))
    }

    fn import(&mut self, meta: &OptimizerMeta, slots: SlotTensors) -> Result<()> {
        import_slots(OptimizerKind::Adam, meta, slots, &mut [("m", &mut self.m), ("v", &mut self.v)])?;
        self.step = meta.step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netblocks::{Param, ParamVisitor, ParamVisitorRef};
    use crate::Tensor;

    struct One(Param<f32>);

    impl Network<f32> for One {
        fn for_each_param(&mut self, f: &mut ParamVisitor<'_, f32>) {
            f("w", &mut self.0);
        }
        fn for_each_param_ref(&self, f: &mut ParamVisitorRef<'_, f32>) {
            f("w", &self.0);
        }
    }

    fn one(w: f32, g: f32) -> One {
        let mut p = Param::new(Tensor::from_vec(&[1], vec![w]).unwrap());
        p.grad.data_mut()[0] = g;
        One(p)
    }

    #[test]
    fn sgd_matches_hand_computation() {
        let mut net = one(1.0, 2.0);
        let mut opt = Sgd::new(0.1, 1.0, 0.9);
        opt.step(&mut net);
        // t = 0: v = -0.1·2 = -0.2.
        assert!((net.0.value.data()[0] - 0.8).abs() < 1e-7);
        opt.step(&mut net);
        // t = 1: η = 0.05, v = 0.9·(-0.2) - 0.05·2 = -0.28.
        assert!((net.0.value.data()[0] - 0.52).abs() < 1e-6);
        assert_eq!(opt.steps(), 2);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut net = one(1.0, 3.0);
        let mut opt = Adam::new(0.002, 0.5, 0.999, 1e-8);
        opt.step(&mut net);
        assert!((net.0.value.data()[0] - 0.998).abs() < 1e-6);
    }

    #[test]
    fn buffers_are_not_updated() {
        let mut net = one(1.0, 2.0);
        net.0.trainable = false;
        Sgd::new(0.1, 0.0, 0.9).step(&mut net);
        assert_eq!(net.0.value.data()[0], 1.0);
    }

    #[test]
    fn state_round_trips() {
        let mut net = one(1.0, 2.0);
        let mut a = Adam::new(0.01, 0.5, 0.999, 1e-8);
        a.step(&mut net);
        let (meta, slots) = a.export();
        let mut b = Adam::new(0.01, 0.5, 0.999, 1e-8);
        b.import(&meta, slots).unwrap();
        let mut net_b = one(net.0.value.data()[0], 2.0);
        a.step(&mut net);
        b.step(&mut net_b);
        assert_eq!(net.0.value.data(), net_b.0.value.data());
        let (meta, slots) = Sgd::new(0.1, 0.0, 0.9).export();
        assert!(a.import(&meta, slots).is_err());
    }
}
