//! Adam optimizer with bias correction.
//!
//! The reference procedure this lab mirrors used Adafactor; factored second
//! moments buy nothing at this scale, so a plain Adam update sits behind the
//! same interface. Frozen tensors are never passed in and therefore stay
//! bit-identical across steps.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Precision;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Per-parameter first/second moment buffers plus the shared step counter.
/// Parameters are identified by name; moment buffers are created lazily on
/// the first update and always match their parameter's length.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub hyper: AdamHyper,
    step: u64,
    slots: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(hyper: AdamHyper) -> Self {
        OptimizerState { hyper, step: 0, slots: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update over `(name, param, grad)` triples. The step counter
    /// advances exactly once per call.
    pub fn apply<'a, I>(&mut self, params: I, precision: Precision) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Vec<f64>, &'a [f64])>,
    {
        self.step += 1;
        let t = self.step as i32;
        let h = self.hyper;
        let bc1 = 1.0 - h.beta1.powi(t);
        let bc2 = 1.0 - h.beta2.powi(t);
        for (name, data, grad) in params {
            if grad.len() != data.len() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer_step",
                    lhs: vec![data.len()],
                    rhs: vec![grad.len()],
                });
            }
            let slot = self
                .slots
                .entry(name.to_string())
                .or_insert_with(|| Moments { m: vec![0.0; data.len()], v: vec![0.0; data.len()] });
            if slot.m.len() != data.len() {
                return Err(Error::ShapeMismatch {
                    op: "optimizer_step",
                    lhs: vec![data.len()],
                    rhs: vec![slot.m.len()],
                });
            }
            for i in 0..data.len() {
                let g = grad[i];
                slot.m[i] = h.beta1 * slot.m[i] + (1.0 - h.beta1) * g;
                slot.v[i] = h.beta2 * slot.v[i] + (1.0 - h.beta2) * g * g;
                let mhat = slot.m[i] / bc1;
                let vhat = slot.v[i] / bc2;
                data[i] = precision.quantize(data[i] - h.lr * mhat / (vhat.sqrt() + h.eps));
            }
        }
        Ok(())
    }

    /// Moment buffers flattened for checkpointing, keyed as
    /// `opt.m.<name>` / `opt.v.<name>`.
    pub fn export(&self) -> (u64, BTreeMap<String, Vec<f64>>) {
        let mut out = BTreeMap::new();
        for (name, mom) in &self.slots {
            out.insert(format!("opt.m.{name}"), mom.m.clone());
            out.insert(format!("opt.v.{name}"), mom.v.clone());
        }
        (self.step, out)
    }

    pub fn import(hyper: AdamHyper, step: u64, buffers: &BTreeMap<String, Vec<f64>>) -> Self {
        let mut slots: BTreeMap<String, Moments> = BTreeMap::new();
        for (key, buf) in buffers {
            if let Some(name) = key.strip_prefix("opt.m.") {
                slots
                    .entry(name.to_string())
                    .or_insert_with(|| Moments { m: Vec::new(), v: Vec::new() })
                    .m = buf.clone();
            } else if let Some(name) = key.strip_prefix("opt.v.") {
                slots
                    .entry(name.to_string())
                    .or_insert_with(|| Moments { m: Vec::new(), v: Vec::new() })
                    .v = buf.clone();
            }
        }
        OptimizerState { hyper, step, slots }
    }
}
