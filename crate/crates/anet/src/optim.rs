use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AnetModel, SlotKind};

pub const DEFAULT_LR: f64 = 1e-4;

/// Bias-corrected Adam over the trainable slots of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamMeta {
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(model: &AnetModel, lr: f64) -> Self {
        AdamState {
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; model.params.len()],
            v: vec![0.0; model.params.len()],
        }
    }

    pub fn meta(&self) -> AdamMeta {
        AdamMeta {
            t: self.t,
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    /// One update; running-statistic buffers are left alone.
    pub fn step(&mut self, model: &mut AnetModel, grads: &[f64]) -> Result<()> {
        if grads.len() != model.params.len() || self.m.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                model.params.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let ranges: Vec<_> = model
            .slots()
            .iter()
            .filter(|s| s.kind == SlotKind::Param)
            .map(|s| s.range())
            .collect();
        for range in ranges {
            for i in range {
                let g = grads[i];
                self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
                self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
                let mhat = self.m[i] / c1;
                let vhat = self.v[i] / c2;
                model.params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step(state: &mut AdamState, model: &mut AnetModel, grads: &[f64]) -> Result<()> {
    state.step(model, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AnetConfig;

    fn model() -> AnetModel {
        AnetModel::init(AnetConfig::new(1, 2), 9).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut m = model();
        let before = m.params.clone();
        let mut s = AdamState::new(&m, 1e-3);
        s.step(&mut m, &vec![0.0; before.len()]).unwrap();
        assert_eq!(m.params, before);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn first_step_closed_form() {
        let mut m = model();
        let before = m.params.clone();
        let grads: Vec<f64> = (0..before.len()).map(|i| ((i % 7) as f64 - 3.0) * 0.01).collect();
        let mut s = AdamState::new(&m, 1e-3);
        s.step(&mut m, &grads).unwrap();
        for slot in m.slots() {
            for i in slot.range() {
                let want = match slot.kind {
                    SlotKind::Param => before[i] - 1e-3 * grads[i] / (grads[i].abs() + 1e-8),
                    SlotKind::Buffer => before[i],
                };
                assert!((m.params[i] - want).abs() <= 1e-15, "{}", slot.name);
            }
        }
        assert!(s.v.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let run = || {
            let mut m = model();
            let mut s = AdamState::new(&m, 1e-2);
            for k in 0..10 {
                let g: Vec<f64> = m.params.iter().map(|p| (p * 3.0 + k as f64).sin()).collect();
                s.step(&mut m, &g).unwrap();
            }
            m.params
        };
        assert_eq!(run(), run());
    }
}
