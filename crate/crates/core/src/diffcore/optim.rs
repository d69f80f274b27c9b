//! Adam with L2-coupled weight decay and a milestone learning-rate schedule.

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Multiplies the base learning rate by `factor` once per milestone reached.
///
/// Epochs are 1-based and a milestone takes effect at the start of its epoch,
/// so milestones `[15, 25]` over 25 epochs decay once for epochs 15..=24 and
/// twice for epoch 25.
#[derive(Clone, Debug, PartialEq)]
pub struct MilestoneSchedule {
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl MilestoneSchedule {
    pub fn new(milestones: Vec<usize>, factor: f64) -> Result<Self> {
        if milestones.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config(format!(
                "milestones must be sorted: {milestones:?}"
            )));
        }
        Ok(MilestoneSchedule { milestones, factor })
    }

    pub fn constant() -> Self {
        MilestoneSchedule {
            milestones: Vec::new(),
            factor: 1.0,
        }
    }

    pub fn multiplier(&self, epoch: usize) -> f64 {
        let hits = self.milestones.iter().filter(|m| **m <= epoch).count();
        self.factor.powi(hits as i32)
    }
}

/// Per-parameter Adam moments plus step counter and schedule.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub base_lr: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub schedule: MilestoneSchedule,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(
        store: &ParamStore,
        lr: f64,
        weight_decay: f64,
        schedule: MilestoneSchedule,
    ) -> Self {
        let zeros = |s: &ParamStore| -> Vec<Vec<f64>> {
            s.params()
                .iter()
                .map(|p| vec![0.0; p.value.len()])
                .collect()
        };
        OptimState {
            base_lr: lr,
            lr,
            weight_decay,
            schedule,
            step: 0,
            first: zeros(store),
            second: zeros(store),
        }
    }

    /// Applies the schedule for a 1-based epoch.
    pub fn set_epoch(&mut self, epoch: usize) {
        self.lr = self.base_lr * self.schedule.multiplier(epoch);
    }

    /// One Adam update of every parameter that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<()> {
        if grads.len() != store.len() || self.first.len() != store.len() {
            return Err(Error::Shape(
                "optimizer state does not match parameter store".into(),
            ));
        }
        self.step += 1;
        for (i, (g, p)) in grads.iter().zip(store.params_mut()).enumerate() {
            let Some(g) = g else { continue };
            let theta = &mut p.value;
            if g.len() != theta.len() {
                return Err(Error::Shape(format!("gradient {i} has wrong length")));
            }
            adam_update(
                theta.data_mut(),
                g.data(),
                &mut self.first[i],
                &mut self.second[i],
                self.step,
                self.lr,
                self.weight_decay,
            );
        }
        Ok(())
    }
}

/// Bias-corrected Adam update on raw slices; `wd·θ` is added to the gradient
/// before the moments are updated.
pub fn adam_update(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
    wd: f64,
) {
    let bc1 = 1.0 - ADAM_BETA1.powi(step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(step as i32);
    for i in 0..theta.len() {
        let g = grad[i] + wd * theta[i];
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        theta[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
    }
}
