//! Adam with per-block moments and learning-rate schedules.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::vocab::Token;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;
/// Tabular gradients carry the example weights (joint probabilities over a whole
/// batch), which can sit near `EPS` and would stall rare rows.
pub const TABULAR_EPS: f64 = 1e-14;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate to zero over `total_steps`.
    Cosine { total_steps: u64 },
}

impl LrSchedule {
    pub fn lr(&self, base: f64, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine { total_steps } => {
                let frac = (step as f64 / total_steps.max(1) as f64).min(1.0);
                base * 0.5 * (1.0 + (PI * frac).cos())
            }
        }
    }
}

/// First and second moments for one parameter block, with its own step count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamMoments {
    pub fn new(n: usize) -> Self {
        AdamMoments {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64, eps: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let c1 = 1.0 - BETA1.powf(self.t as f64);
        let c2 = 1.0 - BETA2.powf(self.t as f64);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "blocks", rename_all = "snake_case")]
pub enum Moments {
    #[default]
    Empty,
    /// Keyed by context tokens.
    Tabular(Vec<(Vec<Token>, AdamMoments)>),
    /// One block per tensor.
    Neural(Vec<AdamMoments>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub schedule: LrSchedule,
    pub moments: Moments,
}

impl OptimizerState {
    pub fn new(schedule: LrSchedule) -> Self {
        OptimizerState {
            step: 0,
            schedule,
            moments: Moments::Empty,
        }
    }

    /// Learning rate for the next step.
    pub fn lr(&self, base: f64) -> f64 {
        self.schedule.lr(base, self.step)
    }

    pub(crate) fn tabular_moments(&mut self) -> BTreeMap<Vec<Token>, AdamMoments> {
        match std::mem::take(&mut self.moments) {
            Moments::Tabular(v) => v.into_iter().collect(),
            _ => BTreeMap::new(),
        }
    }

    pub(crate) fn set_tabular_moments(&mut self, m: BTreeMap<Vec<Token>, AdamMoments>) {
        self.moments = Moments::Tabular(m.into_iter().collect());
    }
}
