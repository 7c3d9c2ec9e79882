//! Offline FCP training, condition pools, and online bootstrapping.

pub mod expected;
pub mod offline;
pub mod online;
pub mod pool;

use serde::{Deserialize, Serialize};

use crate::error::{FcpError, Result};
use crate::policy::{AggregationMode, LrSchedule};

pub use expected::{bootstrap_expected, ExpectedFit, ExpectedRound};
pub use offline::{collect_offline, exhaustive_examples, fcp_examples, train_examples, train_offline, TrainOutcome};
pub use online::{bootstrap, round_metrics, BootstrapState, Rollout, RolloutBuffer, RoundMetrics, RoundReport};
pub use pool::{build_condition_pool, ConditionPool, PoolConfig, LENGTH_LEXICON};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Keep every sampled response.
    #[default]
    All,
    /// Keep one correct and one incorrect response per prompt that has both.
    BalancedPair,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionAssignment {
    #[default]
    SharedPerPrompt,
    PerRollout,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    #[default]
    Cosine,
    Constant,
}

/// Minibatch training over a fixed example set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OfflineSchedule {
    pub epochs: usize,
    /// Examples per step; 0 means the whole set.
    pub batch_size: usize,
    pub lr: f64,
    pub scheduler: SchedulerKind,
    pub aggregation: AggregationMode,
}

impl Default for OfflineSchedule {
    fn default() -> Self {
        OfflineSchedule {
            epochs: 1,
            batch_size: 32,
            lr: 1e-3,
            scheduler: SchedulerKind::Cosine,
            aggregation: AggregationMode::TokenMean,
        }
    }
}

impl OfflineSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || !(self.lr > 0.0) {
            return Err(FcpError::Config("offline schedule needs epochs >= 1 and lr > 0".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        let b = if self.batch_size == 0 { n } else { self.batch_size.min(n) };
        n.div_ceil(b.max(1))
    }

    pub fn lr_schedule(&self, n: usize) -> LrSchedule {
        match self.scheduler {
            SchedulerKind::Constant => LrSchedule::Constant,
            SchedulerKind::Cosine => LrSchedule::Cosine {
                total_steps: (self.epochs * self.steps_per_epoch(n)) as u64,
            },
        }
    }
}

/// Online bootstrapping schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSchedule {
    #[serde(rename = "T")]
    pub rounds: u32,
    #[serde(rename = "S")]
    pub steps_per_round: usize,
    pub prompt_batch: usize,
    pub rollouts_per_prompt: usize,
    #[serde(rename = "B")]
    pub train_batch: usize,
    pub aggregation: AggregationMode,
    pub condition_assignment: ConditionAssignment,
    pub lr: f64,
    pub temperature: f64,
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        TrainingSchedule {
            rounds: 30,
            steps_per_round: 4,
            prompt_batch: 64,
            rollouts_per_prompt: 4,
            train_batch: 64,
            aggregation: AggregationMode::TokenMean,
            condition_assignment: ConditionAssignment::SharedPerPrompt,
            lr: 1e-4,
            temperature: 1.0,
        }
    }
}

impl TrainingSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_round == 0 || self.prompt_batch == 0 || self.rollouts_per_prompt == 0 || self.train_batch == 0 {
            return Err(FcpError::Config("online S, prompt_batch, rollouts_per_prompt and B must be positive".into()));
        }
        if self.prompt_batch * self.rollouts_per_prompt < self.train_batch {
            return Err(FcpError::Config(format!(
                "prompt_batch x rollouts_per_prompt = {} cannot fill B = {}",
                self.prompt_batch * self.rollouts_per_prompt,
                self.train_batch
            )));
        }
        if !(self.lr > 0.0) || !(self.temperature > 0.0) {
            return Err(FcpError::Config("online lr and temperature must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_validation() {
        assert!(TrainingSchedule::default().validate().is_ok());
        let s = TrainingSchedule {
            prompt_batch: 2,
            rollouts_per_prompt: 2,
            train_batch: 5,
            ..TrainingSchedule::default()
        };
        assert!(matches!(s.validate(), Err(FcpError::Config(_))));
        let o = OfflineSchedule {
            batch_size: 0,
            ..OfflineSchedule::default()
        };
        assert_eq!(o.steps_per_epoch(10), 1);
        assert_eq!(OfflineSchedule::default().steps_per_epoch(65), 3);
    }
}
