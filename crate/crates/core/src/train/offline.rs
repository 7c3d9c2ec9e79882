//! Offline data collection and conditional maximum-likelihood training.

use log::warn;
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::dataset::{Dataset, Style, Triple};
use crate::env::{Env, TaskInstance};
use crate::error::{FcpError, Result};
use crate::oracle::JointTable;
use crate::policy::{Example, OptimizerState, Policy};
use crate::rng::stream;
use crate::sequence::wrap_context;

use super::{OfflineSchedule, Selection};

/// Losses above this multiple of the first loss count toward divergence.
const DIVERGENCE_FACTOR: f64 = 10.0;
/// Consecutive high-loss steps that abort training.
const DIVERGENCE_PATIENCE: usize = 50;

/// Samples `n_per_prompt` unconditioned responses per instruction from the
/// reference policy and annotates each with environment feedback. Each prompt
/// draws from its own stream derived from `seed` and its index.
pub fn collect_offline(
    reference: &Policy,
    env: &Env,
    instructions: &[TaskInstance],
    n_per_prompt: usize,
    selection: Selection,
    style: Style,
    seed: u64,
) -> Result<Dataset> {
    if n_per_prompt == 0 {
        return Err(FcpError::Config("n_per_prompt must be at least 1".into()));
    }
    if instructions.is_empty() {
        warn!("empty instruction stream; collected dataset is empty");
        return Ok(Dataset::offline(Vec::new()));
    }
    let per_prompt: Vec<Result<Vec<Triple>>> = instructions
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut rng = stream(seed, "collect", i as u64);
            let mut samples = Vec::with_capacity(n_per_prompt);
            for _ in 0..n_per_prompt {
                let o = reference.sample(x.instruction(), &mut rng, 1.0)?;
                let c = env.give_feedback(x, &o, style, &mut rng);
                let ok = env.verify(x, &o).is_correct();
                samples.push((Triple::new(x.instruction().clone(), o, c)?, ok));
            }
            Ok(match selection {
                Selection::All => samples.into_iter().map(|(t, _)| t).collect(),
                Selection::BalancedPair => {
                    let pos = samples.iter().position(|(_, ok)| *ok);
                    let neg = samples.iter().position(|(_, ok)| !*ok);
                    match (pos, neg) {
                        (Some(p), Some(n)) => {
                            let (a, b) = (p.min(n), p.max(n));
                            vec![samples[a].0.clone(), samples[b].0.clone()]
                        }
                        _ => Vec::new(),
                    }
                }
            })
        })
        .collect();
    let mut triples = Vec::new();
    for t in per_prompt {
        triples.extend(t?);
    }
    Ok(Dataset::offline(triples))
}

/// `(<EF> c </EF> x, o)` pairs.
pub fn fcp_examples(dataset: &Dataset) -> Result<Vec<Example>> {
    dataset
        .iter()
        .map(|t| Ok(Example::new(wrap_context(t.feedback.text(), &t.instruction)?, t.response.clone())))
        .collect()
}

/// Every `(c, o)` cell of the joint with positive mass, weighted by that mass.
pub fn exhaustive_examples(joint: &JointTable) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (c, fb) in joint.feedbacks.iter().enumerate() {
        let ctx = wrap_context(fb, &joint.instruction)?;
        for (o, resp) in joint.responses.iter().enumerate() {
            let w = joint.joint[o][c];
            if w > 0.0 {
                out.push(Example::weighted(ctx.clone(), resp.clone(), w));
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub losses: Vec<f64>,
    pub optimizer: OptimizerState,
}

/// Shuffled minibatch training. `stage` names the shuffling stream, so two
/// calls with the same seed and stage see the same batch order.
pub fn train_examples(
    policy: &mut Policy,
    examples: &[Example],
    schedule: &OfflineSchedule,
    seed: u64,
    stage: &str,
) -> Result<TrainOutcome> {
    schedule.validate()?;
    if examples.is_empty() {
        return Err(FcpError::Contract("training set is empty".into()));
    }
    let n = examples.len();
    let bs = if schedule.batch_size == 0 { n } else { schedule.batch_size.min(n) };
    let mut opt = OptimizerState::new(schedule.lr_schedule(n));
    let mut losses = Vec::new();
    let mut high = 0usize;
    for epoch in 0..schedule.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        if bs < n {
            order.shuffle(&mut stream(seed, stage, epoch as u64));
        }
        for chunk in order.chunks(bs) {
            let owned: Vec<Example>;
            let batch = if bs == n {
                examples
            } else {
                owned = chunk.iter().map(|&i| examples[i].clone()).collect();
                &owned
            };
            let lr = opt.lr(schedule.lr);
            let loss = policy.gradient_step(&mut opt, batch, schedule.aggregation, lr)?;
            let first = *losses.first().unwrap_or(&loss);
            high = if loss > DIVERGENCE_FACTOR * first { high + 1 } else { 0 };
            losses.push(loss);
            if high >= DIVERGENCE_PATIENCE {
                return Err(FcpError::Diverged(format!(
                    "loss {loss:.4e} above {DIVERGENCE_FACTOR}x the initial {first:.4e} for {high} steps (epoch {epoch}, step {})",
                    losses.len()
                )));
            }
        }
    }
    Ok(TrainOutcome { losses, optimizer: opt })
}

/// Conditional maximum likelihood on wrapped `(c, x) -> o` pairs.
pub fn train_offline(policy: &mut Policy, dataset: &Dataset, schedule: &OfflineSchedule, seed: u64) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(FcpError::Contract("offline dataset is empty".into()));
    }
    train_examples(policy, &fcp_examples(dataset)?, schedule, seed, "offline-shuffle")
}
