//! Online bootstrapping: roll out under positive conditioning, relabel with
//! fresh feedback, retrain by conditional maximum likelihood.

use std::io::Write;

use log::{info, warn};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Provenance, Style, Triple};
use crate::env::{Env, Polarity, TaskInstance};
use crate::error::{FcpError, Result};
use crate::policy::{Example, LrSchedule, OptimizerState, Policy};
use crate::rng::stream;
use crate::sequence::{wrap_context, TokenSequence};
use crate::vocab::Vocabulary;

use super::pool::ConditionPool;
use super::{ConditionAssignment, TrainingSchedule};

/// One sampled response with its conditioning and fresh annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub prompt_index: usize,
    /// The pool condition the response was sampled under.
    pub condition: TokenSequence,
    /// `(x, o, c)` with `c` the fresh environment feedback.
    pub triple: Triple,
    pub correct: bool,
    pub length: usize,
    pub polarity: Option<Polarity>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBuffer {
    pub round: u32,
    pub rollouts: Vec<Rollout>,
}

#[derive(Serialize)]
struct MetaRecord<'a> {
    prompt: usize,
    c_plus: String,
    c: String,
    verdict: &'a str,
    length: usize,
    score: Option<f64>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.rollouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rollouts.is_empty()
    }

    pub fn dataset(&self) -> Dataset {
        Dataset {
            triples: self.rollouts.iter().map(|r| r.triple.clone()).collect(),
            provenance: Provenance::OnlineRound(self.round),
        }
    }

    /// Per-rollout metadata as JSONL, aligned line by line with the dataset.
    pub fn write_meta<W: Write>(&self, vocab: &Vocabulary, mut sink: W) -> Result<()> {
        for r in &self.rollouts {
            let rec = MetaRecord {
                prompt: r.prompt_index,
                c_plus: vocab.render(r.condition.tokens()),
                c: vocab.render(r.triple.feedback.text().tokens()),
                verdict: if r.correct { "correct" } else { "incorrect" },
                length: r.length,
                score: r.triple.feedback.score(),
            };
            serde_json::to_writer(&mut sink, &rec)?;
            sink.write_all(b"\n").map_err(|e| FcpError::io("<sink>", e))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u32,
    pub accuracy: f64,
    pub positive_feedback_rate: f64,
    pub mean_score: f64,
    pub mean_length: f64,
    pub samples: usize,
}

/// Buffer statistics recomputed from the triples alone. Length counts response
/// tokens without the end-of-sequence marker.
pub fn round_metrics(dataset: &Dataset, env: &Env) -> Result<RoundMetrics> {
    if dataset.is_empty() {
        return Err(FcpError::Contract("round_metrics needs a nonempty buffer".into()));
    }
    let round = match dataset.provenance {
        Provenance::OnlineRound(t) => t,
        Provenance::Offline => 0,
    };
    let n = dataset.len() as f64;
    let (mut correct, mut positive, mut score, mut length) = (0.0, 0.0, 0.0, 0.0);
    for t in dataset.iter() {
        let x = env.parse_task(&t.instruction)?;
        if env.verify(&x, &t.response).is_correct() {
            correct += 1.0;
        }
        if env.classify(t.feedback.text()).map(|i| i.polarity) == Some(Polarity::FullyPositive) {
            positive += 1.0;
        }
        score += t.feedback.score().unwrap_or(0.0);
        length += t.response.content_len() as f64;
    }
    Ok(RoundMetrics {
        round,
        accuracy: correct / n,
        positive_feedback_rate: positive / n,
        mean_score: score / n,
        mean_length: length / n,
        samples: dataset.len(),
    })
}

/// Resumable training state: `round` counts completed rounds.
#[derive(Clone, Debug)]
pub struct BootstrapState {
    pub policy: Policy,
    pub optimizer: OptimizerState,
    pub round: u32,
}

impl BootstrapState {
    pub fn new(policy: Policy) -> Self {
        BootstrapState {
            policy,
            optimizer: OptimizerState::new(LrSchedule::Constant),
            round: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RoundReport {
    pub metrics: RoundMetrics,
    pub buffer: RolloutBuffer,
    pub losses: Vec<f64>,
}

impl RoundReport {
    pub fn mean_loss(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.losses.len().max(1) as f64
    }
}

fn prompt_indices(round: u32, prompt_batch: usize, n: usize) -> Vec<usize> {
    let start = (round as usize - 1) * prompt_batch;
    (0..prompt_batch).map(|j| (start + j) % n).collect()
}

#[allow(clippy::too_many_arguments)]
fn collect_round(
    snapshot: &Policy,
    pool: &ConditionPool,
    env: &Env,
    instructions: &[TaskInstance],
    schedule: &TrainingSchedule,
    style: Style,
    seed: u64,
    round: u32,
) -> RolloutBuffer {
    let prompts = prompt_indices(round, schedule.prompt_batch, instructions.len());
    let per_prompt: Vec<Vec<Rollout>> = prompts
        .par_iter()
        .enumerate()
        .map(|(j, &pi)| {
            let mut rng = stream(seed, &format!("rollout-{round}"), j as u64);
            let x = &instructions[pi];
            let shared = pool.sample(&mut rng).clone();
            let mut out = Vec::with_capacity(schedule.rollouts_per_prompt);
            for k in 0..schedule.rollouts_per_prompt {
                let c_plus = match schedule.condition_assignment {
                    ConditionAssignment::SharedPerPrompt => shared.clone(),
                    ConditionAssignment::PerRollout => pool.sample(&mut rng).clone(),
                };
                let sampled = wrap_context(&c_plus, x.instruction())
                    .and_then(|ctx| snapshot.sample(&ctx, &mut rng, schedule.temperature));
                let o = match sampled {
                    Ok(o) => o,
                    Err(e) => {
                        warn!("round {round}, prompt {pi}, rollout {k} failed: {e}");
                        continue;
                    }
                };
                let c = env.give_feedback(x, &o, style, &mut rng);
                let polarity = env.classify(c.text()).map(|i| i.polarity);
                let correct = env.verify(x, &o).is_correct();
                let length = o.content_len();
                let triple = Triple::new(x.instruction().clone(), o, c).expect("rollout roles are fixed");
                out.push(Rollout {
                    prompt_index: pi,
                    condition: c_plus,
                    triple,
                    correct,
                    length,
                    polarity,
                });
            }
            out
        })
        .collect();
    RolloutBuffer {
        round,
        rollouts: per_prompt.into_iter().flatten().collect(),
    }
}

/// Runs rounds `state.round + 1 ..= schedule.rounds`. Rollouts in a round come
/// from a frozen copy of the parameters; the buffer is used for `S` steps and
/// then discarded. `on_round` sees each report and the updated state, which
/// makes it the place to write checkpoints.
#[allow(clippy::too_many_arguments)]
pub fn bootstrap<F>(
    state: &mut BootstrapState,
    pool: &ConditionPool,
    env: &Env,
    instructions: &[TaskInstance],
    schedule: &TrainingSchedule,
    style: Style,
    seed: u64,
    mut on_round: F,
) -> Result<Vec<RoundReport>>
where
    F: FnMut(&RoundReport, &BootstrapState) -> Result<()>,
{
    schedule.validate()?;
    if pool.is_empty() {
        return Err(FcpError::Config("condition pool is empty".into()));
    }
    if instructions.is_empty() && state.round < schedule.rounds {
        return Err(FcpError::Config("bootstrapping needs at least one instruction".into()));
    }
    let mut reports = Vec::new();
    while state.round < schedule.rounds {
        let t = state.round + 1;
        let snapshot = state.policy.clone();
        let buffer = collect_round(&snapshot, pool, env, instructions, schedule, style, seed, t);
        drop(snapshot);
        if buffer.is_empty() {
            return Err(FcpError::EmptyBuffer { round: t as usize });
        }
        let examples = buffer
            .rollouts
            .iter()
            .map(|r| Ok(Example::new(wrap_context(r.triple.feedback.text(), &r.triple.instruction)?, r.triple.response.clone())))
            .collect::<Result<Vec<_>>>()?;
        let b = schedule.train_batch.min(examples.len());
        let mut shuffle_rng = stream(seed, &format!("bootstrap-shuffle-{t}"), 0);
        let mut order: Vec<usize> = Vec::new();
        let mut losses = Vec::with_capacity(schedule.steps_per_round);
        for _ in 0..schedule.steps_per_round {
            if order.len() < b {
                // reshuffle within this round's buffer only
                let mut fresh: Vec<usize> = (0..examples.len()).collect();
                fresh.shuffle(&mut shuffle_rng);
                order = fresh;
            }
            let batch: Vec<Example> = order.drain(..b).map(|i| examples[i].clone()).collect();
            let lr = state.optimizer.lr(schedule.lr);
            losses.push(state.policy.gradient_step(&mut state.optimizer, &batch, schedule.aggregation, lr)?);
        }
        let metrics = round_metrics(&buffer.dataset(), env)?;
        info!(
            "round {t}: accuracy {:.3}, positive rate {:.3}, mean length {:.2}",
            metrics.accuracy, metrics.positive_feedback_rate, metrics.mean_length
        );
        state.round = t;
        let report = RoundReport { metrics, buffer, losses };
        on_round(&report, state)?;
        reports.push(report);
    }
    Ok(reports)
}
