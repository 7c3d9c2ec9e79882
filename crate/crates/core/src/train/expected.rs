//! Bootstrapping in the infinite-sample limit on the tabular backend.
//!
//! Each round replaces the sampled buffer with its expectation: the rollout
//! distribution `r(o|x) = sum_c+ q(c+) pi(o|c+, x)` times the exact feedback
//! likelihood. Training on that joint either to convergence (`Exact`, the
//! posterior) or for a fixed number of full-batch steps (`Gradient`).

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Style;
use crate::env::{Env, Polarity, TaskInstance};
use crate::error::{FcpError, Result};
use crate::oracle::JointTable;
use crate::policy::{AggregationMode, LrSchedule, OptimizerState, Policy, TabularPolicy};
use crate::sequence::{wrap_context, TokenSequence};
use crate::vocab::Token;

use super::offline::exhaustive_examples;
use super::pool::ConditionPool;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExpectedFit {
    Exact,
    Gradient { steps: usize, lr: f64 },
}

/// Expected statistics for one round. `probe_*` fields describe the policy after
/// the round conditioned on a fixed feedback; `rollout_*` fields describe the
/// round's rollout distribution. Round 0 reports the starting parameters and has
/// no rollout fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpectedRound {
    pub round: u32,
    pub probe_accuracy: f64,
    pub probe_positive_rate: f64,
    pub probe_mean_length: f64,
    pub rollout_accuracy: Option<f64>,
    pub rollout_positive_rate: Option<f64>,
    pub rollout_mean_length: Option<f64>,
    pub rollout_mean_score: Option<f64>,
}

struct PromptTable {
    instruction: TokenSequence,
    responses: Vec<TokenSequence>,
    correct: Vec<f64>,
    length: Vec<f64>,
    positive: Vec<f64>,
    score: Vec<f64>,
    likelihood: Vec<Vec<f64>>,
}

fn prompt_table(policy: &TabularPolicy, env: &Env, x: &TaskInstance, style: Style, support: &[TokenSequence]) -> Result<PromptTable> {
    let index: BTreeMap<&[Token], usize> = support.iter().enumerate().map(|(i, c)| (c.tokens(), i)).collect();
    let responses = policy.outcomes(x.instruction())?.to_vec();
    let mut t = PromptTable {
        instruction: x.instruction().clone(),
        correct: Vec::new(),
        length: Vec::new(),
        positive: Vec::new(),
        score: Vec::new(),
        likelihood: Vec::new(),
        responses: Vec::new(),
    };
    for o in &responses {
        let mut row = vec![0.0; support.len()];
        let (mut pos, mut score) = (0.0, 0.0);
        for f in env.feedback_distribution(x, o, style) {
            row[index[f.feedback.tokens()]] = f.probability;
            if f.polarity == Polarity::FullyPositive {
                pos += f.probability;
            }
            score += f.probability * f.score;
        }
        t.correct.push(if env.verify(x, o).is_correct() { 1.0 } else { 0.0 });
        t.length.push(o.content_len() as f64);
        t.positive.push(pos);
        t.score.push(score);
        t.likelihood.push(row);
    }
    t.responses = responses;
    Ok(t)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn probe_stats(policy: &TabularPolicy, tables: &[PromptTable], probe: &TokenSequence) -> Result<(f64, f64, f64)> {
    let mut acc = (0.0, 0.0, 0.0);
    for t in tables {
        let p = policy.probabilities(&wrap_context(probe, &t.instruction)?)?;
        acc.0 += dot(&p, &t.correct);
        acc.1 += dot(&p, &t.positive);
        acc.2 += dot(&p, &t.length);
    }
    let n = tables.len() as f64;
    Ok((acc.0 / n, acc.1 / n, acc.2 / n))
}

/// Runs `rounds` expected bootstrap rounds from `theta`. Conditions not emitted
/// under a round's rollout distribution keep their previous rows.
#[allow(clippy::too_many_arguments)]
pub fn bootstrap_expected(
    theta: &TabularPolicy,
    pool: &ConditionPool,
    env: &Env,
    instructions: &[TaskInstance],
    rounds: u32,
    fit: ExpectedFit,
    style: Style,
    probe: &TokenSequence,
) -> Result<(TabularPolicy, Vec<ExpectedRound>)> {
    if instructions.is_empty() {
        return Err(FcpError::Config("expected bootstrap needs at least one instruction".into()));
    }
    let support = env.feedback_support(style);
    let tables = instructions
        .par_iter()
        .map(|x| prompt_table(theta, env, x, style, &support))
        .collect::<Result<Vec<_>>>()?;
    let q = pool.probabilities();
    let mut policy = theta.clone();
    let mut opt = OptimizerState::new(LrSchedule::Constant);
    let (a, p, l) = probe_stats(&policy, &tables, probe)?;
    let mut log = vec![ExpectedRound {
        round: 0,
        probe_accuracy: a,
        probe_positive_rate: p,
        probe_mean_length: l,
        rollout_accuracy: None,
        rollout_positive_rate: None,
        rollout_mean_length: None,
        rollout_mean_score: None,
    }];
    let n = tables.len() as f64;
    for t in 1..=rounds {
        let mut joints = Vec::with_capacity(tables.len());
        let mut roll = [0.0; 4];
        for tab in &tables {
            let mut r = vec![0.0; tab.responses.len()];
            for ((c, _), w) in pool.entries.iter().zip(&q) {
                let pc = policy.probabilities(&wrap_context(c, &tab.instruction)?)?;
                for (ri, pi) in r.iter_mut().zip(pc) {
                    *ri += w * pi;
                }
            }
            let total: f64 = r.iter().sum();
            r.iter_mut().for_each(|v| *v /= total);
            roll[0] += dot(&r, &tab.correct);
            roll[1] += dot(&r, &tab.positive);
            roll[2] += dot(&r, &tab.length);
            roll[3] += dot(&r, &tab.score);
            joints.push(JointTable::from_parts(
                tab.instruction.clone(),
                tab.responses.clone(),
                support.clone(),
                r,
                tab.likelihood.clone(),
            )?);
        }
        match fit {
            ExpectedFit::Exact => {
                for j in &joints {
                    for c in j.support() {
                        policy.set_distribution(&wrap_context(&j.feedbacks[c], &j.instruction)?, &j.posterior(c)?)?;
                    }
                }
            }
            ExpectedFit::Gradient { steps, lr } => {
                let mut examples = Vec::new();
                for j in &joints {
                    examples.extend(exhaustive_examples(j)?);
                }
                let mut wrapped = Policy::Tabular(policy);
                for _ in 0..steps {
                    wrapped.gradient_step(&mut opt, &examples, AggregationMode::SeqMeanTokenSum, lr)?;
                }
                policy = match wrapped {
                    Policy::Tabular(p) => p,
                    Policy::Neural(_) => unreachable!("wrapped a tabular policy"),
                };
            }
        }
        let (a, p, l) = probe_stats(&policy, &tables, probe)?;
        log.push(ExpectedRound {
            round: t,
            probe_accuracy: a,
            probe_positive_rate: p,
            probe_mean_length: l,
            rollout_accuracy: Some(roll[0] / n),
            rollout_positive_rate: Some(roll[1] / n),
            rollout_mean_length: Some(roll[2] / n),
            rollout_mean_score: Some(roll[3] / n),
        });
    }
    Ok((policy, log))
}


#[cfg(test)]
mod length_dynamics {
    use super::*;
    use crate::env::TaskKind;
    use crate::policy::TableRole;
    use crate::rng::stream;
    use crate::train::LENGTH_LEXICON;

    fn rollout_lengths(env: &Env, kind: TaskKind, d: u32, filtered: bool) -> Vec<f64> {
        let mut rng = stream(8, "tasks", 0);
        let xs: Vec<_> = (0..16).map(|_| env.generate_instruction(kind, d, &mut rng).unwrap()).collect();
        let mut t = TabularPolicy::new(TableRole::Response, env.vocab().len());
        for x in &xs {
            let (o, p): (Vec<_>, Vec<_>) = env.reference_space(x).unwrap().into_iter().unzip();
            t.add_response_space(x.instruction(), o, &p).unwrap();
        }
        let lex: Vec<Token> = LENGTH_LEXICON.iter().filter_map(|w| env.vocab().token(w)).collect();
        let entries: Vec<_> = env
            .feedback_support(Style::Reviewer)
            .into_iter()
            .filter(|c| env.classify(c).unwrap().polarity == Polarity::FullyPositive)
            .filter(|c| !filtered || !c.tokens().iter().any(|t| lex.contains(t)))
            .map(|c| (c, 1.0))
            .collect();
        let pool = ConditionPool::new(entries, 0.8, filtered).unwrap();
        let probe = pool.entries[0].0.clone();
        let (off, _) = bootstrap_expected(&t, &pool, env, &xs, 1, ExpectedFit::Exact, Style::Reviewer, &probe).unwrap();
        let (_, log) = bootstrap_expected(&off, &pool, env, &xs, 30, ExpectedFit::Exact, Style::Reviewer, &probe).unwrap();
        log.iter().skip(1).map(|r| r.rollout_mean_length.unwrap()).collect()
    }

    #[test]
    fn length_conditions_shorten_responses_and_filtering_does_not() {
        let env = Env::standard(0.05).unwrap();
        for (kind, d) in [(TaskKind::ModularArithmetic, 9), (TaskKind::StringTransform, 5)] {
            let open = rollout_lengths(&env, kind, d, false);
            assert!(open.windows(2).all(|w| w[1] <= w[0] + 1e-9), "{kind:?} {open:?}");
            assert!(open[29] < open[0] - 0.5);
            let filtered = rollout_lengths(&env, kind, d, true);
            assert!(filtered.windows(2).all(|w| w[1] >= w[0] - 1e-9), "{kind:?} {filtered:?}");
        }
    }
}
