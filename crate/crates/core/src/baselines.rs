//! Baselines on the same data and environment: behavior cloning (SFT),
//! correctness-filtered cloning (RFT), critique prediction (CFT) and
//! group-normalized policy gradient without clipping or KL (GRPO-lite).

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Style};
use crate::env::{Env, TaskInstance};
use crate::error::{FcpError, Result};
use crate::oracle::JointTable;
use crate::policy::{AggregationMode, Example, LrSchedule, OptimizerState, Policy};
use crate::rng::stream;
use crate::sequence::{critique_context, TokenSequence};
use crate::train::{train_examples, OfflineSchedule, TrainOutcome};

/// Groups whose reward spread is at most this get zero advantages.
pub const ADVANTAGE_EPS: f64 = 1e-8;

/// Rewards of one sampling group and their normalized advantages
/// `(r - mean) / std` (population std).
#[derive(Clone, Debug, PartialEq)]
pub struct GroupAdvantage {
    pub group: Vec<(TokenSequence, f64)>,
    pub advantages: Vec<f64>,
}

impl GroupAdvantage {
    pub fn new(group: Vec<(TokenSequence, f64)>) -> Self {
        let rewards: Vec<f64> = group.iter().map(|(_, r)| *r).collect();
        let advantages = normalized_advantages(&rewards);
        GroupAdvantage { group, advantages }
    }
}

/// Computed as `(n r_i - sum r) / sqrt(sum_j (n r_j - sum r)^2 / n)`, which
/// equals `(r_i - mean) / std` but keeps shifted and power-of-two scaled groups
/// bit-identical whenever the sums are exact.
pub fn normalized_advantages(rewards: &[f64]) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let n = rewards.len() as f64;
    let total: f64 = rewards.iter().sum();
    let centered: Vec<f64> = rewards.iter().map(|r| n * r - total).collect();
    let scale = (centered.iter().map(|d| d * d).sum::<f64>() / n).sqrt();
    if !(scale > n * ADVANTAGE_EPS) {
        return vec![0.0; rewards.len()];
    }
    centered.iter().map(|d| d / scale).collect()
}

/// Behavior cloning on bare-instruction contexts; feedback is ignored.
pub fn train_sft(policy: &mut Policy, dataset: &Dataset, schedule: &OfflineSchedule, seed: u64) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(FcpError::Contract("SFT dataset is empty".into()));
    }
    let examples: Vec<Example> = dataset
        .iter()
        .map(|t| Example::new(t.instruction.clone(), t.response.clone()))
        .collect();
    train_examples(policy, &examples, schedule, seed, "sft-shuffle")
}

/// Triples whose response verifies as correct, in order.
pub fn filter_correct(dataset: &Dataset, env: &Env) -> Result<Dataset> {
    let mut kept = Vec::new();
    for t in dataset.iter() {
        let x = env.parse_task(&t.instruction)?;
        if env.verify(&x, &t.response).is_correct() {
            kept.push(t.clone());
        }
    }
    Ok(Dataset {
        triples: kept,
        provenance: dataset.provenance,
    })
}

/// SFT on the correct subset.
pub fn train_rft(policy: &mut Policy, dataset: &Dataset, env: &Env, schedule: &OfflineSchedule, seed: u64) -> Result<TrainOutcome> {
    let kept = filter_correct(dataset, env)?;
    if kept.is_empty() {
        return Err(FcpError::Config(format!(
            "RFT found no correct responses among {} triples",
            dataset.len()
        )));
    }
    train_sft(policy, &kept, schedule, seed)
}

/// `([x, o], c)` pairs.
pub fn cft_examples(dataset: &Dataset) -> Result<Vec<Example>> {
    dataset
        .iter()
        .map(|t| Ok(Example::new(critique_context(&t.instruction, &t.response)?, t.feedback.text().clone())))
        .collect()
}

/// Every `(o, c)` cell with positive mass as a critique example.
pub fn exhaustive_cft_examples(joint: &JointTable) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (o, resp) in joint.responses.iter().enumerate() {
        let ctx = critique_context(&joint.instruction, resp)?;
        for (c, fb) in joint.feedbacks.iter().enumerate() {
            if joint.joint[o][c] > 0.0 {
                out.push(Example::weighted(ctx.clone(), fb.clone(), joint.joint[o][c]));
            }
        }
    }
    Ok(out)
}

/// Critique prediction: maximum likelihood of the feedback given `[x, o]`.
pub fn train_cft(policy: &mut Policy, dataset: &Dataset, schedule: &OfflineSchedule, seed: u64) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(FcpError::Contract("CFT dataset is empty".into()));
    }
    train_examples(policy, &cft_examples(dataset)?, schedule, seed, "cft-shuffle")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoSchedule {
    pub rounds: u32,
    pub prompt_batch: usize,
    pub group_size: usize,
    pub lr: f64,
    pub temperature: f64,
}

impl Default for GrpoSchedule {
    fn default() -> Self {
        GrpoSchedule {
            rounds: 30,
            prompt_batch: 64,
            group_size: 4,
            lr: 3e-4,
            temperature: 1.0,
        }
    }
}

impl GrpoSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(FcpError::Config("GRPO-lite needs at least 2 rollouts per prompt".into()));
        }
        if self.prompt_batch == 0 || !(self.lr > 0.0) || !(self.temperature > 0.0) {
            return Err(FcpError::Config("GRPO-lite needs prompt_batch >= 1 and positive lr and temperature".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrpoRound {
    pub round: u32,
    pub mean_reward: f64,
    pub accuracy: f64,
    pub mean_length: f64,
    pub loss: f64,
}

struct Sampled {
    instruction: TokenSequence,
    group: GroupAdvantage,
    correct: usize,
    length: usize,
}

/// One advantage-weighted update per round from groups sampled with the
/// pre-update parameters. Rewards are the environment's scalar scores.
#[allow(clippy::too_many_arguments)]
pub fn train_grpo_lite<F>(
    policy: &mut Policy,
    env: &Env,
    instructions: &[TaskInstance],
    schedule: &GrpoSchedule,
    style: Style,
    seed: u64,
    mut on_round: F,
) -> Result<Vec<GrpoRound>>
where
    F: FnMut(&GrpoRound, &Policy) -> Result<()>,
{
    schedule.validate()?;
    if instructions.is_empty() {
        return Err(FcpError::Config("GRPO-lite needs at least one instruction".into()));
    }
    let mut opt = OptimizerState::new(LrSchedule::Constant);
    let mut curve = Vec::new();
    for t in 1..=schedule.rounds {
        let start = (t as usize - 1) * schedule.prompt_batch;
        let snapshot = policy.clone();
        let groups = (0..schedule.prompt_batch)
            .into_par_iter()
            .map(|j| {
                let x = &instructions[(start + j) % instructions.len()];
                let mut rng = stream(seed, &format!("grpo-{t}"), j as u64);
                let mut group = Vec::with_capacity(schedule.group_size);
                let (mut correct, mut length) = (0, 0);
                for _ in 0..schedule.group_size {
                    let o = snapshot.sample(x.instruction(), &mut rng, schedule.temperature)?;
                    let c = env.give_feedback(x, &o, style, &mut rng);
                    correct += env.verify(x, &o).is_correct() as usize;
                    length += o.content_len();
                    group.push((o, c.score().unwrap_or(0.0)));
                }
                Ok(Sampled {
                    instruction: x.instruction().clone(),
                    group: GroupAdvantage::new(group),
                    correct,
                    length,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        drop(snapshot);
        let n = (schedule.prompt_batch * schedule.group_size) as f64;
        let mut examples = Vec::new();
        let (mut reward, mut correct, mut length) = (0.0, 0, 0);
        for s in &groups {
            correct += s.correct;
            length += s.length;
            for ((o, r), a) in s.group.group.iter().zip(&s.group.advantages) {
                reward += r;
                if *a != 0.0 {
                    examples.push(Example::weighted(s.instruction.clone(), o.clone(), *a));
                }
            }
        }
        let loss = if examples.is_empty() {
            0.0
        } else {
            let lr = opt.lr(schedule.lr);
            policy.gradient_step(&mut opt, &examples, AggregationMode::SeqMeanTokenSum, lr)?
        };
        let rec = GrpoRound {
            round: t,
            mean_reward: reward / n,
            accuracy: correct as f64 / n,
            mean_length: length as f64 / n,
            loss,
        };
        info!("grpo round {t}: reward {:.3}, accuracy {:.3}", rec.mean_reward, rec.accuracy);
        on_round(&rec, policy)?;
        curve.push(rec);
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ScoredFeedback, Triple};
    use crate::env::TaskKind;
    use crate::oracle::{enumerate_joint, total_variation, verifiable_case_check};
    use crate::policy::{TableRole, TabularPolicy};
    use crate::sequence::Role;
    use crate::train::{collect_offline, exhaustive_examples, SchedulerKind, Selection};
    use crate::vocab::Token;
    use proptest::prelude::*;

    fn setup(n: usize, seed: u64) -> (Env, Vec<TaskInstance>, Policy) {
        let env = Env::standard(0.05).unwrap();
        let mut rng = stream(seed, "tasks", 0);
        let xs: Vec<TaskInstance> = (0..n)
            .map(|_| env.generate_instruction(TaskKind::ModularArithmetic, 5, &mut rng).unwrap())
            .collect();
        let mut t = TabularPolicy::new(TableRole::Response, env.vocab().len());
        for x in &xs {
            let (o, p): (Vec<_>, Vec<_>) = env.reference_space(x).unwrap().into_iter().unzip();
            t.add_response_space(x.instruction(), o, &p).unwrap();
        }
        (env, xs, Policy::Tabular(t))
    }

    fn sched(epochs: usize, lr: f64) -> OfflineSchedule {
        OfflineSchedule {
            epochs,
            batch_size: 4,
            lr,
            scheduler: SchedulerKind::Constant,
            aggregation: AggregationMode::TokenMean,
        }
    }

    #[test]
    fn advantages_hand_values() {
        assert_eq!(normalized_advantages(&[1.0, 0.0]), vec![1.0, -1.0]);
        assert_eq!(normalized_advantages(&[0.5; 4]), vec![0.0; 4]);
        let a = normalized_advantages(&[0.9, 0.1, 0.1, 0.1]);
        assert!((a[0] - 3f64.sqrt()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn advantages_are_centered_and_invariant(
            r in proptest::collection::vec(0u32..=64, 2..9),
            shift in -8i32..8,
            k in 0i32..6,
        ) {
            // dyadic rewards keep every operation exact
            let rewards: Vec<f64> = r.iter().map(|&v| v as f64 / 64.0).collect();
            let a = normalized_advantages(&rewards);
            prop_assert!(a.iter().sum::<f64>().abs() < 1e-9);
            let shifted: Vec<f64> = rewards.iter().map(|v| v + shift as f64).collect();
            prop_assert_eq!(normalized_advantages(&shifted), a.clone());
            let scaled: Vec<f64> = rewards.iter().map(|v| v * 2f64.powi(k)).collect();
            prop_assert_eq!(normalized_advantages(&scaled), a);
        }

        #[test]
        fn advantages_invariant_for_general_reals(
            rewards in proptest::collection::vec(0.0f64..1.0, 2..9),
            shift in -5.0f64..5.0,
            scale in 0.1f64..10.0,
        ) {
            let a = normalized_advantages(&rewards);
            let b = normalized_advantages(&rewards.iter().map(|v| v * scale + shift).collect::<Vec<_>>());
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sft_ignores_feedback() {
        let (env, xs, p) = setup(6, 1);
        let d = collect_offline(&p, &env, &xs, 3, Selection::All, Style::Reviewer, 2).unwrap();
        let mut shuffled = d.clone();
        let n = shuffled.len();
        for i in 0..n {
            let j = (i * 7 + 3) % n;
            let (a, b) = (shuffled.triples[i].feedback.clone(), shuffled.triples[j].feedback.clone());
            shuffled.triples[i].feedback = b;
            shuffled.triples[j].feedback = a;
        }
        let mut a = p.clone();
        let mut b = p.clone();
        let la = train_sft(&mut a, &d, &sched(3, 0.05), 4).unwrap().losses;
        let lb = train_sft(&mut b, &shuffled, &sched(3, 0.05), 4).unwrap().losses;
        assert_eq!(la, lb);
        assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn rft_is_sft_on_the_filtered_set() {
        let (env, xs, p) = setup(8, 2);
        let d = collect_offline(&p, &env, &xs, 4, Selection::All, Style::User, 3).unwrap();
        let mut a = p.clone();
        let mut b = p.clone();
        let la = train_rft(&mut a, &d, &env, &sched(2, 0.05), 9).unwrap().losses;
        let lb = train_sft(&mut b, &filter_correct(&d, &env).unwrap(), &sched(2, 0.05), 9).unwrap().losses;
        assert_eq!(la, lb);
        assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn rft_trains_only_on_correct_and_rejects_none() {
        let (env, xs, p) = setup(1, 3);
        let x = &xs[0];
        let space = env.reference_space(x).unwrap();
        let wrong = space.iter().find(|(o, _)| !env.verify(x, o).is_correct()).unwrap().0.clone();
        let c = env.representative(crate::env::Polarity::FullyNegative, Style::User);
        let triple = |o: TokenSequence| {
            Triple::new(x.instruction().clone(), o, ScoredFeedback::new(c.clone(), Style::User, Some(0.1)).unwrap()).unwrap()
        };
        let only_wrong = Dataset::offline(vec![triple(wrong.clone())]);
        assert!(matches!(train_rft(&mut p.clone(), &only_wrong, &env, &sched(1, 0.1), 0), Err(FcpError::Config(_))));
        let mixed = Dataset::offline(vec![triple(x.ground_truth().clone()), triple(wrong)]);
        assert_eq!(filter_correct(&mixed, &env).unwrap().len(), 1);
        let all_correct = filter_correct(&mixed, &env).unwrap();
        let mut a = p.clone();
        let mut b = p.clone();
        train_rft(&mut a, &all_correct, &env, &sched(5, 0.1), 1).unwrap();
        train_sft(&mut b, &all_correct, &sched(5, 0.1), 1).unwrap();
        assert_eq!(a.digest(), b.digest());
    }

    #[test]
    fn rft_fixed_point_matches_verifiable_posterior() {
        let (env, xs, p) = setup(1, 5);
        let x = &xs[0];
        let t = p.as_tabular().unwrap();
        let (joint, correct) = crate::oracle::verifier_joint(
            t,
            &env,
            x,
            env.representative(crate::env::Polarity::FullyPositive, Style::User),
            env.representative(crate::env::Polarity::FullyNegative, Style::User),
        )
        .unwrap();
        let report = verifiable_case_check(&joint, &correct, 0).unwrap();
        // exhaustive RFT data: every correct response weighted by its prior
        let examples: Vec<Example> = joint
            .responses
            .iter()
            .zip(&joint.prior)
            .zip(&correct)
            .filter(|(_, ok)| **ok)
            .map(|((o, w), _)| Example::weighted(x.instruction().clone(), o.clone(), *w))
            .collect();
        let mut policy = p.clone();
        let s = OfflineSchedule {
            epochs: 3000,
            batch_size: 0,
            lr: 0.05,
            scheduler: SchedulerKind::Cosine,
            aggregation: AggregationMode::SeqMeanTokenSum,
        };
        train_examples(&mut policy, &examples, &s, 0, "rft").unwrap();
        let got = policy.as_tabular().unwrap().probabilities(x.instruction()).unwrap();
        assert!(total_variation(&got, &report.posterior) < 1e-3);
    }

    fn critique_table(env: &Env) -> Policy {
        let support = env.feedback_support(Style::Reviewer);
        let n = support.len();
        let mut t = TabularPolicy::new(TableRole::Critique, env.vocab().len());
        t.add_critique_space(support, &vec![1.0 / n as f64; n]).unwrap();
        Policy::Tabular(t)
    }

    #[test]
    fn cft_recovers_the_likelihood_and_duality_rebuilds_the_joint() {
        let (env, xs, p) = setup(1, 6);
        let x = &xs[0];
        let joint = enumerate_joint(p.as_tabular().unwrap(), &env, x, Style::Reviewer).unwrap();
        let s = OfflineSchedule {
            epochs: 3000,
            batch_size: 0,
            lr: 0.2,
            scheduler: SchedulerKind::Cosine,
            aggregation: AggregationMode::SeqMeanTokenSum,
        };
        let mut cft = critique_table(&env);
        train_examples(&mut cft, &exhaustive_cft_examples(&joint).unwrap(), &s, 0, "cft").unwrap();
        let mut fcp = p.clone();
        train_examples(&mut fcp, &exhaustive_examples(&joint).unwrap(), &s, 0, "fcp").unwrap();
        let (cft, fcp) = (cft.as_tabular().unwrap(), fcp.as_tabular().unwrap());
        let mut rebuilt = Vec::new();
        let mut truth = Vec::new();
        for (o, resp) in joint.responses.iter().enumerate() {
            let lik = cft.probabilities(&critique_context(x.instruction(), resp).unwrap()).unwrap();
            let tv = total_variation(&lik, &joint.likelihood[o]);
            assert!(tv < 1e-3, "response {o}: tv {tv}, prior {}", joint.prior[o]);
            for (c, l) in lik.iter().enumerate() {
                rebuilt.push(joint.prior[o] * l);
                truth.push(joint.joint[o][c]);
            }
        }
        assert!(total_variation(&rebuilt, &truth) < 1e-3);
        // the FCP side recovers the posterior on the same data
        for c in joint.support() {
            let ctx = crate::sequence::wrap_context(&joint.feedbacks[c], x.instruction()).unwrap();
            assert!(total_variation(&fcp.probabilities(&ctx).unwrap(), &joint.posterior(c).unwrap()) < 1e-3);
        }
    }

    #[test]
    fn cft_policy_rejects_response_sampling_and_fits_point_masses() {
        let (env, xs, p) = setup(2, 7);
        let mut cft = critique_table(&env);
        let mut rng = stream(0, "s", 0);
        let ctx = critique_context(xs[0].instruction(), xs[0].ground_truth()).unwrap();
        assert!(cft.sample(&ctx, &mut rng, 1.0).is_err());
        // a deterministic critic: one feedback per context
        let d = collect_offline(&p, &env, &xs[..1], 1, Selection::All, Style::Reviewer, 1).unwrap();
        let out = train_cft(&mut cft, &d, &sched(400, 0.1), 0).unwrap();
        assert!(out.losses.last().unwrap() < &1e-3);
    }

    #[test]
    fn rewarded_response_gains_probability() {
        let env = Env::standard(0.0).unwrap();
        let x = TokenSequence::new(Role::Instruction, vec![Token::new(10)]).unwrap();
        let a = TokenSequence::response(vec![Token::new(20), Token::EOS]).unwrap();
        let b = TokenSequence::response(vec![Token::new(21), Token::EOS]).unwrap();
        let mut t = TabularPolicy::new(TableRole::Response, env.vocab().len());
        t.add_response_space(&x, vec![a.clone(), b.clone()], &[0.5, 0.5]).unwrap();
        let mut p = Policy::Tabular(t);
        let g = GroupAdvantage::new(vec![(a.clone(), 1.0), (b.clone(), 0.0)]);
        let ex: Vec<Example> = g.group.iter().zip(&g.advantages).map(|((o, _), w)| Example::weighted(x.clone(), o.clone(), *w)).collect();
        let before = p.log_prob(&x, &a).unwrap().total;
        let mut opt = OptimizerState::new(LrSchedule::Constant);
        p.gradient_step(&mut opt, &ex, AggregationMode::SeqMeanTokenSum, 0.1).unwrap();
        assert!(p.log_prob(&x, &a).unwrap().total > before);
        // equal rewards contribute nothing
        assert!(GroupAdvantage::new(vec![(a, 0.7), (b, 0.7)]).advantages.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn grpo_lite_runs_and_improves_reward() {
        let (env, xs, p) = setup(16, 8);
        let mut policy = p.clone();
        let s = GrpoSchedule {
            rounds: 25,
            prompt_batch: 16,
            group_size: 4,
            lr: 0.1,
            temperature: 1.0,
        };
        let mut seen = 0;
        let curve = train_grpo_lite(&mut policy, &env, &xs, &s, Style::Reviewer, 3, |_, _| {
            seen += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!((curve.len(), seen), (25, 25));
        let head: f64 = curve[..5].iter().map(|r| r.mean_reward).sum::<f64>() / 5.0;
        let tail: f64 = curve[20..].iter().map(|r| r.mean_reward).sum::<f64>() / 5.0;
        assert!(tail > head, "{head} -> {tail}");
        assert!(matches!(
            train_grpo_lite(&mut p.clone(), &env, &xs, &GrpoSchedule { group_size: 1, ..s }, Style::Reviewer, 0, |_, _| Ok(())),
            Err(FcpError::Config(_))
        ));
    }
}
