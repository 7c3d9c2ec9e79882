//! Conditional-generation evaluation and report writers.
//!
//! CSV layouts (fixed column order):
//! - condition sweep: `condition,seed,accuracy,marker_rate,mean_length,mean_score,sample_count`
//! - dynamics: `method,round,accuracy,mean_score,mean_length,loss` followed by the
//!   same four metrics with a `_ma10` suffix (trailing 10-round moving average).
//!   Missing values are written as `NA`.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Style;
use crate::env::{parse_response, Env, InstanceId, Polarity, TaskInstance};
use crate::error::{FcpError, Result};
use crate::policy::{Decode, Policy};
use crate::rng::stream;
use crate::sequence::{wrap_context, TokenSequence};

pub const MOVING_AVERAGE_WINDOW: usize = 10;
pub const MISSING: &str = "NA";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionLabel {
    FullyPositive,
    FullyNegative,
    Neutral,
    HasCode,
    NullCondition,
}

impl ConditionLabel {
    pub const ALL: [ConditionLabel; 5] = [
        ConditionLabel::FullyPositive,
        ConditionLabel::FullyNegative,
        ConditionLabel::Neutral,
        ConditionLabel::HasCode,
        ConditionLabel::NullCondition,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ConditionLabel::FullyPositive => "fully_positive",
            ConditionLabel::FullyNegative => "fully_negative",
            ConditionLabel::Neutral => "neutral",
            ConditionLabel::HasCode => "has_code",
            ConditionLabel::NullCondition => "null_condition",
        }
    }

    pub fn polarity(self) -> Option<Polarity> {
        match self {
            ConditionLabel::FullyPositive => Some(Polarity::FullyPositive),
            ConditionLabel::FullyNegative => Some(Polarity::FullyNegative),
            ConditionLabel::Neutral => Some(Polarity::Neutral),
            ConditionLabel::HasCode => Some(Polarity::HasCode),
            ConditionLabel::NullCondition => None,
        }
    }
}

/// How an evaluation condition picks its feedback string.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionSampling {
    /// One fixed exemplar per polarity for every question.
    #[default]
    Representative,
    /// A fresh draw per question from every string of the polarity.
    PerQuestion,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalCondition {
    label: ConditionLabel,
    feedback: TokenSequence,
    /// Per-question alternatives; empty means always `feedback`.
    choices: Vec<TokenSequence>,
}

impl EvalCondition {
    pub fn new(label: ConditionLabel, feedback: TokenSequence) -> Result<Self> {
        if (label == ConditionLabel::NullCondition) != feedback.is_empty() {
            return Err(FcpError::Contract(format!(
                "condition {} must {}have empty feedback",
                label.as_str(),
                if label == ConditionLabel::NullCondition { "" } else { "not " }
            )));
        }
        Ok(EvalCondition {
            label,
            feedback,
            choices: Vec::new(),
        })
    }

    /// The grammar's fixed exemplar for the label (empty for the null condition).
    pub fn representative(env: &Env, label: ConditionLabel, style: Style) -> Self {
        let feedback = match label.polarity() {
            Some(p) => env.representative(p, style),
            None => TokenSequence::empty_feedback(),
        };
        EvalCondition {
            label,
            feedback,
            choices: Vec::new(),
        }
    }

    /// Draws each question's feedback uniformly from the strings the grammar
    /// renders for the label's polarity.
    pub fn per_question(env: &Env, label: ConditionLabel, style: Style) -> Self {
        let mut c = Self::representative(env, label, style);
        if let Some(p) = label.polarity() {
            c.choices = env
                .feedback_support(style)
                .into_iter()
                .filter(|f| env.classify(f).is_some_and(|i| i.polarity == p))
                .collect();
        }
        c
    }

    pub fn build(env: &Env, label: ConditionLabel, style: Style, sampling: ConditionSampling) -> Self {
        match sampling {
            ConditionSampling::Representative => Self::representative(env, label, style),
            ConditionSampling::PerQuestion => Self::per_question(env, label, style),
        }
    }

    pub fn standard(env: &Env, style: Style) -> Vec<Self> {
        ConditionLabel::ALL.iter().map(|&l| Self::representative(env, l, style)).collect()
    }

    pub fn label(&self) -> ConditionLabel {
        self.label
    }

    pub fn feedback(&self) -> &TokenSequence {
        &self.feedback
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub condition: ConditionLabel,
    pub seed: u64,
    pub accuracy: f64,
    pub marker_rate: f64,
    pub mean_length: f64,
    pub mean_score: f64,
    pub sample_count: usize,
}

fn check_disjoint(eval_set: &[TaskInstance], train_ids: &BTreeSet<InstanceId>) -> Result<()> {
    if eval_set.is_empty() {
        return Err(FcpError::Contract("evaluation set is empty".into()));
    }
    if let Some(x) = eval_set.iter().find(|x| train_ids.contains(&x.id())) {
        return Err(FcpError::Contract(format!(
            "evaluation instance {} also appears in training",
            x.id()
        )));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn shard(
    policy: &Policy,
    env: &Env,
    label: ConditionLabel,
    condition: Option<&EvalCondition>,
    eval_set: &[TaskInstance],
    decode: Decode,
    seed: u64,
    style: Style,
) -> Result<MetricsRecord> {
    let rows = eval_set
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut rng = stream(seed, &format!("eval-{}", label.as_str()), i as u64);
            let ctx = match condition {
                Some(c) if c.choices.is_empty() => wrap_context(&c.feedback, x.instruction())?,
                Some(c) => wrap_context(&c.choices[rng.random_range(0..c.choices.len())], x.instruction())?,
                None => x.instruction().clone(),
            };
            let o = policy.decode(&ctx, decode, &mut rng)?;
            let parsed = parse_response(x.kind(), env.task_tokens(), o.tokens());
            Ok((
                env.verify(x, &o).is_correct(),
                parsed.has_marker,
                o.content_len(),
                env.expected_score(x, &o, style),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    Ok(MetricsRecord {
        condition: label,
        seed,
        accuracy: rows.iter().filter(|r| r.0).count() as f64 / n,
        marker_rate: rows.iter().filter(|r| r.1).count() as f64 / n,
        mean_length: rows.iter().map(|r| r.2 as f64).sum::<f64>() / n,
        mean_score: rows.iter().map(|r| r.3).sum::<f64>() / n,
        sample_count: rows.len(),
    })
}

/// Decodes one response per instruction for every `(condition, seed)` and
/// aggregates verdicts, marker usage, length and expected score. Scores use the
/// environment's expected score in `style`, so records depend on the seed only
/// through sampling.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    policy: &Policy,
    env: &Env,
    conditions: &[EvalCondition],
    eval_set: &[TaskInstance],
    decode: Decode,
    seeds: &[u64],
    style: Style,
    train_ids: &BTreeSet<InstanceId>,
) -> Result<Vec<MetricsRecord>> {
    check_disjoint(eval_set, train_ids)?;
    let mut records = Vec::with_capacity(conditions.len() * seeds.len());
    for cond in conditions {
        for &seed in seeds {
            records.push(shard(policy, env, cond.label, Some(cond), eval_set, decode, seed, style)?);
        }
    }
    Ok(records)
}

/// Evaluation on bare instructions for policies trained without feedback
/// contexts. Records carry the null-condition label.
pub fn evaluate_unconditioned(
    policy: &Policy,
    env: &Env,
    eval_set: &[TaskInstance],
    decode: Decode,
    seeds: &[u64],
    style: Style,
    train_ids: &BTreeSet<InstanceId>,
) -> Result<Vec<MetricsRecord>> {
    check_disjoint(eval_set, train_ids)?;
    seeds
        .iter()
        .map(|&seed| shard(policy, env, ConditionLabel::NullCondition, None, eval_set, decode, seed, style))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub condition: ConditionLabel,
    pub seeds: usize,
    pub accuracy: f64,
    pub marker_rate: f64,
    pub mean_length: f64,
    pub mean_score: f64,
    /// Differences from the null condition's means, when it was evaluated.
    pub accuracy_delta: Option<f64>,
    pub marker_rate_delta: Option<f64>,
    pub mean_length_delta: Option<f64>,
    pub mean_score_delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub config_digest: Option<String>,
    pub conditions: Vec<ConditionSummary>,
}

/// Per-condition means over seeds, in first-appearance order.
pub fn summarize(records: &[MetricsRecord], config_digest: Option<&str>) -> Result<SweepSummary> {
    if records.is_empty() {
        return Err(FcpError::Contract("no records to summarize".into()));
    }
    let mut order: Vec<ConditionLabel> = Vec::new();
    for r in records {
        if !order.contains(&r.condition) {
            order.push(r.condition);
        }
    }
    let means = |label: ConditionLabel| {
        let rows: Vec<&MetricsRecord> = records.iter().filter(|r| r.condition == label).collect();
        let n = rows.len() as f64;
        let avg = |f: fn(&MetricsRecord) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
        (
            rows.len(),
            [avg(|r| r.accuracy), avg(|r| r.marker_rate), avg(|r| r.mean_length), avg(|r| r.mean_score)],
        )
    };
    let null = order
        .contains(&ConditionLabel::NullCondition)
        .then(|| means(ConditionLabel::NullCondition).1);
    let conditions = order
        .into_iter()
        .map(|label| {
            let (seeds, m) = means(label);
            let delta = |k: usize| null.map(|b| m[k] - b[k]);
            ConditionSummary {
                condition: label,
                seeds,
                accuracy: m[0],
                marker_rate: m[1],
                mean_length: m[2],
                mean_score: m[3],
                accuracy_delta: delta(0),
                marker_rate_delta: delta(1),
                mean_length_delta: delta(2),
                mean_score_delta: delta(3),
            }
        })
        .collect();
    Ok(SweepSummary {
        config_digest: config_digest.map(str::to_string),
        conditions,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| FcpError::io(dir.display().to_string(), e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| FcpError::io(path.display().to_string(), e))?))
}

fn csv_error(path: &Path, e: csv::Error) -> FcpError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => FcpError::io(path.display().to_string(), io),
        other => FcpError::io(path.display().to_string(), std::io::Error::other(format!("{other:?}"))),
    }
}

pub fn write_sweep_csv<W: Write>(records: &[MetricsRecord], sink: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["condition", "seed", "accuracy", "marker_rate", "mean_length", "mean_score", "sample_count"])?;
    for r in records {
        w.write_record([
            r.condition.as_str().to_string(),
            r.seed.to_string(),
            r.accuracy.to_string(),
            r.marker_rate.to_string(),
            r.mean_length.to_string(),
            r.mean_score.to_string(),
            r.sample_count.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the per-(condition, seed) CSV and the JSON summary.
pub fn condition_sweep_report(
    records: &[MetricsRecord],
    csv_path: &Path,
    json_path: &Path,
    config_digest: Option<&str>,
) -> Result<SweepSummary> {
    let summary = summarize(records, config_digest)?;
    write_sweep_csv(records, create(csv_path)?).map_err(|e| csv_error(csv_path, e))?;
    let mut f = create(json_path)?;
    serde_json::to_writer_pretty(&mut f, &summary)?;
    f.write_all(b"\n").and_then(|_| f.flush()).map_err(|e| FcpError::io(json_path.display().to_string(), e))?;
    Ok(summary)
}

/// One method's per-round values; `None` marks a metric that was not recorded.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DynamicsPoint {
    pub accuracy: Option<f64>,
    pub mean_score: Option<f64>,
    pub mean_length: Option<f64>,
    pub loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodLog {
    pub method: String,
    pub rounds: Vec<DynamicsPoint>,
}

/// Trailing mean over rounds `max(1, r - window + 1) ..= r` of the values that
/// are present; missing where the current value is missing.
pub fn moving_average(values: &[Option<f64>], window: usize) -> Vec<Option<f64>> {
    (0..values.len())
        .map(|r| {
            values[r]?;
            let lo = (r + 1).saturating_sub(window);
            let seen: Vec<f64> = values[lo..=r].iter().flatten().copied().collect();
            Some(seen.iter().sum::<f64>() / seen.len() as f64)
        })
        .collect()
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| MISSING.to_string(), |x| x.to_string())
}

pub fn write_dynamics_csv<W: Write>(logs: &[MethodLog], sink: W) -> csv::Result<()> {
    let rounds = logs.iter().map(|l| l.rounds.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(sink);
    let metrics = ["accuracy", "mean_score", "mean_length", "loss"];
    let mut header = vec!["method".to_string(), "round".to_string()];
    header.extend(metrics.iter().map(|m| m.to_string()));
    header.extend(metrics.iter().map(|m| format!("{m}_ma10")));
    w.write_record(&header)?;
    for log in logs {
        let mut padded = log.rounds.clone();
        padded.resize(rounds, DynamicsPoint::default());
        let cols: [Vec<Option<f64>>; 4] = [
            padded.iter().map(|p| p.accuracy).collect(),
            padded.iter().map(|p| p.mean_score).collect(),
            padded.iter().map(|p| p.mean_length).collect(),
            padded.iter().map(|p| p.loss).collect(),
        ];
        let smooth: Vec<Vec<Option<f64>>> = cols.iter().map(|c| moving_average(c, MOVING_AVERAGE_WINDOW)).collect();
        for r in 0..rounds {
            let mut row = vec![log.method.clone(), (r + 1).to_string()];
            row.extend(cols.iter().map(|c| cell(c[r])));
            row.extend(smooth.iter().map(|c| cell(c[r])));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Aligned per-round CSV across methods. Shorter logs are padded with `NA`.
pub fn dynamics_report(logs: &[MethodLog], path: &Path) -> Result<()> {
    if logs.is_empty() {
        return Err(FcpError::Contract("dynamics report needs at least one log".into()));
    }
    write_dynamics_csv(logs, create(path)?).map_err(|e| csv_error(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::TaskKind;
    use crate::oracle::enumerate_joint;
    use crate::policy::{exact_conditional_fit, TableRole, TabularPolicy};

    fn uniform_pairs(env: &Env, n: usize) -> (Vec<TaskInstance>, Policy) {
        let mut rng = stream(3, "tasks", 0);
        let xs: Vec<TaskInstance> = (0..n)
            .map(|_| env.generate_instruction(TaskKind::ModularArithmetic, 9, &mut rng).unwrap())
            .collect();
        let mut t = TabularPolicy::new(TableRole::Response, env.vocab().len());
        for x in &xs {
            let space = env.reference_space(x).unwrap();
            let wrong = space.iter().find(|(o, _)| !env.verify(x, o).is_correct()).unwrap().0.clone();
            t.add_response_space(x.instruction(), vec![x.ground_truth().clone(), wrong], &[0.5, 0.5]).unwrap();
        }
        (xs, Policy::Tabular(t))
    }

    #[test]
    fn condition_labels_and_feedback_agree() {
        let env = Env::standard(0.05).unwrap();
        assert!(EvalCondition::new(ConditionLabel::NullCondition, env.representative(Polarity::Neutral, Style::User)).is_err());
        assert!(EvalCondition::new(ConditionLabel::Neutral, TokenSequence::empty_feedback()).is_err());
        for c in EvalCondition::standard(&env, Style::Reviewer) {
            assert_eq!(c.label() == ConditionLabel::NullCondition, c.feedback().is_empty());
            if let Some(p) = c.label().polarity() {
                assert_eq!(env.classify(c.feedback()).unwrap().polarity, p);
            }
        }
    }

    #[test]
    fn per_question_draws_cover_the_polarity() {
        let env = Env::standard(0.05).unwrap();
        for label in ConditionLabel::ALL {
            let c = EvalCondition::build(&env, label, Style::Reviewer, ConditionSampling::PerQuestion);
            match label.polarity() {
                None => assert!(c.choices.is_empty()),
                Some(p) => {
                    assert!(c.choices.len() > 1, "{}", label.as_str());
                    assert!(c.choices.contains(c.feedback()));
                    assert!(c.choices.iter().all(|f| env.classify(f).unwrap().polarity == p));
                }
            }
        }
        let (xs, p) = uniform_pairs(&env, 200);
        let conds: Vec<_> = ConditionLabel::ALL
            .iter()
            .map(|&l| EvalCondition::build(&env, l, Style::User, ConditionSampling::PerQuestion))
            .collect();
        let decode = Decode::Sample { temperature: 1.0 };
        let run = |seeds: &[u64]| evaluate(&p, &env, &conds, &xs, decode, seeds, Style::User, &BTreeSet::new()).unwrap();
        assert_eq!(run(&[4, 9]), run(&[4, 9]));
    }

    #[test]
    fn uniform_pairs_score_half_under_sampling() {
        let env = Env::standard(0.05).unwrap();
        let (xs, p) = uniform_pairs(&env, 2000);
        let null = [EvalCondition::representative(&env, ConditionLabel::NullCondition, Style::User)];
        let recs = evaluate(&p, &env, &null, &xs, Decode::Sample { temperature: 1.0 }, &[1], Style::User, &BTreeSet::new()).unwrap();
        let se = (0.25f64 / 2000.0).sqrt();
        assert!((recs[0].accuracy - 0.5).abs() < 3.0 * se, "{}", recs[0].accuracy);
        assert_eq!(recs[0].sample_count, 2000);
    }

    #[test]
    fn greedy_is_seed_invariant_and_pure() {
        let env = Env::standard(0.05).unwrap();
        let (xs, p) = uniform_pairs(&env, 20);
        let before = p.digest();
        let conds = EvalCondition::standard(&env, Style::User);
        let recs = evaluate(&p, &env, &conds, &xs, Decode::Greedy, &[1, 2], Style::User, &BTreeSet::new()).unwrap();
        assert_eq!(recs.len(), 10);
        for pair in recs.chunks(2) {
            assert_eq!(
                MetricsRecord { seed: 0, ..pair[0].clone() },
                MetricsRecord { seed: 0, ..pair[1].clone() }
            );
        }
        assert_eq!(p.digest(), before);
    }

    #[test]
    fn overlapping_ids_are_rejected() {
        let env = Env::standard(0.05).unwrap();
        let (xs, p) = uniform_pairs(&env, 5);
        let train: BTreeSet<InstanceId> = [xs[3].id()].into_iter().collect();
        let conds = EvalCondition::standard(&env, Style::User);
        assert!(matches!(
            evaluate(&p, &env, &conds, &xs, Decode::Greedy, &[0], Style::User, &train),
            Err(FcpError::Contract(_))
        ));
    }

    #[test]
    fn posterior_policy_follows_conditions() {
        let env = Env::standard(0.05).unwrap();
        let mut rng = stream(5, "tasks", 0);
        for style in Style::ALL {
            let x = env.generate_instruction(TaskKind::ModularArithmetic, 9, &mut rng).unwrap();
            let mut r = TabularPolicy::new(TableRole::Response, env.vocab().len());
            let (o, pr): (Vec<_>, Vec<_>) = env.reference_space(&x).unwrap().into_iter().unzip();
            r.add_response_space(x.instruction(), o, &pr).unwrap();
            let joint = enumerate_joint(&r, &env, &x, style).unwrap();
            let (fit, _) = exact_conditional_fit(&joint, env.vocab().len()).unwrap();
            let mass = |label: ConditionLabel, pred: &dyn Fn(&TokenSequence) -> bool| {
                let c = EvalCondition::representative(&env, label, style);
                let p = fit.probabilities(&wrap_context(c.feedback(), x.instruction()).unwrap()).unwrap();
                joint.responses.iter().zip(p).filter(|(o, _)| pred(o)).map(|(_, p)| p).sum::<f64>()
            };
            let marker = |o: &TokenSequence| parse_response(x.kind(), env.task_tokens(), o.tokens()).has_marker;
            assert!(mass(ConditionLabel::HasCode, &marker) > mass(ConditionLabel::FullyPositive, &marker));
            let correct = |o: &TokenSequence| env.verify(&x, o).is_correct();
            assert!(mass(ConditionLabel::FullyPositive, &correct) - mass(ConditionLabel::FullyNegative, &correct) > 0.3);
        }
    }

    fn record(c: ConditionLabel, seed: u64, acc: f64) -> MetricsRecord {
        MetricsRecord {
            condition: c,
            seed,
            accuracy: acc,
            marker_rate: 0.1,
            mean_length: 3.0,
            mean_score: 0.5,
            sample_count: 10,
        }
    }

    #[test]
    fn sweep_report_counts_means_and_determinism() {
        let labels = [ConditionLabel::FullyPositive, ConditionLabel::FullyNegative, ConditionLabel::HasCode, ConditionLabel::NullCondition];
        let recs: Vec<MetricsRecord> = labels
            .iter()
            .enumerate()
            .flat_map(|(i, &l)| (0..4u64).map(move |s| record(l, s, 0.1 * i as f64 + 0.01 * s as f64)))
            .collect();
        let dir = std::env::temp_dir().join(format!("fcp-sweep-{}", std::process::id()));
        let (c, j) = (dir.join("sweep.csv"), dir.join("summary.json"));
        let s = condition_sweep_report(&recs, &c, &j, Some("abc")).unwrap();
        let csv1 = std::fs::read(&c).unwrap();
        let json1 = std::fs::read(&j).unwrap();
        assert_eq!(String::from_utf8(csv1.clone()).unwrap().lines().count(), 17);
        assert_eq!(s.conditions.len(), 4);
        for (i, cs) in s.conditions.iter().enumerate() {
            let rows: Vec<f64> = recs.iter().filter(|r| r.condition == cs.condition).map(|r| r.accuracy).collect();
            assert!((cs.accuracy - rows.iter().sum::<f64>() / 4.0).abs() < 1e-12);
            let null = 0.3 + 0.015;
            assert!((cs.accuracy_delta.unwrap() - (0.1 * i as f64 + 0.015 - null)).abs() < 1e-12);
        }
        condition_sweep_report(&recs, &c, &j, Some("abc")).unwrap();
        assert_eq!(std::fs::read(&c).unwrap(), csv1);
        assert_eq!(std::fs::read(&j).unwrap(), json1);
        std::fs::remove_dir_all(&dir).ok();
        assert!(matches!(
            condition_sweep_report(&[], &c, &j, None),
            Err(FcpError::Contract(_))
        ));
    }

    #[test]
    fn write_failure_names_the_path() {
        let recs = vec![record(ConditionLabel::NullCondition, 0, 0.5)];
        let blocker = std::env::temp_dir().join(format!("fcp-block-{}", std::process::id()));
        std::fs::write(&blocker, b"x").unwrap();
        let bad = blocker.join("sweep.csv");
        match condition_sweep_report(&recs, &bad, &blocker.join("s.json"), None) {
            Err(e) => assert!(e.to_string().contains("fcp-block")),
            Ok(_) => panic!("expected an I/O error"),
        }
        std::fs::remove_file(&blocker).ok();
    }

    #[test]
    fn moving_average_hand_values() {
        let constant = vec![Some(0.4); 15];
        assert!(moving_average(&constant, 10).iter().all(|v| (v.unwrap() - 0.4).abs() < 1e-15));
        let vals: Vec<Option<f64>> = (1..=12).map(|r| Some(r as f64)).collect();
        let ma = moving_average(&vals, 10);
        assert_eq!(ma[0], Some(1.0));
        assert_eq!(ma[3], Some(2.5));
        assert_eq!(ma[9], Some(5.5));
        assert_eq!(ma[10], Some(6.5));
        assert_eq!(ma[11], Some(7.5));
        assert_eq!(moving_average(&[Some(1.0), None, Some(3.0)], 10), vec![Some(1.0), None, Some(2.0)]);
    }

    #[test]
    fn dynamics_pads_short_logs() {
        let point = |v: f64| DynamicsPoint {
            accuracy: Some(v),
            mean_score: Some(v),
            mean_length: Some(v),
            loss: None,
        };
        let logs = vec![
            MethodLog { method: "fcp".into(), rounds: (0..3).map(|i| point(i as f64)).collect() },
            MethodLog { method: "grpo".into(), rounds: vec![point(1.0)] },
        ];
        let mut buf = Vec::new();
        write_dynamics_csv(&logs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 7);
        assert_eq!(lines[0], "method,round,accuracy,mean_score,mean_length,loss,accuracy_ma10,mean_score_ma10,mean_length_ma10,loss_ma10");
        assert_eq!(lines[3], "fcp,3,2,2,2,NA,1,1,1,NA");
        assert_eq!(lines[6], "grpo,3,NA,NA,NA,NA,NA,NA,NA,NA");
        assert!(dynamics_report(&[], Path::new("x.csv")).is_err());
    }
}
