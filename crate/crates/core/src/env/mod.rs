//! Simulated task environment: instructions, verification, and a feedback
//! annotator with exact likelihoods.

pub mod behavior;
pub mod grammar;
pub mod task;

use std::collections::BTreeMap;

use rand::Rng;

use crate::dataset::{ScoredFeedback, Style};
use crate::error::{FcpError, Result};
use crate::sequence::{Role, TokenSequence};
use crate::vocab::{Token, Vocabulary};

pub use behavior::{AnswerChoice, BehaviorModel, Shape};
pub use grammar::{Grammar, LengthBucket, Polarity, ResponseAttributes, Template};
pub use task::{
    generate_instruction, parse_response, verify, InstanceId, TaskInstance, TaskKind, TaskSpec, TaskTokens, Verdict,
};

pub const DEFAULT_NOISE_RATE: f64 = 0.05;

/// One point of the feedback distribution for a fixed `(x, o, style)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedbackOutcome {
    pub feedback: TokenSequence,
    pub probability: f64,
    pub polarity: Polarity,
    pub score: f64,
}

/// What a rendered feedback string is, looked up by its tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeedbackInfo {
    pub template_id: usize,
    pub polarity: Polarity,
    pub style: Style,
}

#[derive(Clone, Debug)]
pub struct Env {
    vocab: Vocabulary,
    tokens: TaskTokens,
    grammar: Grammar,
    renders: BTreeMap<Vec<Token>, FeedbackInfo>,
    noise_rate: f64,
    behavior: BehaviorModel,
}

impl Env {
    pub fn new(grammar: Grammar, noise_rate: f64, behavior: BehaviorModel) -> Result<Self> {
        if !(0.0..=1.0).contains(&noise_rate) {
            return Err(FcpError::Config(format!("noise_rate {noise_rate} outside [0, 1]")));
        }
        behavior.validate()?;
        let mut words = task::task_words();
        words.extend(grammar.words());
        let vocab = Vocabulary::new(words)?;
        let tokens = TaskTokens::new(&vocab)?;
        let mut renders = BTreeMap::new();
        for t in grammar.templates() {
            for b in t.render_buckets() {
                let toks = t
                    .render(grammar.slots(), *b)
                    .iter()
                    .map(|w| vocab.expect(w))
                    .collect::<Result<Vec<_>>>()?;
                renders.insert(
                    toks,
                    FeedbackInfo {
                        template_id: t.id,
                        polarity: t.polarity,
                        style: t.style,
                    },
                );
            }
        }
        Ok(Env {
            vocab,
            tokens,
            grammar,
            renders,
            noise_rate,
            behavior,
        })
    }

    /// Default grammar and behavior with the given noise rate.
    pub fn standard(noise_rate: f64) -> Result<Self> {
        Env::new(Grammar::default(), noise_rate, BehaviorModel::default())
    }

    pub fn with_noise_rate(&self, noise_rate: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&noise_rate) {
            return Err(FcpError::Config(format!("noise_rate {noise_rate} outside [0, 1]")));
        }
        Ok(Env {
            noise_rate,
            ..self.clone()
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn task_tokens(&self) -> &TaskTokens {
        &self.tokens
    }

    pub fn grammar(&self) -> &Grammar {
        &self.grammar
    }

    pub fn noise_rate(&self) -> f64 {
        self.noise_rate
    }

    pub fn behavior(&self) -> &BehaviorModel {
        &self.behavior
    }

    pub fn generate_instruction<R: Rng + ?Sized>(&self, kind: TaskKind, difficulty: u32, rng: &mut R) -> Result<TaskInstance> {
        generate_instruction(kind, difficulty, &self.vocab, rng)
    }

    pub fn parse_task(&self, instruction: &TokenSequence) -> Result<TaskInstance> {
        TaskInstance::parse(instruction, &self.vocab)
    }

    pub fn verify(&self, x: &TaskInstance, o: &TokenSequence) -> Verdict {
        verify(x, &self.tokens, o)
    }

    pub fn attributes(&self, x: &TaskInstance, o: &TokenSequence) -> ResponseAttributes {
        let p = parse_response(x.kind(), &self.tokens, o.tokens());
        ResponseAttributes {
            correct: self.verify(x, o).is_correct(),
            length_bucket: LengthBucket::from_fillers(p.fillers),
            has_marker: p.has_marker,
            coherent: p.answer.is_some(),
        }
    }

    /// Scalar score: polarity base plus the length adjustment, clamped to `[0, 1]`.
    pub fn score(polarity: Polarity, attrs: &ResponseAttributes) -> f64 {
        (polarity.base_score() + attrs.length_bucket.score_adjustment()).clamp(0.0, 1.0)
    }

    fn render(&self, t: &Template, bucket: LengthBucket) -> TokenSequence {
        let toks = t
            .render(self.grammar.slots(), bucket)
            .iter()
            .map(|w| self.vocab.expect(w).expect("grammar words are in the vocabulary"))
            .collect();
        TokenSequence::feedback(toks).expect("validated template renders")
    }

    /// Exact distribution of `give_feedback` for `(x, o, style)`, zero-mass
    /// strings omitted, ordered by token ids.
    pub fn feedback_distribution(&self, x: &TaskInstance, o: &TokenSequence, style: Style) -> Vec<FeedbackOutcome> {
        let attrs = self.attributes(x, o);
        let mut acc: BTreeMap<Vec<Token>, FeedbackOutcome> = BTreeMap::new();
        let parts = [
            (1.0 - self.noise_rate, self.grammar.matching(&attrs, style)),
            (self.noise_rate, self.grammar.matching(&attrs.flipped(), style)),
        ];
        for (mass, set) in parts {
            if mass <= 0.0 {
                continue;
            }
            let each = mass / set.len() as f64;
            for t in set {
                let fb = self.render(t, attrs.length_bucket);
                acc.entry(fb.tokens().to_vec())
                    .and_modify(|e| e.probability += each)
                    .or_insert(FeedbackOutcome {
                        feedback: fb,
                        probability: each,
                        polarity: t.polarity,
                        score: Self::score(t.polarity, &attrs),
                    });
            }
        }
        acc.into_values().collect()
    }

    /// Probability that `give_feedback(x, o, style)` emits exactly `c`.
    pub fn feedback_likelihood(&self, x: &TaskInstance, o: &TokenSequence, c: &TokenSequence, style: Style) -> f64 {
        if c.role() != Role::Feedback {
            return 0.0;
        }
        self.feedback_distribution(x, o, style)
            .into_iter()
            .find(|f| f.feedback == *c)
            .map_or(0.0, |f| f.probability)
    }

    pub fn give_feedback<R: Rng + ?Sized>(
        &self,
        x: &TaskInstance,
        o: &TokenSequence,
        style: Style,
        rng: &mut R,
    ) -> ScoredFeedback {
        let attrs = self.attributes(x, o);
        let flip = rng.random::<f64>() < self.noise_rate;
        let target = if flip { attrs.flipped() } else { attrs };
        let set = self.grammar.matching(&target, style);
        let t = set[rng.random_range(0..set.len())];
        ScoredFeedback::new(
            self.render(t, attrs.length_bucket),
            style,
            Some(Self::score(t.polarity, &attrs)),
        )
        .expect("rendered feedback is valid")
    }

    pub fn expected_score(&self, x: &TaskInstance, o: &TokenSequence, style: Style) -> f64 {
        self.feedback_distribution(x, o, style)
            .iter()
            .map(|f| f.probability * f.score)
            .sum()
    }

    /// Looks up the template behind a feedback string.
    pub fn classify(&self, c: &TokenSequence) -> Option<FeedbackInfo> {
        self.renders.get(c.tokens()).copied()
    }

    /// Every string a template of this style can render.
    pub fn feedback_support(&self, style: Style) -> Vec<TokenSequence> {
        self.renders
            .iter()
            .filter(|(_, i)| i.style == style)
            .map(|(t, _)| TokenSequence::feedback(t.clone()).expect("validated template renders"))
            .collect()
    }

    /// Fixed exemplar feedback for a polarity.
    pub fn representative(&self, polarity: Polarity, style: Style) -> TokenSequence {
        let t = self
            .grammar
            .representative(polarity, style)
            .expect("validated grammar has every cell");
        self.render(t, LengthBucket::Medium)
    }

    /// The finite response space of `x` with reference probabilities, in a fixed order.
    pub fn reference_space(&self, x: &TaskInstance) -> Result<Vec<(TokenSequence, f64)>> {
        let wrong = task::wrong_answers(x, &self.vocab)?;
        self.behavior
            .shapes(wrong.len())
            .iter()
            .map(|s| {
                let toks = behavior::render_shape(s, &self.tokens, x.answer(), &wrong);
                Ok((TokenSequence::response(toks)?, self.behavior.probability(s, wrong.len())))
            })
            .collect()
    }

    pub fn sample_reference<R: Rng + ?Sized>(&self, x: &TaskInstance, rng: &mut R) -> Result<TokenSequence> {
        let wrong = task::wrong_answers(x, &self.vocab)?;
        let shape = self.behavior.sample(wrong.len(), rng);
        TokenSequence::response(behavior::render_shape(&shape, &self.tokens, x.answer(), &wrong))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn env(noise: f64) -> Env {
        Env::standard(noise).unwrap()
    }

    fn task(e: &Env) -> TaskInstance {
        TaskInstance::from_spec(
            TaskSpec::Modular {
                a: 3,
                op: task::ArithOp::Add,
                b: 4,
                modulus: 10,
            },
            e.vocab(),
        )
        .unwrap()
    }

    fn resp(e: &Env, s: &str) -> TokenSequence {
        TokenSequence::response(e.vocab().tokenize(s).unwrap()).unwrap()
    }

    #[test]
    fn correct_short_reviewer_feedback_is_positive_and_high() {
        let e = env(0.0);
        let x = task(&e);
        let o = resp(&e, "7 <eos>");
        let d = e.feedback_distribution(&x, &o, Style::Reviewer);
        assert_eq!(d.len(), 8);
        for f in &d {
            assert_eq!(f.polarity, Polarity::FullyPositive);
            assert!(f.score >= 0.8);
        }
        let mut rng = stream(1, "fb", 0);
        let fb = e.give_feedback(&x, &o, Style::Reviewer, &mut rng);
        assert!(fb.score().unwrap() >= 0.8);
    }

    #[test]
    fn incorrect_user_feedback_is_negative_and_low() {
        let e = env(0.0);
        let x = task(&e);
        for s in ["8 <eos>", "step step step step <eos>", "``` 3 <eos>", "<eos>"] {
            for f in e.feedback_distribution(&x, &resp(&e, s), Style::User) {
                assert!(matches!(f.polarity, Polarity::FullyNegative | Polarity::Neutral));
                assert!(f.score <= 0.5);
            }
        }
    }

    #[test]
    fn likelihood_normalizes_and_rejects_foreign_strings() {
        let e = env(0.05);
        let mut rng = stream(2, "fb", 0);
        for _ in 0..50 {
            let x = e.generate_instruction(TaskKind::ModularArithmetic, 9, &mut rng).unwrap();
            let o = e.sample_reference(&x, &mut rng).unwrap();
            for style in Style::ALL {
                let total: f64 = e
                    .feedback_support(style)
                    .iter()
                    .map(|c| e.feedback_likelihood(&x, &o, c, style))
                    .sum();
                assert!((total - 1.0).abs() < 1e-12);
            }
        }
        let x = task(&e);
        let o = resp(&e, "7 <eos>");
        let foreign = TokenSequence::feedback(e.vocab().tokenize("7 7 7").unwrap()).unwrap();
        assert_eq!(e.feedback_likelihood(&x, &o, &foreign, Style::Reviewer), 0.0);
    }

    #[test]
    fn sampling_matches_likelihood() {
        let e = env(0.2);
        let x = task(&e);
        let o = resp(&e, "``` step step step step 7 <eos>");
        let d = e.feedback_distribution(&x, &o, Style::Reviewer);
        let mut counts: BTreeMap<Vec<Token>, usize> = BTreeMap::new();
        let mut rng = stream(3, "fb", 0);
        let n = 100_000;
        for _ in 0..n {
            let fb = e.give_feedback(&x, &o, Style::Reviewer, &mut rng);
            assert!(e.feedback_likelihood(&x, &o, fb.text(), Style::Reviewer) > 0.0);
            *counts.entry(fb.text().tokens().to_vec()).or_default() += 1;
        }
        assert_eq!(counts.len(), d.len());
        for f in d {
            let p = f.probability;
            let freq = counts[f.feedback.tokens()] as f64 / n as f64;
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((freq - p).abs() <= 3.0 * se, "{freq} vs {p}");
        }
    }

    #[test]
    fn noise_free_feedback_is_deterministic_per_seed() {
        let e = env(0.0);
        let x = task(&e);
        let o = resp(&e, "step 7 <eos>");
        let a = e.give_feedback(&x, &o, Style::User, &mut stream(9, "fb", 0));
        let b = e.give_feedback(&x, &o, Style::User, &mut stream(9, "fb", 0));
        assert_eq!(a, b);
    }

    #[test]
    fn non_deception_at_zero_noise() {
        let e = env(0.0);
        let mut rng = stream(4, "fb", 0);
        for kind in [TaskKind::ModularArithmetic, TaskKind::StringTransform] {
            for _ in 0..100 {
                let x = e.generate_instruction(kind, *kind.difficulty_range().end(), &mut rng).unwrap();
                let o = e.sample_reference(&x, &mut rng).unwrap();
                let fb = e.give_feedback(&x, &o, Style::Reviewer, &mut rng);
                let pol = e.classify(fb.text()).unwrap().polarity;
                let correct = e.verify(&x, &o).is_correct();
                assert_eq!(pol == Polarity::FullyNegative, !correct);
            }
        }
    }

    #[test]
    fn expected_score_matches_hand_values() {
        let e = env(0.0);
        let x = task(&e);
        assert!((e.expected_score(&x, &resp(&e, "7 <eos>"), Style::Reviewer) - 0.85).abs() < 1e-12);
        // correct, long, no marker: 4 generic positive (0.95) and 4 neutral (0.65)
        let long = resp(&e, "step step step step 7 <eos>");
        assert!((e.expected_score(&x, &long, Style::Reviewer) - 0.8).abs() < 1e-12);
        assert!((e.expected_score(&x, &resp(&e, "8 <eos>"), Style::User) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn reference_space_is_a_distribution_containing_the_truth() {
        let e = env(0.05);
        let x = task(&e);
        let space = e.reference_space(&x).unwrap();
        assert_eq!(space.len(), 2 * 6 * 11);
        let total: f64 = space.iter().map(|(_, p)| p).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(space.iter().any(|(o, _)| o == x.ground_truth()));
        let mut seen = std::collections::BTreeSet::new();
        assert!(space.iter().all(|(o, _)| seen.insert(o.tokens().to_vec())));
    }

    #[test]
    fn representative_strings_have_their_polarity() {
        let e = env(0.05);
        for style in Style::ALL {
            for p in Polarity::ALL {
                let c = e.representative(p, style);
                assert_eq!(e.classify(&c).unwrap().polarity, p);
            }
        }
    }
}
