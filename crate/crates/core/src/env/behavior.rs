//! Reference behavior: a closed-form response distribution over the finite
//! response space of a task. Serves as the tabular reference policy and as the
//! data source for pretraining the neural reference.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FcpError, Result};
use crate::vocab::Token;

use super::task::TaskTokens;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BehaviorModel {
    /// Probability of opening with the marker token.
    pub marker_rate: f64,
    /// Unnormalized weights over the number of reasoning fillers `0..len`.
    pub reasoning_weights: Vec<f64>,
    /// Probability of a correct answer after `k` fillers is `correct_base + correct_slope * k`.
    pub correct_base: f64,
    pub correct_slope: f64,
    /// Share of wrong responses that carry no answer at all.
    pub incoherent_share: f64,
}

impl Default for BehaviorModel {
    fn default() -> Self {
        BehaviorModel {
            marker_rate: 0.2,
            reasoning_weights: vec![0.3, 0.25, 0.18, 0.12, 0.09, 0.06],
            correct_base: 0.25,
            correct_slope: 0.08,
            incoherent_share: 0.25,
        }
    }
}

/// Structural description of one response in the enumerated space.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    pub marker: bool,
    pub fillers: usize,
    pub answer: AnswerChoice,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnswerChoice {
    Correct,
    Wrong(usize),
    Missing,
}

impl BehaviorModel {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let w = &self.reasoning_weights;
        if w.is_empty() || w.iter().any(|x| !x.is_finite() || *x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
            return Err(FcpError::Config("behavior.reasoning_weights must be nonnegative with positive sum".into()));
        }
        if !unit(self.marker_rate) || !unit(self.incoherent_share) || !unit(self.correct_base) || self.correct_slope < 0.0 {
            return Err(FcpError::Config("behavior rates must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn max_fillers(&self) -> usize {
        self.reasoning_weights.len() - 1
    }

    pub fn correct_rate(&self, fillers: usize) -> f64 {
        (self.correct_base + self.correct_slope * fillers as f64).min(1.0)
    }

    /// All shapes in a fixed order: marker, then filler count, then answer choice.
    pub fn shapes(&self, n_wrong: usize) -> Vec<Shape> {
        let mut out = Vec::new();
        for marker in [false, true] {
            for fillers in 0..=self.max_fillers() {
                let answers = std::iter::once(AnswerChoice::Correct)
                    .chain((0..n_wrong).map(AnswerChoice::Wrong))
                    .chain(std::iter::once(AnswerChoice::Missing));
                for answer in answers {
                    out.push(Shape { marker, fillers, answer });
                }
            }
        }
        out
    }

    pub fn probability(&self, shape: &Shape, n_wrong: usize) -> f64 {
        let total: f64 = self.reasoning_weights.iter().sum();
        let pm = if shape.marker { self.marker_rate } else { 1.0 - self.marker_rate };
        let pk = self.reasoning_weights.get(shape.fillers).copied().unwrap_or(0.0) / total;
        let q = self.correct_rate(shape.fillers);
        // With no wrong answers available every wrong response is a missing answer.
        let miss = if n_wrong == 0 { 1.0 } else { self.incoherent_share };
        let pa = match shape.answer {
            AnswerChoice::Correct => q,
            AnswerChoice::Missing => (1.0 - q) * miss,
            AnswerChoice::Wrong(i) if i < n_wrong => (1.0 - q) * (1.0 - miss) / n_wrong as f64,
            AnswerChoice::Wrong(_) => 0.0,
        };
        pm * pk * pa
    }

    pub fn sample<R: Rng + ?Sized>(&self, n_wrong: usize, rng: &mut R) -> Shape {
        let marker = rng.random_bool(self.marker_rate);
        let fillers = WeightedIndex::new(&self.reasoning_weights)
            .expect("validated weights")
            .sample(rng);
        let u: f64 = rng.random();
        let q = self.correct_rate(fillers);
        let answer = if u < q {
            AnswerChoice::Correct
        } else if n_wrong == 0 {
            AnswerChoice::Missing
        } else {
            let v = (u - q) / (1.0 - q);
            if v < self.incoherent_share {
                AnswerChoice::Missing
            } else {
                let i = ((v - self.incoherent_share) / (1.0 - self.incoherent_share) * n_wrong as f64) as usize;
                AnswerChoice::Wrong(i.min(n_wrong - 1))
            }
        };
        Shape { marker, fillers, answer }
    }
}

/// Token realization `[marker] filler^k answer <eos>`.
pub fn render_shape(shape: &Shape, tokens: &TaskTokens, truth: &[Token], wrong: &[Vec<Token>]) -> Vec<Token> {
    let mut out = Vec::new();
    if shape.marker {
        out.push(tokens.marker);
    }
    out.extend(std::iter::repeat_n(tokens.filler, shape.fillers));
    match shape.answer {
        AnswerChoice::Correct => out.extend_from_slice(truth),
        AnswerChoice::Wrong(i) => out.extend_from_slice(&wrong[i]),
        AnswerChoice::Missing => {}
    }
    out.push(Token::EOS);
    out
}
