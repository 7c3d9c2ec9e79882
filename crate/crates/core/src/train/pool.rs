//! Pools of positive feedback used as conditioning signals during bootstrapping.

use std::collections::BTreeSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::env::{Env, Polarity};
use crate::error::{FcpError, Result};
use crate::sequence::TokenSequence;
use crate::vocab::{Token, Vocabulary};

/// Words whose presence marks a feedback string as length-related.
pub const LENGTH_LEXICON: [&str; 6] = ["concise", "verbose", "short", "long", "brief", "succinct"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoolConfig {
    pub score_threshold: f64,
    pub length_filtered: bool,
    pub length_lexicon: Vec<String>,
    /// Keep only feedback whose template has one of these polarities.
    pub polarity_whitelist: Option<Vec<Polarity>>,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            score_threshold: 0.8,
            length_filtered: false,
            length_lexicon: LENGTH_LEXICON.iter().map(|w| w.to_string()).collect(),
            polarity_whitelist: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionPool {
    pub entries: Vec<(TokenSequence, f64)>,
    pub score_threshold: f64,
    pub length_filtered: bool,
    sampler: WeightedIndex<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoolRecord {
    score_threshold: f64,
    length_filtered: bool,
    entries: Vec<EntryRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryRecord {
    feedback: String,
    weight: f64,
}

impl ConditionPool {
    pub fn new(entries: Vec<(TokenSequence, f64)>, score_threshold: f64, length_filtered: bool) -> Result<Self> {
        if entries.is_empty() {
            return Err(FcpError::Config("condition pool is empty; bootstrapping cannot start".into()));
        }
        let sampler = WeightedIndex::new(entries.iter().map(|(_, w)| *w))
            .map_err(|e| FcpError::Config(format!("invalid pool weights: {e}")))?;
        Ok(ConditionPool {
            entries,
            score_threshold,
            length_filtered,
            sampler,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> &TokenSequence {
        &self.entries[self.sampler.sample(rng)].0
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let total: f64 = self.entries.iter().map(|(_, w)| w).sum();
        self.entries.iter().map(|(_, w)| w / total).collect()
    }

    pub fn to_json(&self, vocab: &Vocabulary) -> Result<String> {
        let rec = PoolRecord {
            score_threshold: self.score_threshold,
            length_filtered: self.length_filtered,
            entries: self
                .entries
                .iter()
                .map(|(c, w)| EntryRecord {
                    feedback: vocab.render(c.tokens()),
                    weight: *w,
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&rec)?)
    }

    pub fn from_json(text: &str, vocab: &Vocabulary) -> Result<Self> {
        let rec: PoolRecord = serde_json::from_str(text)?;
        let entries = rec
            .entries
            .into_iter()
            .map(|e| Ok((TokenSequence::feedback(vocab.tokenize(&e.feedback)?)?, e.weight)))
            .collect::<Result<Vec<_>>>()?;
        ConditionPool::new(entries, rec.score_threshold, rec.length_filtered)
    }
}

/// Deduplicated feedback strings scoring at least the threshold, in first-seen
/// order with uniform weights.
pub fn build_condition_pool(dataset: &Dataset, config: &PoolConfig, env: &Env) -> Result<ConditionPool> {
    if !(0.0..=1.0).contains(&config.score_threshold) {
        return Err(FcpError::Config(format!(
            "score_threshold {} outside [0, 1]",
            config.score_threshold
        )));
    }
    let lexicon: BTreeSet<Token> = if config.length_filtered {
        config
            .length_lexicon
            .iter()
            .filter_map(|w| env.vocab().token(w))
            .collect()
    } else {
        BTreeSet::new()
    };
    let mut seen = BTreeSet::new();
    let mut entries = Vec::new();
    for (i, t) in dataset.iter().enumerate() {
        let score = t.feedback.score().ok_or_else(|| {
            FcpError::Contract(format!("triple {i} has no score; the pool is built from scored feedback"))
        })?;
        if score < config.score_threshold {
            continue;
        }
        let c = t.feedback.text();
        if c.tokens().iter().any(|tok| lexicon.contains(tok)) {
            continue;
        }
        if let Some(allowed) = &config.polarity_whitelist {
            match env.classify(c) {
                Some(info) if allowed.contains(&info.polarity) => {}
                _ => continue,
            }
        }
        if seen.insert(c.tokens().to_vec()) {
            entries.push((c.clone(), 1.0));
        }
    }
    if entries.is_empty() {
        return Err(FcpError::Config(format!(
            "no feedback scored >= {} after filtering; bootstrapping cannot start",
            config.score_threshold
        )));
    }
    ConditionPool::new(entries, config.score_threshold, config.length_filtered)
}
