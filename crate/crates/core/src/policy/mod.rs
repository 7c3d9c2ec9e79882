//! Conditional policies `pi(o | x, c)` with interchangeable tabular and neural
//! backends, plus checkpointing.

pub mod neural;
pub mod optim;
pub mod tabular;

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{FcpError, Result};
use crate::sequence::TokenSequence;
use crate::vocab::Vocabulary;

pub use neural::{NeuralConfig, NeuralPolicy};
pub use optim::{LrSchedule, OptimizerState};
pub use tabular::{exact_conditional_fit, TableRole, TabularPolicy};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// Summed token losses over the total token count of the batch.
    #[default]
    TokenMean,
    /// Summed token losses per sequence, averaged over sequences.
    SeqMeanTokenSum,
}

/// One training pair. `weight` multiplies the example's summed token loss;
/// it carries probabilities for exhaustive data and advantages for policy gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub context: TokenSequence,
    pub target: TokenSequence,
    pub weight: f64,
}

impl Example {
    pub fn new(context: TokenSequence, target: TokenSequence) -> Self {
        Example::weighted(context, target, 1.0)
    }

    pub fn weighted(context: TokenSequence, target: TokenSequence, weight: f64) -> Self {
        Example { context, target, weight }
    }
}

/// Denominator of the aggregated loss: total target tokens or batch size.
pub fn aggregation_denominator(batch: &[Example], mode: AggregationMode) -> f64 {
    match mode {
        AggregationMode::TokenMean => batch.iter().map(|e| e.target.len()).sum::<usize>().max(1) as f64,
        AggregationMode::SeqMeanTokenSum => batch.len() as f64,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogProb {
    pub total: f64,
    pub per_token: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Decode {
    Greedy,
    Sample { temperature: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Tabular,
    Neural,
}

#[derive(Clone, Debug)]
pub enum Policy {
    Tabular(TabularPolicy),
    Neural(NeuralPolicy),
}

impl Policy {
    pub fn backend(&self) -> Backend {
        match self {
            Policy::Tabular(_) => Backend::Tabular,
            Policy::Neural(_) => Backend::Neural,
        }
    }

    pub fn as_tabular(&self) -> Option<&TabularPolicy> {
        match self {
            Policy::Tabular(t) => Some(t),
            Policy::Neural(_) => None,
        }
    }

    pub fn as_tabular_mut(&mut self) -> Option<&mut TabularPolicy> {
        match self {
            Policy::Tabular(t) => Some(t),
            Policy::Neural(_) => None,
        }
    }

    pub fn log_prob(&self, context: &TokenSequence, o: &TokenSequence) -> Result<LogProb> {
        match self {
            Policy::Tabular(p) => p.log_prob(context, o),
            Policy::Neural(p) => p.log_prob(context, o),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, context: &TokenSequence, rng: &mut R, temperature: f64) -> Result<TokenSequence> {
        match self {
            Policy::Tabular(p) => p.sample(context, rng, temperature),
            Policy::Neural(p) => p.sample(context, rng, temperature),
        }
    }

    pub fn greedy(&self, context: &TokenSequence) -> Result<TokenSequence> {
        match self {
            Policy::Tabular(p) => p.greedy(context),
            Policy::Neural(p) => p.greedy(context),
        }
    }

    pub fn decode<R: Rng + ?Sized>(&self, context: &TokenSequence, decode: Decode, rng: &mut R) -> Result<TokenSequence> {
        match decode {
            Decode::Greedy => self.greedy(context),
            Decode::Sample { temperature } => self.sample(context, rng, temperature),
        }
    }

    pub fn gradient_step(&mut self, opt: &mut OptimizerState, batch: &[Example], mode: AggregationMode, lr: f64) -> Result<f64> {
        match self {
            Policy::Tabular(p) => p.gradient_step(opt, batch, mode, lr),
            Policy::Neural(p) => p.gradient_step(opt, batch, mode, lr),
        }
    }

    /// No-op for the tabular backend.
    pub fn init_special_embeddings<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        if let Policy::Neural(p) = self {
            p.init_special_embeddings(rng);
        }
    }

    fn state(&self) -> PolicyState {
        match self {
            Policy::Tabular(p) => PolicyState::Tabular(p.state()),
            Policy::Neural(p) => PolicyState::Neural(p.state()),
        }
    }

    /// SHA-256 over the serialized parameters.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(&self.state()).expect("parameters serialize");
        hex::encode(Sha256::digest(&bytes))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "backend", content = "state", rename_all = "snake_case")]
enum PolicyState {
    Tabular(tabular::TabularState),
    Neural(neural::NeuralState),
}

/// Self-describing parameter file. Loading checks the vocabulary hash.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub vocab_hash: String,
    /// Producing method, e.g. `fcp`, `sft`, `grpo_lite`.
    pub tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerState>,
    params: PolicyState,
}

impl Checkpoint {
    pub fn new(policy: &Policy, vocab: &Vocabulary, tag: &str) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            vocab_hash: vocab.hash(),
            tag: tag.to_string(),
            config_digest: None,
            round: None,
            optimizer: None,
            params: policy.state(),
        }
    }

    pub fn backend(&self) -> Backend {
        match self.params {
            PolicyState::Tabular(_) => Backend::Tabular,
            PolicyState::Neural(_) => Backend::Neural,
        }
    }

    pub fn policy(&self, vocab: &Vocabulary) -> Result<Policy> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(FcpError::Contract(format!(
                "checkpoint format {} unsupported (expected {CHECKPOINT_VERSION})",
                self.format_version
            )));
        }
        if self.vocab_hash != vocab.hash() {
            return Err(FcpError::Contract(format!(
                "checkpoint vocabulary hash {} does not match {}",
                self.vocab_hash,
                vocab.hash()
            )));
        }
        Ok(match self.params.clone() {
            PolicyState::Tabular(s) => Policy::Tabular(TabularPolicy::from_state(s)?),
            PolicyState::Neural(s) => Policy::Neural(NeuralPolicy::from_state(s)?),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| FcpError::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| FcpError::io(path.display().to_string(), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
