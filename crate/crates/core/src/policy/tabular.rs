//! Exact tabular distributions over enumerated outcome sets.
//!
//! Each outcome space is registered under a space key (the bare instruction for
//! response tables, a single shared key for critique tables) together with base
//! logits. A context without its own row falls back to the base logits, so an
//! untrained table is the reference policy for every feedback condition.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FcpError, Result};
use crate::sequence::{instruction_of, wrap_context, Role, TokenSequence};
use crate::vocab::Token;

use super::optim::{AdamMoments, OptimizerState};
use super::{aggregation_denominator, AggregationMode, Example, LogProb};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableRole {
    /// `pi(o | x, c)`: outcomes are responses.
    Response,
    /// `p(c | x, o)`: outcomes are feedback strings.
    Critique,
}

#[derive(Clone, Debug)]
struct Space {
    outcomes: Vec<TokenSequence>,
    index: HashMap<Vec<Token>, usize>,
    base: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct TabularPolicy {
    role: TableRole,
    vocab_size: usize,
    spaces: BTreeMap<Vec<Token>, Space>,
    tables: BTreeMap<Vec<Token>, Vec<f64>>,
}

pub(crate) fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits
        .iter()
        .map(|&z| if z == f64::NEG_INFINITY { 0.0 } else { ((z - max) / temperature).exp() })
        .collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn ln(p: f64) -> f64 {
    if p > 0.0 {
        p.ln()
    } else {
        f64::NEG_INFINITY
    }
}

impl TabularPolicy {
    pub fn new(role: TableRole, vocab_size: usize) -> Self {
        TabularPolicy {
            role,
            vocab_size,
            spaces: BTreeMap::new(),
            tables: BTreeMap::new(),
        }
    }

    pub fn role(&self) -> TableRole {
        self.role
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Registers the outcome space of a response table with its reference probabilities.
    pub fn add_response_space(&mut self, instruction: &TokenSequence, outcomes: Vec<TokenSequence>, probs: &[f64]) -> Result<()> {
        if self.role != TableRole::Response || instruction.role() != Role::Instruction {
            return Err(FcpError::Contract("response spaces are keyed by a bare instruction".into()));
        }
        self.add_space(instruction.tokens().to_vec(), outcomes, probs, Role::Response)
    }

    /// Registers the shared feedback space of a critique table.
    pub fn add_critique_space(&mut self, outcomes: Vec<TokenSequence>, probs: &[f64]) -> Result<()> {
        if self.role != TableRole::Critique {
            return Err(FcpError::Contract("critique space on a response table".into()));
        }
        self.add_space(Vec::new(), outcomes, probs, Role::Feedback)
    }

    fn add_space(&mut self, key: Vec<Token>, outcomes: Vec<TokenSequence>, probs: &[f64], role: Role) -> Result<()> {
        if outcomes.is_empty() || outcomes.len() != probs.len() {
            return Err(FcpError::Contract(format!(
                "{} outcomes with {} probabilities",
                outcomes.len(),
                probs.len()
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) || probs.iter().sum::<f64>() <= 0.0 {
            return Err(FcpError::Contract("outcome weights must be nonnegative with positive sum".into()));
        }
        let mut index = HashMap::new();
        for (i, o) in outcomes.iter().enumerate() {
            if o.role() != role {
                return Err(FcpError::Contract(format!("outcome {i} has role {:?}", o.role())));
            }
            self.check_tokens(o.tokens())?;
            if index.insert(o.tokens().to_vec(), i).is_some() {
                return Err(FcpError::Contract(format!("duplicate outcome {i}")));
            }
        }
        let base = probs.iter().map(|&p| ln(p)).collect();
        self.spaces.insert(key, Space { outcomes, index, base });
        Ok(())
    }

    fn check_tokens(&self, tokens: &[Token]) -> Result<()> {
        match tokens.iter().find(|t| t.index() >= self.vocab_size) {
            Some(t) => Err(FcpError::Contract(format!("token {t} outside vocabulary of {}", self.vocab_size))),
            None => Ok(()),
        }
    }

    fn space_key(&self, context: &TokenSequence) -> Result<Vec<Token>> {
        self.check_tokens(context.tokens())?;
        match (self.role, context.role()) {
            (TableRole::Response, Role::Instruction | Role::Context) => Ok(instruction_of(context)?.into_tokens()),
            (TableRole::Critique, Role::CritiqueContext) => Ok(Vec::new()),
            (role, r) => Err(FcpError::Contract(format!("{role:?} table cannot condition on a {r:?} sequence"))),
        }
    }

    fn lookup(&self, context: &TokenSequence) -> Result<(&Space, &[f64])> {
        let key = self.space_key(context)?;
        let space = self
            .spaces
            .get(&key)
            .ok_or_else(|| FcpError::Contract("no outcome space registered for this context".into()))?;
        let logits = self.tables.get(context.tokens()).unwrap_or(&space.base);
        Ok((space, logits))
    }

    pub fn outcomes(&self, context: &TokenSequence) -> Result<&[TokenSequence]> {
        Ok(&self.lookup(context)?.0.outcomes)
    }

    pub fn probabilities(&self, context: &TokenSequence) -> Result<Vec<f64>> {
        Ok(softmax(self.lookup(context)?.1, 1.0))
    }

    /// Reference probabilities of a registered space.
    pub fn base_probabilities(&self, instruction: &TokenSequence) -> Result<Vec<f64>> {
        let key = self.space_key(instruction)?;
        let space = self
            .spaces
            .get(&key)
            .ok_or_else(|| FcpError::Contract("no outcome space registered".into()))?;
        Ok(softmax(&space.base, 1.0))
    }

    /// Overwrites the conditional for `context` with `probs` (aligned with the outcome list).
    pub fn set_distribution(&mut self, context: &TokenSequence, probs: &[f64]) -> Result<()> {
        let n = self.lookup(context)?.0.outcomes.len();
        if probs.len() != n {
            return Err(FcpError::Contract(format!("expected {n} probabilities, got {}", probs.len())));
        }
        self.tables.insert(context.tokens().to_vec(), probs.iter().map(|&p| ln(p)).collect());
        Ok(())
    }

    /// Contexts with their own row, in key order.
    pub fn contexts(&self) -> impl Iterator<Item = &Vec<Token>> {
        self.tables.keys()
    }

    pub fn spaces(&self) -> impl Iterator<Item = (&Vec<Token>, &[TokenSequence])> {
        self.spaces.iter().map(|(k, s)| (k, s.outcomes.as_slice()))
    }

    pub fn log_prob(&self, context: &TokenSequence, o: &TokenSequence) -> Result<LogProb> {
        self.check_tokens(o.tokens())?;
        let (space, logits) = self.lookup(context)?;
        let probs = softmax(logits, 1.0);
        let Some(&idx) = space.index.get(o.tokens()) else {
            return Ok(LogProb {
                total: f64::NEG_INFINITY,
                per_token: vec![f64::NEG_INFINITY; o.len().max(1)],
            });
        };
        let toks = o.tokens();
        let prefix_mass = |n: usize| -> f64 {
            space
                .outcomes
                .iter()
                .zip(&probs)
                .filter(|(c, _)| c.tokens().len() >= n && c.tokens()[..n] == toks[..n])
                .map(|(_, p)| p)
                .sum()
        };
        let mut per_token = Vec::with_capacity(toks.len());
        let mut den = 1.0;
        for i in 1..=toks.len() {
            let num = if i == toks.len() { probs[idx] } else { prefix_mass(i) };
            per_token.push(ln(num) - ln(den));
            den = num;
        }
        Ok(LogProb {
            total: ln(probs[idx]),
            per_token,
        })
    }

    /// Draws one outcome from the sequence-level distribution tempered by `temperature`.
    pub fn sample<R: Rng + ?Sized>(&self, context: &TokenSequence, rng: &mut R, temperature: f64) -> Result<TokenSequence> {
        if self.role == TableRole::Critique {
            return Err(FcpError::Contract("a critique table is not a response policy".into()));
        }
        if !(temperature > 0.0) {
            return Err(FcpError::Contract(format!("temperature {temperature} must be positive")));
        }
        let (space, logits) = self.lookup(context)?;
        let probs = softmax(logits, temperature);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, p) in probs.iter().enumerate() {
            if *p > 0.0 {
                last = i;
                acc += p;
                if u < acc {
                    return Ok(space.outcomes[i].clone());
                }
            }
        }
        Ok(space.outcomes[last].clone())
    }

    /// Most probable outcome; exact ties go to the lexicographically smallest token sequence.
    pub fn greedy(&self, context: &TokenSequence) -> Result<TokenSequence> {
        if self.role == TableRole::Critique {
            return Err(FcpError::Contract("a critique table is not a response policy".into()));
        }
        let (space, logits) = self.lookup(context)?;
        let mut best = 0;
        for i in 1..logits.len() {
            let better = logits[i] > logits[best]
                || (logits[i] == logits[best] && space.outcomes[i].tokens() < space.outcomes[best].tokens());
            if better {
                best = i;
            }
        }
        Ok(space.outcomes[best].clone())
    }

    /// Closed-form softmax gradient of the aggregated loss followed by one Adam
    /// update per touched context row.
    pub fn gradient_step(&mut self, opt: &mut OptimizerState, batch: &[Example], mode: AggregationMode, lr: f64) -> Result<f64> {
        if batch.is_empty() {
            return Err(FcpError::Contract("empty batch".into()));
        }
        let denom = aggregation_denominator(batch, mode);
        // per row: softmax, total example weight and the sparse target terms;
        // the gradient is `mass * probs - sum_i w_i e_{o_i}`
        struct Row<'a> {
            space: &'a Space,
            probs: Vec<f64>,
            mass: f64,
            grad: Vec<f64>,
        }
        let mut rows: BTreeMap<&[Token], Row<'_>> = BTreeMap::new();
        let mut loss = 0.0;
        for (i, ex) in batch.iter().enumerate() {
            let key = ex.context.tokens();
            if !rows.contains_key(key) {
                let (space, logits) = self.lookup(&ex.context)?;
                let probs = softmax(logits, 1.0);
                let grad = vec![0.0; probs.len()];
                rows.insert(key, Row { space, probs, mass: 0.0, grad });
            }
            let row = rows.get_mut(key).expect("inserted above");
            let idx = *row.space.index.get(ex.target.tokens()).ok_or_else(|| {
                FcpError::Contract(format!("batch item {i}: target outside the tabular outcome space"))
            })?;
            let nll = -ln(row.probs[idx]);
            if !nll.is_finite() || !ex.weight.is_finite() {
                return Err(FcpError::NonFiniteLoss { index: i });
            }
            let scale = ex.weight / denom;
            loss += scale * nll;
            row.mass += scale;
            row.grad[idx] -= scale;
        }
        let grads: Vec<(Vec<Token>, Vec<f64>)> = rows
            .into_iter()
            .map(|(key, mut row)| {
                for (g, p) in row.grad.iter_mut().zip(&row.probs) {
                    *g += row.mass * p;
                }
                (key.to_vec(), row.grad)
            })
            .collect();
        let mut moments = opt.tabular_moments();
        for (key, g) in grads {
            let row = match self.tables.get_mut(&key) {
                Some(r) => r,
                None => {
                    let ctx = TokenSequence::new(role_of_key(self.role, &key), key.clone())?;
                    let base = self.lookup(&ctx)?.0.base.clone();
                    self.tables.entry(key.clone()).or_insert(base)
                }
            };
            moments
                .entry(key)
                .or_insert_with(|| AdamMoments::new(g.len()))
                .update(row, &g, lr, super::optim::TABULAR_EPS);
        }
        opt.set_tabular_moments(moments);
        opt.step += 1;
        Ok(loss)
    }

    pub(crate) fn state(&self) -> TabularState {
        let opt = |v: &[f64]| v.iter().map(|x| x.is_finite().then_some(*x)).collect();
        TabularState {
            role: self.role,
            vocab_size: self.vocab_size,
            spaces: self
                .spaces
                .iter()
                .map(|(k, s)| SpaceState {
                    key: k.clone(),
                    outcomes: s.outcomes.iter().map(|o| o.tokens().to_vec()).collect(),
                    base: opt(&s.base),
                })
                .collect(),
            tables: self.tables.iter().map(|(k, v)| (k.clone(), opt(v))).collect(),
        }
    }

    pub(crate) fn from_state(state: TabularState) -> Result<Self> {
        let unopt = |v: Vec<Option<f64>>| v.into_iter().map(|x| x.unwrap_or(f64::NEG_INFINITY)).collect::<Vec<_>>();
        let outcome_role = match state.role {
            TableRole::Response => Role::Response,
            TableRole::Critique => Role::Feedback,
        };
        let mut p = TabularPolicy::new(state.role, state.vocab_size);
        for s in state.spaces {
            let outcomes = s
                .outcomes
                .into_iter()
                .map(|o| TokenSequence::new(outcome_role, o))
                .collect::<Result<Vec<_>>>()?;
            let base = unopt(s.base);
            if base.len() != outcomes.len() {
                return Err(FcpError::Contract("checkpoint space has mismatched logits".into()));
            }
            let index = outcomes.iter().enumerate().map(|(i, o)| (o.tokens().to_vec(), i)).collect();
            p.spaces.insert(s.key, Space { outcomes, index, base });
        }
        for (k, v) in state.tables {
            p.tables.insert(k, unopt(v));
        }
        Ok(p)
    }
}

fn role_of_key(role: TableRole, key: &[Token]) -> Role {
    match role {
        TableRole::Critique => Role::CritiqueContext,
        TableRole::Response if key.first() == Some(&Token::EF_OPEN) => Role::Context,
        TableRole::Response => Role::Instruction,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct SpaceState {
    key: Vec<Token>,
    outcomes: Vec<Vec<Token>>,
    base: Vec<Option<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct TabularState {
    role: TableRole,
    vocab_size: usize,
    spaces: Vec<SpaceState>,
    tables: Vec<(Vec<Token>, Vec<Option<f64>>)>,
}

/// Tabular parameters whose conditional equals the joint's posterior for every
/// feedback with positive marginal. Returns the indices of excluded feedbacks.
pub fn exact_conditional_fit(joint: &crate::oracle::JointTable, vocab_size: usize) -> Result<(TabularPolicy, Vec<usize>)> {
    let mut p = TabularPolicy::new(TableRole::Response, vocab_size);
    p.add_response_space(&joint.instruction, joint.responses.clone(), &joint.prior)?;
    let mut excluded = Vec::new();
    for (j, c) in joint.feedbacks.iter().enumerate() {
        match joint.posterior(j) {
            Ok(post) => p.set_distribution(&wrap_context(c, &joint.instruction)?, &post)?,
            Err(FcpError::OutOfSupport) => excluded.push(j),
            Err(e) => return Err(e),
        }
    }
    Ok((p, excluded))
}
