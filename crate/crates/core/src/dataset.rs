//! Triples, datasets and their JSONL codec.
//!
//! One record per line, fields in the fixed order `x, o, c, style, score, round`.
//! `score` is omitted when absent and `round` is present only for online buffers.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{FcpError, Result};
use crate::sequence::{Role, TokenSequence};
use crate::vocab::Vocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Style {
    User,
    Reviewer,
}

impl Style {
    pub const ALL: [Style; 2] = [Style::User, Style::Reviewer];

    pub fn as_str(self) -> &'static str {
        match self {
            Style::User => "user",
            Style::Reviewer => "reviewer",
        }
    }
}

/// Verbal feedback with its style tag and optional scalar score in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredFeedback {
    text: TokenSequence,
    style: Style,
    score: Option<f64>,
}

impl ScoredFeedback {
    pub fn new(text: TokenSequence, style: Style, score: Option<f64>) -> Result<Self> {
        if text.role() != Role::Feedback {
            return Err(FcpError::Contract(format!(
                "feedback text has role {:?}",
                text.role()
            )));
        }
        if let Some(s) = score {
            if !(0.0..=1.0).contains(&s) {
                return Err(FcpError::Contract(format!("score {s} outside [0, 1]")));
            }
        }
        Ok(ScoredFeedback { text, style, score })
    }

    pub fn text(&self) -> &TokenSequence {
        &self.text
    }

    pub fn style(&self) -> Style {
        self.style
    }

    pub fn score(&self) -> Option<f64> {
        self.score
    }
}

/// One `(instruction, response, feedback)` record.
#[derive(Clone, Debug, PartialEq)]
pub struct Triple {
    pub instruction: TokenSequence,
    pub response: TokenSequence,
    pub feedback: ScoredFeedback,
}

impl Triple {
    pub fn new(instruction: TokenSequence, response: TokenSequence, feedback: ScoredFeedback) -> Result<Self> {
        if instruction.role() != Role::Instruction || response.role() != Role::Response {
            return Err(FcpError::Contract("triple roles do not match their fields".into()));
        }
        Ok(Triple {
            instruction,
            response,
            feedback,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Offline,
    OnlineRound(u32),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub triples: Vec<Triple>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn offline(triples: Vec<Triple>) -> Self {
        Dataset {
            triples,
            provenance: Provenance::Offline,
        }
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Triple> {
        self.triples.iter()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TripleRecord {
    x: String,
    o: String,
    c: String,
    style: Style,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    round: Option<u32>,
}

pub fn serialize_dataset<W: Write>(dataset: &Dataset, vocab: &Vocabulary, mut sink: W) -> Result<()> {
    let round = match dataset.provenance {
        Provenance::Offline => None,
        Provenance::OnlineRound(t) => Some(t),
    };
    for triple in &dataset.triples {
        let rec = TripleRecord {
            x: vocab.render(triple.instruction.tokens()),
            o: vocab.render(triple.response.tokens()),
            c: vocab.render(triple.feedback.text().tokens()),
            style: triple.feedback.style(),
            score: triple.feedback.score(),
            round,
        };
        serde_json::to_writer(&mut sink, &rec)?;
        sink.write_all(b"\n").map_err(|e| FcpError::io("<sink>", e))?;
    }
    Ok(())
}

/// Parses a JSONL stream. Blank lines are skipped; a dataset whose records carry a
/// `round` field is an online buffer and every record must agree on it.
pub fn deserialize_dataset<R: BufRead>(source: R, vocab: &Vocabulary) -> Result<Dataset> {
    let mut triples = Vec::new();
    let mut round: Option<Option<u32>> = None;
    for (i, line) in source.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| FcpError::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let perr = |message: String| FcpError::Parse { line: lineno, message };
        let rec: TripleRecord = serde_json::from_str(&line).map_err(|e| perr(e.to_string()))?;
        match round {
            None => round = Some(rec.round),
            Some(r) if r != rec.round => return Err(perr("records disagree on round".into())),
            _ => {}
        }
        let seq = |role: Role, text: &str| -> Result<TokenSequence> {
            let toks = vocab.tokenize(text).map_err(|e| perr(e.to_string()))?;
            TokenSequence::new(role, toks).map_err(|e| perr(e.to_string()))
        };
        let feedback = ScoredFeedback::new(seq(Role::Feedback, &rec.c)?, rec.style, rec.score)
            .map_err(|e| perr(e.to_string()))?;
        triples.push(Triple {
            instruction: seq(Role::Instruction, &rec.x)?,
            response: seq(Role::Response, &rec.o)?,
            feedback,
        });
    }
    let provenance = match round.flatten() {
        Some(t) => Provenance::OnlineRound(t),
        None => Provenance::Offline,
    };
    Ok(Dataset { triples, provenance })
}
