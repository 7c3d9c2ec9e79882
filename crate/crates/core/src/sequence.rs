//! Role-tagged token sequences and the `<EF> c </EF> x` context convention.

use serde::{Deserialize, Serialize};

use crate::error::{FcpError, Result};
use crate::vocab::Token;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Instruction,
    Response,
    Feedback,
    /// `<EF> feedback </EF> instruction`.
    Context,
    /// `instruction response`, the input side of critique prediction.
    CritiqueContext,
}

/// An immutable token list tagged with its role. Construction validates the
/// role's structural invariant.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    role: Role,
    tokens: Vec<Token>,
}

impl TokenSequence {
    pub fn new(role: Role, tokens: Vec<Token>) -> Result<Self> {
        validate(role, &tokens)?;
        Ok(TokenSequence { role, tokens })
    }

    pub fn instruction(tokens: Vec<Token>) -> Result<Self> {
        Self::new(Role::Instruction, tokens)
    }

    pub fn response(tokens: Vec<Token>) -> Result<Self> {
        Self::new(Role::Response, tokens)
    }

    pub fn feedback(tokens: Vec<Token>) -> Result<Self> {
        Self::new(Role::Feedback, tokens)
    }

    pub fn empty_feedback() -> Self {
        TokenSequence {
            role: Role::Feedback,
            tokens: Vec::new(),
        }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn into_tokens(self) -> Vec<Token> {
        self.tokens
    }

    /// A response that stopped at the length limit before emitting end-of-sequence.
    pub fn is_truncated(&self) -> bool {
        self.role == Role::Response && self.tokens.last() != Some(&Token::EOS)
    }

    /// Response length in tokens, not counting the end-of-sequence marker.
    pub fn content_len(&self) -> usize {
        self.tokens.iter().filter(|t| **t != Token::EOS).count()
    }
}

fn validate(role: Role, tokens: &[Token]) -> Result<()> {
    let bad = |msg: String| Err(FcpError::Contract(msg));
    match role {
        Role::Instruction | Role::Feedback => {
            if let Some(t) = tokens.iter().find(|t| t.is_special()) {
                return bad(format!("{role:?} sequence contains special token {t}"));
            }
        }
        Role::Response => {
            for (i, t) in tokens.iter().enumerate() {
                let last = i + 1 == tokens.len();
                if *t == Token::EOS && !last {
                    return bad(format!("end-of-sequence at position {i} is not final"));
                }
                if t.is_special() && *t != Token::EOS {
                    return bad(format!("response contains special token {t} at position {i}"));
                }
            }
        }
        Role::Context => {
            locate_wrapper(tokens).map_err(FcpError::MalformedContext)?;
        }
        Role::CritiqueContext => {
            if tokens.iter().any(|t| *t == Token::EF_OPEN || *t == Token::EF_CLOSE || *t == Token::PAD) {
                return bad("critique context may not contain wrapper or padding tokens".into());
            }
        }
    }
    Ok(())
}

/// Positions of `<EF>` and `</EF>`; `<EF>` must be the first token.
fn locate_wrapper(tokens: &[Token]) -> std::result::Result<(usize, usize), String> {
    let opens: Vec<usize> = positions(tokens, Token::EF_OPEN);
    let closes: Vec<usize> = positions(tokens, Token::EF_CLOSE);
    match (opens.as_slice(), closes.as_slice()) {
        ([o], [c]) if o < c => {
            if *o != 0 {
                return Err(format!("<EF> at position {o}, expected 0"));
            }
            Ok((*o, *c))
        }
        ([o], [c]) => Err(format!("</EF> at {c} precedes <EF> at {o}")),
        ([], _) => Err("missing <EF>".into()),
        (_, []) => Err("missing </EF>".into()),
        _ => Err(format!(
            "expected exactly one <EF> and one </EF>, found {} and {}",
            opens.len(),
            closes.len()
        )),
    }
}

fn positions(tokens: &[Token], needle: Token) -> Vec<usize> {
    tokens
        .iter()
        .enumerate()
        .filter_map(|(i, t)| (*t == needle).then_some(i))
        .collect()
}

/// `[<EF>, feedback, </EF>, instruction]`.
pub fn wrap_context(feedback: &TokenSequence, instruction: &TokenSequence) -> Result<TokenSequence> {
    if feedback.role() != Role::Feedback {
        return Err(FcpError::Contract(format!(
            "wrap_context expects a feedback sequence, got {:?}",
            feedback.role()
        )));
    }
    if instruction.role() != Role::Instruction {
        return Err(FcpError::Contract(format!(
            "wrap_context expects an instruction sequence, got {:?}",
            instruction.role()
        )));
    }
    let mut tokens = Vec::with_capacity(feedback.len() + instruction.len() + 2);
    tokens.push(Token::EF_OPEN);
    tokens.extend_from_slice(feedback.tokens());
    tokens.push(Token::EF_CLOSE);
    tokens.extend_from_slice(instruction.tokens());
    Ok(TokenSequence {
        role: Role::Context,
        tokens,
    })
}

/// Inverse of [`wrap_context`].
pub fn unwrap_context(context: &TokenSequence) -> Result<(TokenSequence, TokenSequence)> {
    let (open, close) = locate_wrapper(context.tokens()).map_err(FcpError::MalformedContext)?;
    let feedback = TokenSequence::new(Role::Feedback, context.tokens()[open + 1..close].to_vec())
        .map_err(|e| FcpError::MalformedContext(e.to_string()))?;
    let instruction = TokenSequence::new(Role::Instruction, context.tokens()[close + 1..].to_vec())
        .map_err(|e| FcpError::MalformedContext(e.to_string()))?;
    Ok((feedback, instruction))
}

/// Returns the instruction a policy context refers to: the bare instruction for
/// unconditioned contexts, the unwrapped one for feedback-conditioned contexts.
pub fn instruction_of(context: &TokenSequence) -> Result<TokenSequence> {
    match context.role() {
        Role::Instruction => Ok(context.clone()),
        Role::Context => Ok(unwrap_context(context)?.1),
        other => Err(FcpError::Contract(format!(
            "expected an instruction or context, got {other:?}"
        ))),
    }
}

/// `[instruction, response]` with the response's end-of-sequence kept.
pub fn critique_context(instruction: &TokenSequence, response: &TokenSequence) -> Result<TokenSequence> {
    if instruction.role() != Role::Instruction || response.role() != Role::Response {
        return Err(FcpError::Contract("critique context needs (instruction, response)".into()));
    }
    let mut tokens = instruction.tokens().to_vec();
    tokens.extend_from_slice(response.tokens());
    TokenSequence::new(Role::CritiqueContext, tokens)
}
