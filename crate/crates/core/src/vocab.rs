//! Closed vocabulary shared by the environment, the policies and the dataset codec.
//!
//! Ids `0..5` are reserved for the special tokens in every vocabulary, so code that
//! only needs the specials (context wrapping, sampling masks) never needs a
//! vocabulary handle.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{FcpError, Result};

/// Index into a [`Vocabulary`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Token(u32);

impl Token {
    pub const PAD: Token = Token(0);
    pub const BOS: Token = Token(1);
    pub const EOS: Token = Token(2);
    /// Opens the expected-feedback span.
    pub const EF_OPEN: Token = Token(3);
    /// Closes the expected-feedback span.
    pub const EF_CLOSE: Token = Token(4);

    pub const fn new(id: u32) -> Self {
        Token(id)
    }

    pub const fn id(self) -> u32 {
        self.0
    }

    pub const fn index(self) -> usize {
        self.0 as usize
    }

    pub fn is_special(self) -> bool {
        self.0 < SPECIALS.len() as u32
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

pub const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<EF>", "</EF>"];

#[derive(Clone, Debug)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, Token>,
}

impl Vocabulary {
    /// Builds a vocabulary from `words`, prepending the five specials. Duplicates keep
    /// their first position; whitespace inside a word is rejected.
    pub fn new<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for w in SPECIALS.iter().map(|s| s.to_string()).chain(words.into_iter().map(Into::into)) {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(FcpError::Config(format!("invalid vocabulary word {w:?}")));
            }
            if vocab.index.contains_key(&w) {
                continue;
            }
            let tok = Token(vocab.words.len() as u32);
            vocab.index.insert(w.clone(), tok);
            vocab.words.push(w);
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn contains(&self, token: Token) -> bool {
        token.index() < self.words.len()
    }

    pub fn token(&self, word: &str) -> Option<Token> {
        self.index.get(word).copied()
    }

    /// Like [`Vocabulary::token`] but reports unknown words as a contract error.
    pub fn expect(&self, word: &str) -> Result<Token> {
        self.token(word)
            .ok_or_else(|| FcpError::Contract(format!("word {word:?} is not in the vocabulary")))
    }

    pub fn word(&self, token: Token) -> Option<&str> {
        self.words.get(token.index()).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Whitespace tokenizer over the closed vocabulary.
    pub fn tokenize(&self, text: &str) -> Result<Vec<Token>> {
        text.split_whitespace().map(|w| self.expect(w)).collect()
    }

    /// Space-joined rendering; the exact inverse of [`Vocabulary::tokenize`].
    pub fn render(&self, tokens: &[Token]) -> String {
        let mut out = String::new();
        for (i, t) in tokens.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(self.word(*t).unwrap_or("<unk>"));
        }
        out
    }

    pub fn check(&self, tokens: &[Token]) -> Result<()> {
        match tokens.iter().find(|t| !self.contains(**t)) {
            Some(t) => Err(FcpError::Contract(format!(
                "token {t} outside vocabulary of size {}",
                self.len()
            ))),
            None => Ok(()),
        }
    }

    /// Hex SHA-256 over the ordered word list. Checkpoints carry it so that weights
    /// are never loaded against a different token layout.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.words {
            h.update(w.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_are_reserved_and_distinct() {
        let v = Vocabulary::new(["a", "b"]).unwrap();
        let ids = [Token::PAD, Token::BOS, Token::EOS, Token::EF_OPEN, Token::EF_CLOSE];
        for (i, t) in ids.iter().enumerate() {
            assert_eq!(v.word(*t), Some(SPECIALS[i]));
            for u in &ids[i + 1..] {
                assert_ne!(t, u);
            }
        }
        assert_eq!(v.len(), 7);
    }

    #[test]
    fn duplicates_keep_first_position() {
        let v = Vocabulary::new(["x", "y", "x"]).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.token("x"), Some(Token::new(5)));
    }

    #[test]
    fn tokenize_render_round_trip() {
        let v = Vocabulary::new(["3", "+", "4", "mod", "10", "=", "?"]).unwrap();
        let toks = v.tokenize("3 + 4 mod 10 = ?").unwrap();
        assert_eq!(v.render(&toks), "3 + 4 mod 10 = ?");
        assert!(v.tokenize("3 + 5").is_err());
    }

    #[test]
    fn hash_depends_on_order() {
        let a = Vocabulary::new(["a", "b"]).unwrap();
        let b = Vocabulary::new(["b", "a"]).unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), Vocabulary::new(["a", "b"]).unwrap().hash());
    }
}
