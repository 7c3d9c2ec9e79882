//! Synthetic tasks, response parsing and ground-truth verification.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{FcpError, Result};
use crate::sequence::{Role, TokenSequence};
use crate::vocab::{Token, Vocabulary};

/// Largest integer with its own token; bounds operands and moduli.
pub const MAX_NUMBER: u32 = 19;
pub const MODULUS_RANGE: std::ops::RangeInclusive<u32> = 2..=10;
pub const WORD_LENGTHS: std::ops::RangeInclusive<u32> = 3..=6;
/// Style marker the policy may emit as the first response token.
pub const MARKER: &str = "```";
/// Reasoning filler; the count of fillers sets a response's length bucket.
pub const FILLER: &str = "step";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ModularArithmetic,
    StringTransform,
}

impl TaskKind {
    /// Supported difficulty levels: operand bound for arithmetic, maximum word
    /// length for string transforms.
    pub fn difficulty_range(self) -> std::ops::RangeInclusive<u32> {
        match self {
            TaskKind::ModularArithmetic => 1..=MAX_NUMBER,
            TaskKind::StringTransform => WORD_LENGTHS,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArithOp {
    Add,
    Sub,
    Mul,
}

impl ArithOp {
    const ALL: [ArithOp; 3] = [ArithOp::Add, ArithOp::Sub, ArithOp::Mul];

    fn symbol(self) -> &'static str {
        match self {
            ArithOp::Add => "+",
            ArithOp::Sub => "-",
            ArithOp::Mul => "*",
        }
    }

    fn apply(self, a: i64, b: i64) -> i64 {
        match self {
            ArithOp::Add => a + b,
            ArithOp::Sub => a - b,
            ArithOp::Mul => a * b,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StringOp {
    Upper,
    Reverse,
}

impl StringOp {
    fn keyword(self) -> &'static str {
        match self {
            StringOp::Upper => "upper",
            StringOp::Reverse => "reverse",
        }
    }

    fn apply(self, word: &str) -> String {
        match self {
            StringOp::Upper => word.to_ascii_uppercase(),
            StringOp::Reverse => word.chars().rev().collect(),
        }
    }

    fn other(self) -> StringOp {
        match self {
            StringOp::Upper => StringOp::Reverse,
            StringOp::Reverse => StringOp::Upper,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSpec {
    Modular { a: u32, op: ArithOp, b: u32, modulus: u32 },
    Transform { op: StringOp, word: String },
}

impl TaskSpec {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskSpec::Modular { .. } => TaskKind::ModularArithmetic,
            TaskSpec::Transform { .. } => TaskKind::StringTransform,
        }
    }

    /// Answer words, computed directly from the task definition.
    pub fn answer_words(&self) -> Vec<String> {
        match self {
            TaskSpec::Modular { a, op, b, modulus } => {
                let m = i64::from(*modulus);
                let r = op.apply(i64::from(*a), i64::from(*b)).rem_euclid(m);
                vec![r.to_string()]
            }
            TaskSpec::Transform { op, word } => op.apply(word).chars().map(String::from).collect(),
        }
    }

    fn instruction_words(&self) -> Vec<String> {
        match self {
            TaskSpec::Modular { a, op, b, modulus } => vec![
                a.to_string(),
                op.symbol().to_string(),
                b.to_string(),
                "mod".into(),
                modulus.to_string(),
                "=".into(),
                "?".into(),
            ],
            TaskSpec::Transform { op, word } => std::iter::once(op.keyword().to_string())
                .chain(word.chars().map(String::from))
                .chain(std::iter::once("?".to_string()))
                .collect(),
        }
    }
}

/// Stable identifier derived from the task content, used to keep evaluation
/// instances disjoint from training instances.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InstanceId(pub u64);

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:016x}", self.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskInstance {
    id: InstanceId,
    spec: TaskSpec,
    instruction: TokenSequence,
    ground_truth: TokenSequence,
}

impl TaskInstance {
    pub fn from_spec(spec: TaskSpec, vocab: &Vocabulary) -> Result<Self> {
        let words = spec.instruction_words();
        let instr = words.iter().map(|w| vocab.expect(w)).collect::<Result<Vec<_>>>()?;
        let mut truth = spec
            .answer_words()
            .iter()
            .map(|w| vocab.expect(w))
            .collect::<Result<Vec<_>>>()?;
        truth.push(Token::EOS);
        let mut h = Sha256::new();
        h.update(words.join(" ").as_bytes());
        let digest = h.finalize();
        Ok(TaskInstance {
            id: InstanceId(u64::from_le_bytes(digest[..8].try_into().expect("32-byte digest"))),
            spec,
            instruction: TokenSequence::instruction(instr)?,
            ground_truth: TokenSequence::response(truth)?,
        })
    }

    /// Recovers the task from its rendered instruction.
    pub fn parse(instruction: &TokenSequence, vocab: &Vocabulary) -> Result<Self> {
        let words: Vec<&str> = instruction
            .tokens()
            .iter()
            .map(|t| vocab.word(*t).unwrap_or("<unk>"))
            .collect();
        let fail = || FcpError::Contract(format!("not a task instruction: {:?}", words.join(" ")));
        let num = |w: &str| w.parse::<u32>().ok().filter(|n| *n <= MAX_NUMBER);
        let spec = match words.as_slice() {
            [a, op, b, "mod", m, "=", "?"] => {
                let op = ArithOp::ALL
                    .into_iter()
                    .find(|o| o.symbol() == *op)
                    .ok_or_else(fail)?;
                let modulus = num(m).filter(|m| MODULUS_RANGE.contains(m)).ok_or_else(fail)?;
                TaskSpec::Modular {
                    a: num(a).ok_or_else(fail)?,
                    op,
                    b: num(b).ok_or_else(fail)?,
                    modulus,
                }
            }
            [kw, letters @ .., "?"] if !letters.is_empty() => {
                let op = match *kw {
                    "upper" => StringOp::Upper,
                    "reverse" => StringOp::Reverse,
                    _ => return Err(fail()),
                };
                if !letters.iter().all(|l| l.len() == 1 && l.as_bytes()[0].is_ascii_lowercase()) {
                    return Err(fail());
                }
                TaskSpec::Transform {
                    op,
                    word: letters.concat(),
                }
            }
            _ => return Err(fail()),
        };
        Self::from_spec(spec, vocab)
    }

    pub fn id(&self) -> InstanceId {
        self.id
    }

    pub fn kind(&self) -> TaskKind {
        self.spec.kind()
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn instruction(&self) -> &TokenSequence {
        &self.instruction
    }

    pub fn ground_truth(&self) -> &TokenSequence {
        &self.ground_truth
    }

    /// Ground truth without the trailing end-of-sequence.
    pub fn answer(&self) -> &[Token] {
        let t = self.ground_truth.tokens();
        &t[..t.len() - 1]
    }
}

/// Every word the task side of the vocabulary needs.
pub fn task_words() -> Vec<String> {
    let mut w: Vec<String> = (0..=MAX_NUMBER).map(|n| n.to_string()).collect();
    w.extend(["+", "-", "*", "mod", "=", "?", "upper", "reverse"].map(String::from));
    w.extend((b'a'..=b'z').map(|c| (c as char).to_string()));
    w.extend((b'A'..=b'Z').map(|c| (c as char).to_string()));
    w.push(MARKER.into());
    w.push(FILLER.into());
    w
}

/// Draws a task. Arithmetic: operands uniform in `0..=difficulty`, operator
/// uniform, modulus uniform in 2..=10. Strings: length uniform in
/// `3..=difficulty`, lowercase letters, operation uniform.
pub fn generate_instruction<R: Rng + ?Sized>(
    kind: TaskKind,
    difficulty: u32,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<TaskInstance> {
    if !kind.difficulty_range().contains(&difficulty) {
        return Err(FcpError::Config(format!(
            "difficulty {difficulty} unsupported for {kind:?} (range {:?})",
            kind.difficulty_range()
        )));
    }
    let spec = match kind {
        TaskKind::ModularArithmetic => TaskSpec::Modular {
            a: rng.random_range(0..=difficulty),
            op: ArithOp::ALL[rng.random_range(0..3)],
            b: rng.random_range(0..=difficulty),
            modulus: rng.random_range(MODULUS_RANGE),
        },
        TaskKind::StringTransform => {
            let len = rng.random_range(*WORD_LENGTHS.start()..=difficulty);
            let word = (0..len).map(|_| (b'a' + rng.random_range(0..26u8)) as char).collect();
            let op = if rng.random_bool(0.5) { StringOp::Upper } else { StringOp::Reverse };
            TaskSpec::Transform { op, word }
        }
    };
    TaskInstance::from_spec(spec, vocab)
}

/// Cached ids for the token classes the response grammar distinguishes.
#[derive(Clone, Debug)]
pub struct TaskTokens {
    pub marker: Token,
    pub filler: Token,
    numbers: Vec<Token>,
    letters: Vec<Token>,
}

impl TaskTokens {
    pub fn new(vocab: &Vocabulary) -> Result<Self> {
        let numbers = (0..=MAX_NUMBER)
            .map(|n| vocab.expect(&n.to_string()))
            .collect::<Result<Vec<_>>>()?;
        let letters = (b'a'..=b'z')
            .chain(b'A'..=b'Z')
            .map(|c| vocab.expect(&(c as char).to_string()))
            .collect::<Result<Vec<_>>>()?;
        Ok(TaskTokens {
            marker: vocab.expect(MARKER)?,
            filler: vocab.expect(FILLER)?,
            numbers,
            letters,
        })
    }

    pub fn is_answer_token(&self, kind: TaskKind, t: Token) -> bool {
        match kind {
            TaskKind::ModularArithmetic => self.numbers.contains(&t),
            TaskKind::StringTransform => self.letters.contains(&t),
        }
    }

    /// Tokens of the reasoning prefix (marker and filler).
    pub fn is_reasoning_token(&self, t: Token) -> bool {
        t == self.marker || t == self.filler
    }
}

/// Structure recovered from a response under the grammar
/// `[marker] filler* answer+ [<eos>]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsedResponse {
    pub has_marker: bool,
    pub fillers: usize,
    /// `None` when the response does not follow the grammar.
    pub answer: Option<Vec<Token>>,
}

pub fn parse_response(kind: TaskKind, tokens: &TaskTokens, response: &[Token]) -> ParsedResponse {
    let body = match response.last() {
        Some(&Token::EOS) => &response[..response.len() - 1],
        _ => response,
    };
    let has_marker = body.contains(&tokens.marker);
    let fillers = body.iter().filter(|t| **t == tokens.filler).count();
    let mut rest = body;
    if rest.first() == Some(&tokens.marker) {
        rest = &rest[1..];
    }
    let lead = rest.iter().take_while(|t| **t == tokens.filler).count();
    rest = &rest[lead..];
    let span = rest.iter().take_while(|t| tokens.is_answer_token(kind, **t)).count();
    let answer = (span > 0 && span == rest.len()).then(|| rest.to_vec());
    ParsedResponse {
        has_marker,
        fillers,
        answer,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Correct,
    Incorrect,
}

impl Verdict {
    pub fn is_correct(self) -> bool {
        self == Verdict::Correct
    }
}

/// Correct iff the response's answer span equals the ground truth. Responses that
/// do not parse are incorrect.
pub fn verify(task: &TaskInstance, tokens: &TaskTokens, response: &TokenSequence) -> Verdict {
    if response.role() != Role::Response {
        return Verdict::Incorrect;
    }
    match parse_response(task.kind(), tokens, response.tokens()).answer {
        Some(a) if a.as_slice() == task.answer() => Verdict::Correct,
        _ => Verdict::Incorrect,
    }
}

/// Plausible wrong answers: for arithmetic every other residue; for strings the
/// untransformed word, the other operation and the truncated answer.
pub fn wrong_answers(task: &TaskInstance, vocab: &Vocabulary) -> Result<Vec<Vec<Token>>> {
    let truth = task.spec().answer_words();
    let mut out: Vec<Vec<String>> = Vec::new();
    match task.spec() {
        TaskSpec::Modular { modulus, .. } => {
            for r in 0..*modulus {
                out.push(vec![r.to_string()]);
            }
        }
        TaskSpec::Transform { op, word } => {
            out.push(word.chars().map(String::from).collect());
            out.push(op.other().apply(word).chars().map(String::from).collect());
            out.push(truth[..truth.len() - 1].to_vec());
        }
    }
    let mut seen: Vec<Vec<String>> = Vec::new();
    for cand in out {
        if cand != truth && !cand.is_empty() && !seen.contains(&cand) {
            seen.push(cand);
        }
    }
    seen.iter()
        .map(|ws| ws.iter().map(|w| vocab.expect(w)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn vocab() -> Vocabulary {
        Vocabulary::new(task_words()).unwrap()
    }

    fn resp(v: &Vocabulary, s: &str) -> TokenSequence {
        TokenSequence::response(v.tokenize(s).unwrap()).unwrap()
    }

    fn modular(v: &Vocabulary) -> TaskInstance {
        TaskInstance::from_spec(
            TaskSpec::Modular {
                a: 3,
                op: ArithOp::Add,
                b: 4,
                modulus: 10,
            },
            v,
        )
        .unwrap()
    }

    #[test]
    fn renders_and_verifies_the_worked_example() {
        let v = vocab();
        let tt = TaskTokens::new(&v).unwrap();
        let x = modular(&v);
        assert_eq!(v.render(x.instruction().tokens()), "3 + 4 mod 10 = ?");
        assert_eq!(v.render(x.ground_truth().tokens()), "7 <eos>");
        assert_eq!(verify(&x, &tt, &resp(&v, "7")), Verdict::Correct);
        assert_eq!(verify(&x, &tt, &resp(&v, "8")), Verdict::Incorrect);
        assert_eq!(verify(&x, &tt, &resp(&v, "")), Verdict::Incorrect);
        assert_eq!(verify(&x, &tt, &resp(&v, "``` step step 7 <eos>")), Verdict::Correct);
        assert_eq!(verify(&x, &tt, &resp(&v, "step 7 step <eos>")), Verdict::Incorrect);
        assert_eq!(verify(&x, &tt, &resp(&v, "7 7 <eos>")), Verdict::Incorrect);
    }

    #[test]
    fn parse_round_trips_generated_instructions() {
        let v = vocab();
        let mut rng = stream(3, "task-test", 0);
        for kind in [TaskKind::ModularArithmetic, TaskKind::StringTransform] {
            for _ in 0..200 {
                let x = generate_instruction(kind, *kind.difficulty_range().end(), &v, &mut rng).unwrap();
                let back = TaskInstance::parse(x.instruction(), &v).unwrap();
                assert_eq!(back, x);
            }
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let v = vocab();
        let a = generate_instruction(TaskKind::ModularArithmetic, 9, &v, &mut stream(7, "gen", 0)).unwrap();
        let b = generate_instruction(TaskKind::ModularArithmetic, 9, &v, &mut stream(7, "gen", 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn unsupported_difficulty_is_a_config_error() {
        let v = vocab();
        let mut rng = stream(0, "gen", 0);
        assert!(matches!(
            generate_instruction(TaskKind::StringTransform, 9, &v, &mut rng),
            Err(FcpError::Config(_))
        ));
        assert!(generate_instruction(TaskKind::ModularArithmetic, 0, &v, &mut rng).is_err());
    }

    /// Evaluates the rendered instruction text with plain integer arithmetic,
    /// without touching `TaskSpec`.
    fn independent_answer(text: &str) -> String {
        let w: Vec<&str> = text.split(' ').collect();
        let a: i64 = w[0].parse().unwrap();
        let b: i64 = w[2].parse().unwrap();
        let m: i64 = w[4].parse().unwrap();
        let v = match w[1] {
            "+" => a + b,
            "-" => a - b,
            "*" => a * b,
            _ => unreachable!(),
        };
        (((v % m) + m) % m).to_string()
    }

    #[test]
    fn generated_ground_truth_matches_independent_arithmetic() {
        let v = vocab();
        let tt = TaskTokens::new(&v).unwrap();
        let mut rng = stream(11, "gen", 0);
        for _ in 0..1000 {
            let x = generate_instruction(TaskKind::ModularArithmetic, 9, &v, &mut rng).unwrap();
            let text = v.render(x.instruction().tokens());
            let expected = resp(&v, &format!("{} <eos>", independent_answer(&text)));
            assert_eq!(verify(&x, &tt, &expected), Verdict::Correct, "{text}");
            assert_eq!(verify(&x, &tt, x.ground_truth()), Verdict::Correct);
        }
    }

    #[test]
    fn string_tasks_verify() {
        let v = vocab();
        let tt = TaskTokens::new(&v).unwrap();
        let up = TaskInstance::from_spec(
            TaskSpec::Transform {
                op: StringOp::Upper,
                word: "cat".into(),
            },
            &v,
        )
        .unwrap();
        assert_eq!(v.render(up.instruction().tokens()), "upper c a t ?");
        assert_eq!(verify(&up, &tt, &resp(&v, "C A T <eos>")), Verdict::Correct);
        assert_eq!(verify(&up, &tt, &resp(&v, "c a t <eos>")), Verdict::Incorrect);
        let wrong = wrong_answers(&up, &v).unwrap();
        assert_eq!(wrong.len(), 3);
        assert!(wrong.iter().all(|w| w.as_slice() != up.answer()));
    }

    #[test]
    fn verify_is_pure() {
        let v = vocab();
        let tt = TaskTokens::new(&v).unwrap();
        let x = modular(&v);
        let o = resp(&v, "step 7 <eos>");
        let first = verify(&x, &tt, &o);
        assert!((0..10_000).all(|_| verify(&x, &tt, &o) == first));
    }
}
