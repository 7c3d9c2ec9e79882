//! Rule-based feedback templates and their static checks.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dataset::Style;
use crate::error::{FcpError, Result};
use crate::vocab::SPECIALS;

/// Minimum number of templates in every (polarity, style) cell.
pub const MIN_TEMPLATES_PER_CELL: usize = 4;
pub const DEFAULT_GRAMMAR: &str = include_str!("default_grammar.toml");
const LENGTH_SLOT: &str = "{length}";
const LENGTH_AXIS: &str = "length";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    FullyPositive,
    FullyNegative,
    Neutral,
    HasCode,
}

impl Polarity {
    pub const ALL: [Polarity; 4] = [
        Polarity::FullyPositive,
        Polarity::FullyNegative,
        Polarity::Neutral,
        Polarity::HasCode,
    ];

    pub fn base_score(self) -> f64 {
        match self {
            Polarity::FullyPositive => 0.9,
            Polarity::Neutral => 0.6,
            Polarity::HasCode => 0.7,
            Polarity::FullyNegative => 0.1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::FullyPositive => "fully_positive",
            Polarity::FullyNegative => "fully_negative",
            Polarity::Neutral => "neutral",
            Polarity::HasCode => "has_code",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthBucket {
    Short,
    Medium,
    Long,
}

impl LengthBucket {
    pub const ALL: [LengthBucket; 3] = [LengthBucket::Short, LengthBucket::Medium, LengthBucket::Long];

    /// At most one filler is short, two or three medium, four or more long.
    pub fn from_fillers(n: usize) -> Self {
        match n {
            0 | 1 => LengthBucket::Short,
            2 | 3 => LengthBucket::Medium,
            _ => LengthBucket::Long,
        }
    }

    pub fn score_adjustment(self) -> f64 {
        match self {
            LengthBucket::Short => -0.05,
            LengthBucket::Medium => 0.0,
            LengthBucket::Long => 0.05,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ResponseAttributes {
    pub correct: bool,
    pub length_bucket: LengthBucket,
    pub has_marker: bool,
    pub coherent: bool,
}

impl ResponseAttributes {
    /// Every attribute combination a response can realize (correct implies coherent).
    pub fn all() -> Vec<ResponseAttributes> {
        let mut out = Vec::new();
        for correct in [false, true] {
            for coherent in [false, true] {
                if correct && !coherent {
                    continue;
                }
                for length_bucket in LengthBucket::ALL {
                    for has_marker in [false, true] {
                        out.push(ResponseAttributes {
                            correct,
                            length_bucket,
                            has_marker,
                            coherent,
                        });
                    }
                }
            }
        }
        out
    }

    /// Same response with correctness flipped; a response made correct is coherent.
    pub fn flipped(self) -> Self {
        ResponseAttributes {
            correct: !self.correct,
            coherent: self.coherent || !self.correct,
            ..self
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Requirements {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coherent: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub marker: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length: Option<Vec<LengthBucket>>,
}

impl Requirements {
    pub fn matches(&self, a: &ResponseAttributes) -> bool {
        self.correct.is_none_or(|v| v == a.correct)
            && self.coherent.is_none_or(|v| v == a.coherent)
            && self.marker.is_none_or(|v| v == a.has_marker)
            && self.length.as_ref().is_none_or(|l| l.contains(&a.length_bucket))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthWords {
    pub short: String,
    pub medium: String,
    pub long: String,
}

impl LengthWords {
    pub fn word(&self, b: LengthBucket) -> &str {
        match b {
            LengthBucket::Short => &self.short,
            LengthBucket::Medium => &self.medium,
            LengthBucket::Long => &self.long,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Slots {
    length: LengthWords,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateSpec {
    polarity: Polarity,
    style: Style,
    #[serde(default)]
    requires: Requirements,
    text: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GrammarFile {
    slots: Slots,
    axes: BTreeMap<String, Vec<String>>,
    #[serde(rename = "template")]
    templates: Vec<TemplateSpec>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Piece {
    Word(String),
    LengthSlot,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Template {
    pub id: usize,
    pub polarity: Polarity,
    pub style: Style,
    pub requires: Requirements,
    pub pattern: Vec<Piece>,
}

impl Template {
    pub fn has_slot(&self) -> bool {
        self.pattern.contains(&Piece::LengthSlot)
    }

    pub fn render(&self, slots: &LengthWords, bucket: LengthBucket) -> Vec<String> {
        self.pattern
            .iter()
            .map(|p| match p {
                Piece::Word(w) => w.clone(),
                Piece::LengthSlot => slots.word(bucket).to_string(),
            })
            .collect()
    }

    /// Buckets that give distinct renders: all three when slotted, otherwise one.
    pub fn render_buckets(&self) -> &'static [LengthBucket] {
        if self.has_slot() {
            &LengthBucket::ALL
        } else {
            &[LengthBucket::Medium]
        }
    }
}

#[derive(Clone, Debug)]
pub struct Grammar {
    slots: LengthWords,
    axes: BTreeMap<String, BTreeSet<String>>,
    templates: Vec<Template>,
}

impl Default for Grammar {
    fn default() -> Self {
        Grammar::from_toml(DEFAULT_GRAMMAR).expect("embedded grammar is valid")
    }
}

impl Grammar {
    pub fn from_toml(text: &str) -> Result<Self> {
        let file: GrammarFile =
            toml::from_str(text).map_err(|e| FcpError::Config(format!("template grammar: {e}")))?;
        let templates = file
            .templates
            .into_iter()
            .enumerate()
            .map(|(id, t)| {
                let pattern = t
                    .text
                    .split_whitespace()
                    .map(|w| match w {
                        LENGTH_SLOT => Ok(Piece::LengthSlot),
                        w if w.starts_with('{') => {
                            Err(FcpError::Config(format!("template {id}: unknown slot {w}")))
                        }
                        w => Ok(Piece::Word(w.to_string())),
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Template {
                    id,
                    polarity: t.polarity,
                    style: t.style,
                    requires: t.requires,
                    pattern,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let grammar = Grammar {
            slots: file.slots.length,
            axes: file
                .axes
                .into_iter()
                .map(|(k, v)| (k, v.into_iter().collect()))
                .collect(),
            templates,
        };
        grammar.validate()?;
        Ok(grammar)
    }

    pub fn templates(&self) -> &[Template] {
        &self.templates
    }

    pub fn slots(&self) -> &LengthWords {
        &self.slots
    }

    /// Every word a render can produce.
    pub fn words(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for t in &self.templates {
            for b in t.render_buckets() {
                out.extend(t.render(&self.slots, *b));
            }
        }
        out
    }

    pub fn matching(&self, attrs: &ResponseAttributes, style: Style) -> Vec<&Template> {
        self.templates
            .iter()
            .filter(|t| t.style == style && t.requires.matches(attrs))
            .collect()
    }

    /// Attribute axes a template mentions. The length slot counts as the length axis.
    pub fn axes_of(&self, t: &Template) -> BTreeSet<&str> {
        let mut out = BTreeSet::new();
        for p in &t.pattern {
            match p {
                Piece::LengthSlot => {
                    out.insert(LENGTH_AXIS);
                }
                Piece::Word(w) => {
                    for (axis, words) in &self.axes {
                        if words.contains(w) {
                            out.insert(axis.as_str());
                        }
                    }
                }
            }
        }
        out
    }

    /// Fixed exemplar of a polarity: its first unslotted template in the style.
    pub fn representative(&self, polarity: Polarity, style: Style) -> Option<&Template> {
        let mut cell = self
            .templates
            .iter()
            .filter(|t| t.polarity == polarity && t.style == style);
        let first = cell.clone().next();
        cell.find(|t| !t.has_slot()).or(first)
    }

    fn validate(&self) -> Result<()> {
        let err = |m: String| Err(FcpError::Config(format!("template grammar: {m}")));
        for style in [Style::User, Style::Reviewer] {
            for polarity in Polarity::ALL {
                let n = self
                    .templates
                    .iter()
                    .filter(|t| t.polarity == polarity && t.style == style)
                    .count();
                if n < MIN_TEMPLATES_PER_CELL {
                    return err(format!(
                        "{} {} has {n} templates, need at least {MIN_TEMPLATES_PER_CELL}",
                        style.as_str(),
                        polarity.as_str()
                    ));
                }
            }
            for attrs in ResponseAttributes::all() {
                if self.matching(&attrs, style).is_empty() {
                    return err(format!("no {} template covers {attrs:?}", style.as_str()));
                }
            }
        }
        for w in [&self.slots.short, &self.slots.medium, &self.slots.long] {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return err(format!("length slot word {w:?} must be a single word"));
            }
        }
        let mut seen: BTreeMap<Vec<String>, usize> = BTreeMap::new();
        for t in &self.templates {
            if t.pattern.is_empty() {
                return err(format!("template {} renders empty", t.id));
            }
            for b in t.render_buckets() {
                let words = t.render(&self.slots, *b);
                if let Some(w) = words.iter().find(|w| SPECIALS.contains(&w.as_str())) {
                    return err(format!("template {} uses reserved word {w}", t.id));
                }
                if let Some(other) = seen.insert(words, t.id) {
                    if other != t.id {
                        return err(format!("templates {other} and {} render identically", t.id));
                    }
                }
            }
            let axes = self.axes_of(t).len();
            let ok = match t.style {
                Style::User => axes <= 1,
                Style::Reviewer => axes >= 2,
            };
            if !ok {
                return err(format!(
                    "{} template {} mentions {axes} attribute axes",
                    t.style.as_str(),
                    t.id
                ));
            }
        }
        Ok(())
    }
}
