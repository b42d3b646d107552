//! Factual factor extraction.
//!
//! A factual factor is a span of a sentence that states a checkable fact: a
//! named entity or a noun phrase. Factors are addressed by byte offsets into
//! their sentence (always on character boundaries) so that
//! `&sentence[start..end] == surface` holds byte-exactly regardless of any
//! tokenizer downstream.
//!
//! Taggers plug in through [`FactorTagger`]; the crate ships the
//! deterministic [`RuleTagger`] so every pipeline stage can run and be tested
//! without an external NER service.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mask::UNKNOWN_FILL;

/// Subtype of an entity factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EntityKind {
    Person,
    Org,
    Loc,
    Date,
    Number,
    Other,
}

/// Category of a factual factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FactorCategory {
    Entity(EntityKind),
    NounPhrase,
}

/// Coarse class used when selecting which categories a run should touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FactorClass {
    Entity,
    NounPhrase,
}

impl FactorCategory {
    pub fn class(&self) -> FactorClass {
        match self {
            FactorCategory::Entity(_) => FactorClass::Entity,
            FactorCategory::NounPhrase => FactorClass::NounPhrase,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            FactorCategory::Entity(EntityKind::Person) => "PERSON",
            FactorCategory::Entity(EntityKind::Org) => "ORG",
            FactorCategory::Entity(EntityKind::Loc) => "LOC",
            FactorCategory::Entity(EntityKind::Date) => "DATE",
            FactorCategory::Entity(EntityKind::Number) => "NUMBER",
            FactorCategory::Entity(EntityKind::Other) => "OTHER",
            FactorCategory::NounPhrase => "NOUN_PHRASE",
        }
    }

    /// Category compatibility used when retrieving replacement candidates:
    /// equal categories match, `OTHER` matches any entity subtype, and noun
    /// phrases are compatible with anything.
    pub fn compatible_with(&self, other: &FactorCategory) -> bool {
        use FactorCategory::*;
        match (self, other) {
            (NounPhrase, _) | (_, NounPhrase) => true,
            (Entity(a), Entity(b)) => {
                a == b || *a == EntityKind::Other || *b == EntityKind::Other
            }
        }
    }
}

impl std::fmt::Display for FactorCategory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for FactorCategory {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "PERSON" => FactorCategory::Entity(EntityKind::Person),
            "ORG" => FactorCategory::Entity(EntityKind::Org),
            "LOC" => FactorCategory::Entity(EntityKind::Loc),
            "DATE" => FactorCategory::Entity(EntityKind::Date),
            "NUMBER" => FactorCategory::Entity(EntityKind::Number),
            "OTHER" => FactorCategory::Entity(EntityKind::Other),
            "NOUN_PHRASE" => FactorCategory::NounPhrase,
            other => return Err(format!("unknown factor category: {other}")),
        })
    }
}

impl Serialize for FactorCategory {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for FactorCategory {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A typed span of a sentence describing a fact.
///
/// `start`/`end` are byte offsets into the owning sentence; `index` is the
/// factor's ordinal within that sentence in ascending start order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactualFactor {
    pub surface: String,
    pub start: usize,
    pub end: usize,
    pub category: FactorCategory,
    pub index: usize,
}

/// A raw tagger span before validation and indexing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedSpan {
    pub start: usize,
    pub end: usize,
    pub category: FactorCategory,
}

/// Tagger failure diagnostics, surfaced verbatim to the caller.
#[derive(Debug, Error)]
#[error("tagger failure: {0}")]
pub struct TagError(pub String);

/// Contract for factor taggers: sentence in, typed spans out, deterministic
/// per configuration.
pub trait FactorTagger: Send + Sync {
    fn tag(&self, sentence: &str) -> Result<Vec<TaggedSpan>, TagError>;
}

#[derive(Debug, Error)]
pub enum FactorError {
    #[error("cannot extract factors from an empty sentence")]
    EmptySentence,
    #[error("tagger span {start}..{end} is invalid for sentence of length {len}")]
    InvalidSpan { start: usize, end: usize, len: usize },
    #[error(transparent)]
    Tagger(#[from] TagError),
}

/// Extracts factual factors from a single sentence using the given tagger.
///
/// Spans are validated against the sentence, sorted by start (longer span
/// first on equal starts) and indexed `0..K`. Spans whose surface is the
/// reserved `"<unk>"` sentinel are dropped: that string is an output-side
/// marker and never a legal factor.
pub fn extract_factors(
    sentence: &str,
    tagger: &dyn FactorTagger,
) -> Result<Vec<FactualFactor>, FactorError> {
    if sentence.trim().is_empty() {
        return Err(FactorError::EmptySentence);
    }
    let spans = tagger.tag(sentence)?;
    let mut factors = Vec::with_capacity(spans.len());
    for span in spans {
        if span.start >= span.end
            || span.end > sentence.len()
            || !sentence.is_char_boundary(span.start)
            || !sentence.is_char_boundary(span.end)
        {
            return Err(FactorError::InvalidSpan {
                start: span.start,
                end: span.end,
                len: sentence.len(),
            });
        }
        let surface = &sentence[span.start..span.end];
        if surface == UNKNOWN_FILL {
            continue;
        }
        factors.push(FactualFactor {
            surface: surface.to_string(),
            start: span.start,
            end: span.end,
            category: span.category,
            index: 0,
        });
    }
    factors.sort_by(|a, b| a.start.cmp(&b.start).then(b.end.cmp(&a.end)));
    for (i, f) in factors.iter_mut().enumerate() {
        f.index = i;
    }
    Ok(factors)
}

/// Resolves overlapping spans into a disjoint set.
///
/// Priority when two spans overlap: entity beats noun phrase, then the longer
/// span wins, then the smaller start. Surviving factors are re-sorted by
/// start and re-indexed `0..K`.
pub fn resolve_overlaps(factors: &[FactualFactor]) -> Vec<FactualFactor> {
    let mut order: Vec<usize> = (0..factors.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = &factors[a];
        let fb = &factors[b];
        category_rank(&fa.category)
            .cmp(&category_rank(&fb.category))
            .then((fb.end - fb.start).cmp(&(fa.end - fa.start)))
            .then(fa.start.cmp(&fb.start))
    });
    let mut accepted: Vec<FactualFactor> = Vec::new();
    for idx in order {
        let f = &factors[idx];
        let overlaps = accepted
            .iter()
            .any(|kept| f.start < kept.end && kept.start < f.end);
        if !overlaps {
            accepted.push(f.clone());
        }
    }
    accepted.sort_by_key(|f| f.start);
    for (i, f) in accepted.iter_mut().enumerate() {
        f.index = i;
    }
    accepted
}

fn category_rank(category: &FactorCategory) -> u8 {
    match category {
        FactorCategory::Entity(_) => 0,
        FactorCategory::NounPhrase => 1,
    }
}

/// The built-in deterministic tagger. See [`rule_based_tag`].
#[derive(Debug, Default, Clone, Copy)]
pub struct RuleTagger;

impl FactorTagger for RuleTagger {
    fn tag(&self, sentence: &str) -> Result<Vec<TaggedSpan>, TagError> {
        Ok(rule_based_tag(sentence)
            .into_iter()
            .map(|f| TaggedSpan {
                start: f.start,
                end: f.end,
                category: f.category,
            })
            .collect())
    }
}

const MONTHS: [&str; 12] = [
    "january",
    "february",
    "march",
    "april",
    "may",
    "june",
    "july",
    "august",
    "september",
    "october",
    "november",
    "december",
];

struct Token {
    /// core span with leading/trailing punctuation (and a possessive 's)
    /// trimmed off
    core_start: usize,
    core_end: usize,
    has_leading_punct: bool,
    has_trailing_punct: bool,
}

fn scan_tokens(sentence: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut start: Option<usize> = None;
    for (i, c) in sentence.char_indices() {
        if c.is_whitespace() {
            if let Some(s) = start.take() {
                if let Some(tok) = make_token(sentence, s, i) {
                    tokens.push(tok);
                }
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        if let Some(tok) = make_token(sentence, s, sentence.len()) {
            tokens.push(tok);
        }
    }
    tokens
}

fn make_token(sentence: &str, start: usize, end: usize) -> Option<Token> {
    let raw = &sentence[start..end];
    let mut core_start = start;
    for c in raw.chars() {
        if c.is_alphanumeric() {
            break;
        }
        core_start += c.len_utf8();
    }
    let mut core_end = end;
    for c in raw.chars().rev() {
        if c.is_alphanumeric() {
            break;
        }
        core_end -= c.len_utf8();
    }
    if core_start >= core_end {
        return None;
    }
    // strip a possessive suffix so "UK's" tags as "UK"
    let core = &sentence[core_start..core_end];
    for apostrophe in ["'s", "\u{2019}s"] {
        if core.len() > apostrophe.len() && core.ends_with(apostrophe) {
            core_end -= apostrophe.len();
            break;
        }
    }
    Some(Token {
        core_start,
        core_end,
        has_leading_punct: core_start > start,
        has_trailing_punct: core_end < end,
    })
}

fn is_capitalized(core: &str) -> bool {
    core.chars()
        .find(|c| c.is_alphabetic())
        .is_some_and(|c| c.is_uppercase())
}

fn is_numeric(core: &str) -> bool {
    core.chars().next().is_some_and(|c| c.is_ascii_digit())
        && core.chars().last().is_some_and(|c| c.is_ascii_digit())
        && core.chars().all(|c| c.is_ascii_digit() || c == '.' || c == ',')
}

fn is_year(core: &str) -> bool {
    core.len() == 4 && core.chars().all(|c| c.is_ascii_digit())
}

/// Deterministic fallback tagger.
///
/// Emits, as entity candidates:
/// - maximal runs of capitalized tokens (a run at the very start of the
///   sentence needs at least two tokens); runs of two or more become
///   `PERSON`, single tokens `OTHER`; punctuation breaks a run,
/// - numeric tokens, decimals included, as `NUMBER`,
/// - month names and four-digit years as `DATE`.
pub fn rule_based_tag(sentence: &str) -> Vec<FactualFactor> {
    struct Run {
        first_token: usize,
        start: usize,
        end: usize,
        count: usize,
    }
    fn close(run: &mut Option<Run>, factors: &mut Vec<(usize, usize, FactorCategory)>) {
        if let Some(r) = run.take() {
            if r.first_token == 0 && r.count < 2 {
                return;
            }
            let kind = if r.count >= 2 {
                EntityKind::Person
            } else {
                EntityKind::Other
            };
            factors.push((r.start, r.end, FactorCategory::Entity(kind)));
        }
    }

    let tokens = scan_tokens(sentence);
    let mut factors: Vec<(usize, usize, FactorCategory)> = Vec::new();
    let mut run: Option<Run> = None;
    for (ti, tok) in tokens.iter().enumerate() {
        let core = &sentence[tok.core_start..tok.core_end];
        let class = if MONTHS.contains(&core.to_lowercase().as_str()) || is_year(core) {
            Some(FactorCategory::Entity(EntityKind::Date))
        } else if is_numeric(core) {
            Some(FactorCategory::Entity(EntityKind::Number))
        } else {
            None
        };
        if let Some(category) = class {
            close(&mut run, &mut factors);
            factors.push((tok.core_start, tok.core_end, category));
            continue;
        }
        if is_capitalized(core) {
            if tok.has_leading_punct {
                close(&mut run, &mut factors);
            }
            match run {
                Some(ref mut r) => {
                    r.end = tok.core_end;
                    r.count += 1;
                }
                None => {
                    run = Some(Run {
                        first_token: ti,
                        start: tok.core_start,
                        end: tok.core_end,
                        count: 1,
                    });
                }
            }
            if tok.has_trailing_punct {
                close(&mut run, &mut factors);
            }
        } else {
            close(&mut run, &mut factors);
        }
    }
    close(&mut run, &mut factors);

    factors.sort_by_key(|&(start, _, _)| start);
    factors
        .into_iter()
        .enumerate()
        .map(|(index, (start, end, category))| FactualFactor {
            surface: sentence[start..end].to_string(),
            start,
            end,
            category,
            index,
        })
        .collect()
}
