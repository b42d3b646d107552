//! Masking and fill merging.
//!
//! A hypothesis sentence with factors selected for correction is turned into
//! a template with indexed placeholders `⟨M0⟩..⟨M(K-1)⟩`. Backends answer
//! either one fill per slot or a regenerated sentence; the latter is aligned
//! back onto the template to recover per-slot fills. Substituting each
//! masked factor's surface back into its placeholder reproduces the original
//! sentence byte-exactly, and every merge is built from the recorded factor
//! spans rather than string replacement.
//!
//! The placeholder grammar, the `⟨SEP⟩` delimiter line and the reserved
//! `"<unk>"` fill are part of the backend wire contract and must be matched
//! byte-exactly by adapters.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::document::SourceDocument;
use crate::factors::FactualFactor;

/// Reserved fill marking a factor the backend could not ground in the
/// document. Never a legal extracted factor surface.
pub const UNKNOWN_FILL: &str = "<unk>";

/// Reserved delimiter line between document and template in rendered input.
pub const SEPARATOR: &str = "\u{27E8}SEP\u{27E9}";

/// The placeholder for slot `k`: `⟨Mk⟩`, decimal index, no padding.
pub fn placeholder(slot: usize) -> String {
    format!("\u{27E8}M{slot}\u{27E9}")
}

/// How the backend produces its answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CorrectionMode {
    /// The backend regenerates the whole sentence; fills are recovered by
    /// alignment.
    FullSequence,
    /// The backend emits one answer per placeholder.
    SlotFill,
}

impl std::fmt::Display for CorrectionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CorrectionMode::FullSequence => f.write_str("FULL_SEQUENCE"),
            CorrectionMode::SlotFill => f.write_str("SLOT_FILL"),
        }
    }
}

impl std::str::FromStr for CorrectionMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "FULL_SEQUENCE" => Ok(CorrectionMode::FullSequence),
            "SLOT_FILL" => Ok(CorrectionMode::SlotFill),
            other => Err(format!("unknown correction mode: {other}")),
        }
    }
}

/// A hypothesis with selected factors replaced by placeholders.
///
/// `factors` holds exactly the masked factors in ascending span order; the
/// placeholder index is the position in this list, while each factor keeps
/// its original sentence ordinal in `index`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedHypothesis {
    pub original: String,
    pub factors: Vec<FactualFactor>,
    pub template: String,
    pub mode_hint: CorrectionMode,
}

/// Ordered fills produced by a backend for one request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FillResult {
    pub fills: Vec<String>,
    pub raw_output: String,
    pub mode: CorrectionMode,
    pub alignment_ok: bool,
}

/// One slot's outcome after merging fills back into the sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorChange {
    /// The factor's ordinal within its sentence.
    pub index: usize,
    pub old: String,
    pub new: String,
    pub changed: bool,
}

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("factor {index} ({start}..{end}) overlaps or is out of order")]
    OverlappingFactors {
        index: usize,
        start: usize,
        end: usize,
    },
    #[error("factor {index} does not slice its sentence exactly (expected {expected:?})")]
    SpanMismatch { index: usize, expected: String },
    #[error("selection index {index} out of range for {count} factors")]
    SelectionOutOfRange { index: usize, count: usize },
    #[error("fill count mismatch: expected {expected}, got {actual}")]
    FillCountMismatch { expected: usize, actual: usize },
    #[error("cannot merge fills from an unaligned result")]
    Unaligned,
}

/// Normalizes for loose comparison: lowercase, collapse whitespace runs.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(|t| t.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

/// True when two surfaces are equal after normalization.
pub fn normalized_eq(a: &str, b: &str) -> bool {
    normalize(a) == normalize(b)
}

fn check_factors(sentence: &str, factors: &[FactualFactor]) -> Result<(), MaskError> {
    let mut prev_end = 0usize;
    for (i, f) in factors.iter().enumerate() {
        if f.start < prev_end || f.start >= f.end || f.end > sentence.len() {
            return Err(MaskError::OverlappingFactors {
                index: i,
                start: f.start,
                end: f.end,
            });
        }
        if !sentence.is_char_boundary(f.start)
            || !sentence.is_char_boundary(f.end)
            || &sentence[f.start..f.end] != f.surface
        {
            return Err(MaskError::SpanMismatch {
                index: i,
                expected: sentence
                    .get(f.start..f.end)
                    .unwrap_or_default()
                    .to_string(),
            });
        }
        prev_end = f.end;
    }
    Ok(())
}

/// Builds the masked hypothesis: factors named by `selection` become
/// placeholders, everything else stays literal text.
pub fn build_masked(
    sentence: &str,
    factors: &[FactualFactor],
    selection: &[usize],
    mode: CorrectionMode,
) -> Result<MaskedHypothesis, MaskError> {
    check_factors(sentence, factors)?;
    let mut picked: Vec<usize> = selection.to_vec();
    picked.sort_unstable();
    picked.dedup();
    if let Some(&bad) = picked.iter().find(|&&i| i >= factors.len()) {
        return Err(MaskError::SelectionOutOfRange {
            index: bad,
            count: factors.len(),
        });
    }

    let mut template = String::with_capacity(sentence.len());
    let mut masked = Vec::with_capacity(picked.len());
    let mut cursor = 0usize;
    for (slot, &fi) in picked.iter().enumerate() {
        let factor = &factors[fi];
        template.push_str(&sentence[cursor..factor.start]);
        template.push_str(&placeholder(slot));
        cursor = factor.end;
        masked.push(factor.clone());
    }
    template.push_str(&sentence[cursor..]);

    Ok(MaskedHypothesis {
        original: sentence.to_string(),
        factors: masked,
        template,
        mode_hint: mode,
    })
}

/// Renders backend input: the document (truncated at a word boundary to at
/// most `max_doc_chars` characters), the separator line, then the template.
/// The template is never truncated or mutated.
pub fn render_input(
    document: &SourceDocument,
    masked: &MaskedHypothesis,
    max_doc_chars: usize,
) -> String {
    let doc = truncate_words(&document.text, max_doc_chars);
    if doc.is_empty() {
        format!("{SEPARATOR}\n{}", masked.template)
    } else {
        format!("{doc}\n{SEPARATOR}\n{}", masked.template)
    }
}

fn truncate_words(text: &str, max_chars: usize) -> &str {
    let mut boundary = None;
    for (count, (byte, _)) in text.char_indices().enumerate() {
        if count == max_chars {
            boundary = Some(byte);
            break;
        }
    }
    let Some(byte) = boundary else {
        return text;
    };
    // back off to the last whitespace so no word is cut in half
    let prefix = &text[..byte];
    if text[byte..].starts_with(|c: char| c.is_whitespace()) {
        return prefix.trim_end();
    }
    match prefix.rfind(|c: char| c.is_whitespace()) {
        Some(ws) => prefix[..ws].trim_end(),
        None => "",
    }
}

/// Splits rendered input back into its document and template parts at the
/// first line equal to [`SEPARATOR`]. Used by backends that only receive the
/// rendered string.
pub fn split_rendered(rendered: &str) -> Option<(&str, &str)> {
    let mut offset = 0usize;
    for line in rendered.split('\n') {
        if line == SEPARATOR {
            let doc_end = offset.saturating_sub(1);
            let template_start = offset + line.len() + 1;
            let doc = &rendered[..doc_end.min(rendered.len())];
            let template = rendered.get(template_start..).unwrap_or("");
            return Some((doc, template));
        }
        offset += line.len() + 1;
    }
    None
}

/// Merges fills into the masked hypothesis, producing the corrected sentence
/// and a per-slot change record. Changed-ness uses normalized comparison.
pub fn merge_fills(
    masked: &MaskedHypothesis,
    fills: &FillResult,
) -> Result<(String, Vec<FactorChange>), MaskError> {
    if !fills.alignment_ok {
        return Err(MaskError::Unaligned);
    }
    if fills.fills.len() != masked.factors.len() {
        return Err(MaskError::FillCountMismatch {
            expected: masked.factors.len(),
            actual: fills.fills.len(),
        });
    }
    let mut corrected = String::with_capacity(masked.original.len());
    let mut changes = Vec::with_capacity(masked.factors.len());
    let mut cursor = 0usize;
    for (factor, fill) in masked.factors.iter().zip(&fills.fills) {
        corrected.push_str(&masked.original[cursor..factor.start]);
        corrected.push_str(fill);
        cursor = factor.end;
        changes.push(FactorChange {
            index: factor.index,
            old: factor.surface.clone(),
            new: fill.clone(),
            changed: !normalized_eq(&factor.surface, fill),
        });
    }
    corrected.push_str(&masked.original[cursor..]);
    Ok((corrected, changes))
}

/// Recovers per-slot fills from a regenerated sentence by matching the
/// template's context segments left-to-right.
///
/// Matching is case-insensitive and whitespace-normalized. An empty segment
/// matches at the current cursor, except a trailing empty segment which
/// matches at the end of the regenerated text. If any non-empty segment
/// fails to match in order the result carries `alignment_ok == false` with
/// the raw output preserved; that is a data state, not an error.
pub fn align_full_sequence(masked: &MaskedHypothesis, regenerated: &str) -> FillResult {
    align_template(&masked.template, regenerated)
}

/// Template-level alignment; see [`align_full_sequence`].
pub fn align_template(template: &str, regenerated: &str) -> FillResult {
    let segments = template_segments(template);
    let slots = segments.len().saturating_sub(1);
    let failed = || FillResult {
        fills: Vec::new(),
        raw_output: regenerated.to_string(),
        mode: CorrectionMode::FullSequence,
        alignment_ok: false,
    };
    if slots == 0 {
        return FillResult {
            fills: Vec::new(),
            raw_output: regenerated.to_string(),
            mode: CorrectionMode::FullSequence,
            alignment_ok: true,
        };
    }

    let hay = NormalizedText::new(regenerated);
    let mut cursor = 0usize; // position in normalized haystack
    let mut bounds = Vec::with_capacity(segments.len()); // (norm start, norm end) per segment
    for (i, segment) in segments.iter().enumerate() {
        let needle = normalize_preserving_edges(segment);
        if needle.is_empty() {
            let at = if i + 1 == segments.len() {
                hay.norm.len()
            } else {
                cursor
            };
            bounds.push((at, at));
            cursor = at;
            continue;
        }
        match hay.norm[cursor..].find(&needle) {
            Some(rel) => {
                let start = cursor + rel;
                let end = start + needle.len();
                bounds.push((start, end));
                cursor = end;
            }
            None => return failed(),
        }
    }

    let mut fills = Vec::with_capacity(slots);
    for w in bounds.windows(2) {
        let from = hay.src_pos(w[0].1);
        let to = hay.src_pos(w[1].0);
        let fill = regenerated.get(from..to).unwrap_or("").trim();
        fills.push(fill.to_string());
    }
    FillResult {
        fills,
        raw_output: regenerated.to_string(),
        mode: CorrectionMode::FullSequence,
        alignment_ok: true,
    }
}

/// Splits a template at its placeholders into K+1 context segments.
fn template_segments(template: &str) -> Vec<String> {
    let mut segments = Vec::new();
    let mut rest = template;
    let mut slot = 0usize;
    loop {
        let ph = placeholder(slot);
        match rest.find(&ph) {
            Some(at) => {
                segments.push(rest[..at].to_string());
                rest = &rest[at + ph.len()..];
                slot += 1;
            }
            None => {
                segments.push(rest.to_string());
                return segments;
            }
        }
    }
}

/// Counts the placeholders present in a template, in index order.
pub fn placeholder_count(template: &str) -> usize {
    template_segments(template).len() - 1
}

/// Lowercased text with whitespace runs collapsed to single spaces, plus a
/// map from each normalized character back to its source byte range.
struct NormalizedText {
    norm: String,
    starts: Vec<usize>,
    src_len: usize,
}

impl NormalizedText {
    fn new(src: &str) -> Self {
        let mut norm = String::with_capacity(src.len());
        let mut starts = Vec::with_capacity(src.len());
        let mut pending_ws: Option<usize> = None;
        for (byte, c) in src.char_indices() {
            if c.is_whitespace() {
                if pending_ws.is_none() {
                    pending_ws = Some(byte);
                }
                continue;
            }
            if let Some(ws_start) = pending_ws.take() {
                if !norm.is_empty() {
                    norm.push(' ');
                    starts.push(ws_start);
                }
            }
            for lc in c.to_lowercase() {
                norm.push(lc);
                starts.push(byte);
            }
        }
        NormalizedText {
            norm,
            starts,
            src_len: src.len(),
        }
    }

    /// Source byte offset for a normalized byte position.
    fn src_pos(&self, norm_byte: usize) -> usize {
        // starts is indexed per normalized char; convert byte pos to char idx
        if norm_byte >= self.norm.len() {
            return self.src_len;
        }
        let char_idx = self.norm[..norm_byte].chars().count();
        self.starts.get(char_idx).copied().unwrap_or(self.src_len)
    }
}

/// Segment normalization: lowercase, collapse internal whitespace, keep a
/// single leading/trailing space when the segment had boundary whitespace.
fn normalize_preserving_edges(segment: &str) -> String {
    if segment.trim().is_empty() {
        return if segment.is_empty() {
            String::new()
        } else {
            " ".to_string()
        };
    }
    let leading = segment.starts_with(|c: char| c.is_whitespace());
    let trailing = segment.ends_with(|c: char| c.is_whitespace());
    let mut out = String::with_capacity(segment.len() + 2);
    if leading {
        out.push(' ');
    }
    out.push_str(&normalize(segment));
    if trailing {
        out.push(' ');
    }
    out
}
