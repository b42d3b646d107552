//! Source documents and hypothesis sentences.
//!
//! A [`SourceDocument`] carries its full text plus sentence spans addressed by
//! byte offsets into that text. Offsets always land on UTF-8 character
//! boundaries and each sentence is the exact slice of the document text, so
//! the document can be reconstructed from its sentences and the gap
//! characters between them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One sentence of a document, addressed as `text[start..end]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceSpan {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// A document that hypotheses are corrected against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceDocument {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub sentences: Vec<SentenceSpan>,
}

/// A single model-generated summary sentence to be checked against its document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub id: String,
    pub doc_id: String,
    pub text: String,
}

#[derive(Debug, Error)]
pub enum DocumentError {
    #[error("document {id}: sentence {index} range {start}..{end} is invalid for text of length {len}")]
    InvalidRange {
        id: String,
        index: usize,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("document {id}: sentence {index} does not match the text slice at {start}..{end}")]
    SliceMismatch {
        id: String,
        index: usize,
        start: usize,
        end: usize,
    },
    #[error("document {id}: sentence {index} starts at {start}, before the end of sentence {prev}")]
    Overlap {
        id: String,
        index: usize,
        start: usize,
        prev: usize,
    },
}

impl SourceDocument {
    /// Builds a document from explicit sentence spans, validating the offsets.
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        sentences: Vec<SentenceSpan>,
    ) -> Result<Self, DocumentError> {
        let doc = SourceDocument {
            id: id.into(),
            text: text.into(),
            sentences,
        };
        doc.validate()?;
        Ok(doc)
    }

    /// Builds a document by splitting `text` into sentences at `.`, `!` and `?`
    /// boundaries followed by whitespace. Good enough for fixtures and for
    /// inputs that do not carry their own segmentation.
    pub fn from_text(id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        let sentences = split_sentences(&text)
            .into_iter()
            .map(|(start, end)| SentenceSpan {
                text: text[start..end].to_string(),
                start,
                end,
            })
            .collect();
        SourceDocument {
            id: id.into(),
            text,
            sentences,
        }
    }

    /// Checks the sentence-span invariants: ascending, disjoint, in bounds,
    /// slice-exact.
    pub fn validate(&self) -> Result<(), DocumentError> {
        let mut prev_end = 0usize;
        let mut prev_index = 0usize;
        for (index, s) in self.sentences.iter().enumerate() {
            if s.start >= s.end
                || s.end > self.text.len()
                || !self.text.is_char_boundary(s.start)
                || !self.text.is_char_boundary(s.end)
            {
                return Err(DocumentError::InvalidRange {
                    id: self.id.clone(),
                    index,
                    start: s.start,
                    end: s.end,
                    len: self.text.len(),
                });
            }
            if index > 0 && s.start < prev_end {
                return Err(DocumentError::Overlap {
                    id: self.id.clone(),
                    index,
                    start: s.start,
                    prev: prev_index,
                });
            }
            if &self.text[s.start..s.end] != s.text.as_str() {
                return Err(DocumentError::SliceMismatch {
                    id: self.id.clone(),
                    index,
                    start: s.start,
                    end: s.end,
                });
            }
            prev_end = s.end;
            prev_index = index;
        }
        Ok(())
    }
}

fn split_sentences(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start: Option<usize> = None;
    let mut last_terminator: Option<usize> = None;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if c.is_whitespace() {
            if let Some(term_end) = last_terminator {
                if let Some(s) = start.take() {
                    spans.push((s, term_end));
                }
                last_terminator = None;
            }
            continue;
        }
        if start.is_none() {
            start = Some(i);
        }
        if matches!(c, '.' | '!' | '?') {
            let end = i + c.len_utf8();
            // a terminator only closes the sentence when followed by
            // whitespace or end of text
            match chars.peek() {
                Some((_, next)) if !next.is_whitespace() => last_terminator = None,
                _ => last_terminator = Some(end),
            }
        } else {
            last_terminator = None;
        }
    }
    if let Some(s) = start {
        let end = text.trim_end().len();
        if end > s {
            spans.push((s, end));
        }
    }
    spans
}
