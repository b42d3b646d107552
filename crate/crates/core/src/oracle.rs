//! Document-retrieval oracle backend.
//!
//! A deterministic, model-free backend: for each slot it retrieves the
//! document factor whose surrounding context best matches the slot's
//! template context. Scoring, window size and tie-breaks are fixed:
//!
//! - candidates must be category-compatible with the slot
//!   ([`FactorCategory::compatible_with`]);
//! - score = bigram overlap of the six tokens before the slot against the
//!   six tokens before the candidate, plus the same on the after side;
//! - a candidate already consumed by an earlier slot keeps competing at half
//!   score, so later slots see earlier choices;
//! - ties go to the earliest document position; an all-zero score yields the
//!   reserved `"<unk>"` fill.
//!
//! Every fill other than `"<unk>"` is a verbatim span of the source
//! document.

use std::collections::HashMap;

use crate::backend::{check_request, surfaces_match, BackendCapabilities, BackendError, BackendRequest, ClozeBackend};
use crate::document::SourceDocument;
use crate::factors::{extract_factors, resolve_overlaps, FactorCategory, FactorError, FactorTagger, FactualFactor};
use crate::mask::{align_template, placeholder, split_rendered, CorrectionMode, FillResult, UNKNOWN_FILL};
use crate::rouge::tokenize;

const CONTEXT_WINDOW: usize = 6;
const REUSE_PENALTY: f64 = 0.5;

/// A document factor lifted to document coordinates.
#[derive(Debug, Clone)]
struct Candidate {
    surface: String,
    category: FactorCategory,
    doc_start: usize,
    before: Vec<String>,
    after: Vec<String>,
}

/// Backend that answers cloze requests by retrieving spans from one document.
pub struct OracleBackend {
    candidates: Vec<Candidate>,
}

impl OracleBackend {
    /// Builds the oracle from factors already extracted per sentence;
    /// `doc_factors` pairs each factor with the index of its sentence.
    pub fn new(document: &SourceDocument, doc_factors: &[(usize, FactualFactor)]) -> Self {
        let mut candidates: Vec<Candidate> = doc_factors
            .iter()
            .filter_map(|(sentence_idx, factor)| {
                let sentence = document.sentences.get(*sentence_idx)?;
                let doc_start = sentence.start + factor.start;
                let doc_end = sentence.start + factor.end;
                Some(Candidate {
                    surface: factor.surface.clone(),
                    category: factor.category,
                    doc_start,
                    before: tail_tokens(&document.text[..doc_start]),
                    after: head_tokens(&document.text[doc_end..]),
                })
            })
            .collect();
        candidates.sort_by_key(|c| c.doc_start);
        OracleBackend { candidates }
    }

    /// Extracts and overlap-resolves factors from every sentence of the
    /// document, then builds the oracle over them.
    pub fn from_document(
        document: &SourceDocument,
        tagger: &dyn FactorTagger,
    ) -> Result<Self, FactorError> {
        let mut doc_factors = Vec::new();
        for (idx, sentence) in document.sentences.iter().enumerate() {
            if sentence.text.trim().is_empty() {
                continue;
            }
            let factors = resolve_overlaps(&extract_factors(&sentence.text, tagger)?);
            doc_factors.extend(factors.into_iter().map(|f| (idx, f)));
        }
        Ok(OracleBackend::new(document, &doc_factors))
    }

    fn fill_slots(&self, request: &BackendRequest) -> Result<Vec<String>, BackendError> {
        let template = split_rendered(&request.rendered_input)
            .map(|(_, t)| t.to_string())
            .ok_or_else(|| BackendError::Protocol {
                message: "rendered input has no separator line".into(),
            })?;

        let prefills: HashMap<usize, &str> = request
            .prefilled
            .iter()
            .map(|(slot, fill)| (*slot, fill.as_str()))
            .collect();
        let mut used = vec![false; self.candidates.len()];
        let mut fills = Vec::with_capacity(request.slot_count);

        for slot in 0..request.slot_count {
            if let Some(fill) = prefills.get(&slot) {
                for (i, candidate) in self.candidates.iter().enumerate() {
                    if surfaces_match(&candidate.surface, fill) {
                        used[i] = true;
                    }
                }
                fills.push(fill.to_string());
                continue;
            }
            let (before, after) = slot_context(&template, slot);
            let slot_category = request.slot_categories.get(slot);
            let mut best: Option<(f64, usize)> = None;
            for (i, candidate) in self.candidates.iter().enumerate() {
                if let Some(category) = slot_category {
                    if !category.compatible_with(&candidate.category) {
                        continue;
                    }
                }
                let mut score = (overlap(&before, &candidate.before)
                    + overlap(&after, &candidate.after)) as f64;
                if used[i] {
                    score *= REUSE_PENALTY;
                }
                if score > 0.0 && best.map_or(true, |(s, _)| score > s) {
                    best = Some((score, i));
                }
            }
            match best {
                Some((_, i)) => {
                    used[i] = true;
                    fills.push(self.candidates[i].surface.clone());
                }
                None => fills.push(UNKNOWN_FILL.to_string()),
            }
        }
        Ok(fills)
    }
}

impl ClozeBackend for OracleBackend {
    fn capabilities(&self) -> BackendCapabilities {
        BackendCapabilities {
            supports_concurrent_calls: true,
            supports_prefill: true,
            max_input_chars: usize::MAX,
        }
    }

    fn fill(&self, request: &BackendRequest) -> Result<FillResult, BackendError> {
        check_request(request, &self.capabilities())?;
        let fills = self.fill_slots(request)?;
        Ok(match request.mode {
            CorrectionMode::SlotFill => FillResult {
                raw_output: fills.join("\n"),
                fills,
                mode: CorrectionMode::SlotFill,
                alignment_ok: true,
            },
            CorrectionMode::FullSequence => {
                let template = split_rendered(&request.rendered_input)
                    .map(|(_, t)| t.to_string())
                    .unwrap_or_default();
                let mut regenerated = template.clone();
                for (slot, fill) in fills.iter().enumerate() {
                    regenerated = regenerated.replace(&placeholder(slot), fill);
                }
                align_template(&template, &regenerated)
            }
        })
    }
}

/// Context tokens around one placeholder: up to six on each side, with
/// placeholder-bearing tokens dropped.
fn slot_context(template: &str, slot: usize) -> (Vec<String>, Vec<String>) {
    let ph = placeholder(slot);
    match template.find(&ph) {
        Some(at) => (
            tail_tokens(&template[..at]),
            head_tokens(&template[at + ph.len()..]),
        ),
        None => (Vec::new(), Vec::new()),
    }
}

fn context_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter(|raw| !raw.contains('\u{27E8}'))
        .flat_map(|raw| tokenize(raw))
        .collect()
}

fn tail_tokens(text: &str) -> Vec<String> {
    let mut tokens = context_tokens(text);
    let keep_from = tokens.len().saturating_sub(CONTEXT_WINDOW);
    tokens.split_off(keep_from)
}

fn head_tokens(text: &str) -> Vec<String> {
    let mut tokens = context_tokens(text);
    tokens.truncate(CONTEXT_WINDOW);
    tokens
}

/// Multiset bigram overlap between two token windows.
fn overlap(a: &[String], b: &[String]) -> usize {
    let counts_a = crate::rouge::bigram_counts(a);
    let counts_b = crate::rouge::bigram_counts(b);
    counts_a
        .iter()
        .map(|(bigram, count)| (*count).min(counts_b.get(bigram).copied().unwrap_or(0)))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factors::{rule_based_tag, RuleTagger};
    use crate::mask::{build_masked, render_input};

    pub(crate) fn temperton_document() -> SourceDocument {
        SourceDocument::from_text(
            "doc-temperton",
            "Rod Temperton, one of the UK's most famous songwriters, wrote Thriller and died \
             last week. Temperton died in London last week at the age of 66 after a brief \
             aggressive battle with cancer, Jon Platt of Warner/Chappell music publishing said. \
             Producer and DJ Mark Ronson wrote that Rod Temperton had passed away.",
        )
    }

    pub(crate) const TABLE_HYP: &str =
        "Templeton Templeton, one of the UK's most famous 66, has died at the age of 74.";

    fn table_request(mode: CorrectionMode) -> (BackendRequest, crate::mask::MaskedHypothesis) {
        let doc = temperton_document();
        let factors = rule_based_tag(TABLE_HYP);
        let selection: Vec<usize> = (0..factors.len()).collect();
        let masked = build_masked(TABLE_HYP, &factors, &selection, mode).unwrap();
        let rendered = render_input(&doc, &masked, 10_000);
        let categories = masked.factors.iter().map(|f| f.category).collect();
        let originals = masked.factors.iter().map(|f| f.surface.clone()).collect();
        let request = BackendRequest::new(rendered, masked.factors.len(), mode)
            .with_slot_metadata(categories, originals);
        (request, masked)
    }

    #[test]
    fn age_slot_retrieves_66() {
        let doc = temperton_document();
        let oracle = OracleBackend::from_document(&doc, &RuleTagger).unwrap();
        let (request, _) = table_request(CorrectionMode::SlotFill);
        let result = oracle.fill(&request).unwrap();
        assert_eq!(result.fills.len(), 4);
        assert_eq!(result.fills[3], "66");
        for fill in &result.fills {
            assert_ne!(fill, UNKNOWN_FILL);
            assert!(doc.text.contains(fill.as_str()), "fill {fill:?} not in document");
        }
    }

    #[test]
    fn retrieval_is_deterministic() {
        let doc = temperton_document();
        let oracle = OracleBackend::from_document(&doc, &RuleTagger).unwrap();
        let (request, _) = table_request(CorrectionMode::SlotFill);
        let a = oracle.fill(&request).unwrap();
        let b = oracle.fill(&request).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn person_slot_retrieves_the_lede_name() {
        let doc = temperton_document();
        let oracle = OracleBackend::from_document(&doc, &RuleTagger).unwrap();
        let (request, _) = table_request(CorrectionMode::SlotFill);
        let result = oracle.fill(&request).unwrap();
        assert_eq!(result.fills[0], "Rod Temperton");
        assert_eq!(result.fills[1], "UK");
    }

    #[test]
    fn unrelated_document_yields_all_unknowns() {
        let doc = SourceDocument::from_text(
            "doc-z",
            "Quarterly margins compressed while inventory turnover slowed across every region.",
        );
        let oracle = OracleBackend::from_document(&doc, &RuleTagger).unwrap();
        let factors = rule_based_tag("John Carver has been in a row for Newcastle since 2015.");
        let selection: Vec<usize> = (0..factors.len()).collect();
        let masked = build_masked(
            "John Carver has been in a row for Newcastle since 2015.",
            &factors,
            &selection,
            CorrectionMode::SlotFill,
        )
        .unwrap();
        let rendered = render_input(&doc, &masked, 10_000);
        let request = BackendRequest::new(rendered, masked.factors.len(), CorrectionMode::SlotFill)
            .with_slot_metadata(
                masked.factors.iter().map(|f| f.category).collect(),
                masked.factors.iter().map(|f| f.surface.clone()).collect(),
            );
        let result = oracle.fill(&request).unwrap();
        assert!(result.fills.iter().all(|f| f == UNKNOWN_FILL));
    }

    #[test]
    fn equal_scores_take_earliest_position() {
        // Alderton and Balderton sit in identical contexts and score the
        // same; the earlier document position must win
        let doc = SourceDocument::from_text(
            "doc-dup",
            "They met Alderton at the gala. They met Balderton at the gala.",
        );
        let oracle = OracleBackend::from_document(&doc, &RuleTagger).unwrap();
        assert_eq!(oracle.candidates.len(), 2);
        let hyp = "They met Calderton at the gala.";
        let factors = rule_based_tag(hyp);
        assert_eq!(factors.len(), 1);
        let masked = build_masked(hyp, &factors, &[0], CorrectionMode::SlotFill).unwrap();
        let rendered = render_input(&doc, &masked, 10_000);
        let request = BackendRequest::new(rendered, 1, CorrectionMode::SlotFill)
            .with_slot_metadata(
                masked.factors.iter().map(|f| f.category).collect(),
                masked.factors.iter().map(|f| f.surface.clone()).collect(),
            );
        let result = oracle.fill(&request).unwrap();
        assert_eq!(result.fills, vec!["Alderton"]);
    }

    #[test]
    fn full_sequence_mode_aligns_its_own_substitution() {
        let doc = temperton_document();
        let oracle = OracleBackend::from_document(&doc, &RuleTagger).unwrap();
        let (request, _) = table_request(CorrectionMode::FullSequence);
        let result = oracle.fill(&request).unwrap();
        assert!(result.alignment_ok);
        assert_eq!(result.fills[3], "66");
    }
}
