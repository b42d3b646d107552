//! End-to-end correction of one hypothesis against its document.
//!
//! The flow: extract factors, resolve overlaps, optionally self-diagnose to
//! find the factors worth correcting, mask exactly those, render, fill
//! through the backend in one joint call, merge, then check for alerts.
//!
//! Self-diagnosis probes each factor independently: only that factor is
//! masked, the backend answers the single slot, and the factor is kept for
//! correction iff the answer differs from the original surface under
//! normalized comparison. An empty kept set short-circuits the joint pass.
//! Probes and the joint pass use the same request shape, differing only in
//! slot count.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, BackendRequest, ClozeBackend};
use crate::document::{Hypothesis, SourceDocument};
use crate::factors::{
    extract_factors, resolve_overlaps, FactorClass, FactorError, FactorTagger, FactualFactor,
};
use crate::mask::{
    build_masked, merge_fills, normalized_eq, render_input, CorrectionMode, FactorChange,
    FillResult, MaskError, UNKNOWN_FILL,
};

/// Knobs for one correction run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionOptions {
    pub mode: CorrectionMode,
    pub self_diagnosis: bool,
    /// Treat a full-sequence output that cannot be aligned as an alert.
    /// Off by default: full-sequence backends legitimately rewrite.
    pub alert_on_alignment_failure: bool,
    pub max_doc_chars: usize,
    /// Which factor classes are candidates for correction.
    pub factor_categories: BTreeSet<FactorClass>,
}

impl Default for CorrectionOptions {
    fn default() -> Self {
        CorrectionOptions {
            mode: CorrectionMode::SlotFill,
            self_diagnosis: false,
            alert_on_alignment_failure: false,
            max_doc_chars: 4000,
            factor_categories: BTreeSet::from([FactorClass::Entity, FactorClass::NounPhrase]),
        }
    }
}

impl CorrectionOptions {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.max_doc_chars == 0 {
            return Err(PipelineError::InvalidOptions(
                "max_doc_chars must be positive".into(),
            ));
        }
        if self.factor_categories.is_empty() {
            return Err(PipelineError::InvalidOptions(
                "factor_categories must not be empty".into(),
            ));
        }
        Ok(())
    }
}

/// Why a correction raised an alert.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum AlertReason {
    None,
    UnkFill,
    AlignmentFailure,
}

/// Which factors survived self-diagnosis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DiagnosisSet {
    /// Self-diagnosis disabled: every factor was in scope.
    All(AllMarker),
    Kept(Vec<usize>),
}

/// Serialized form of [`DiagnosisSet::All`], the string `"all"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AllMarker {
    #[serde(rename = "all")]
    All,
}

impl DiagnosisSet {
    pub fn all() -> Self {
        DiagnosisSet::All(AllMarker::All)
    }
}

/// Outcome of correcting one hypothesis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionResult {
    pub corrected: String,
    pub changes: Vec<FactorChange>,
    pub diagnosis_kept: DiagnosisSet,
    pub alert: bool,
    pub alert_reason: AlertReason,
    pub raw_backend_output: String,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid correction options: {0}")]
    InvalidOptions(String),
    #[error("hypothesis {hypothesis_id} references document {expected}, got {actual}")]
    DocumentMismatch {
        hypothesis_id: String,
        expected: String,
        actual: String,
    },
    #[error("factor extraction failed for hypothesis {hypothesis_id}: {source}")]
    Extraction {
        hypothesis_id: String,
        #[source]
        source: FactorError,
    },
    #[error("backend failed for document {doc_id}, hypothesis {hypothesis_id}: {source}")]
    Backend {
        doc_id: String,
        hypothesis_id: String,
        #[source]
        source: BackendError,
    },
    #[error(
        "diagnosis probe for factor {factor_index} failed (document {doc_id}, hypothesis {hypothesis_id}): {source}"
    )]
    Probe {
        doc_id: String,
        hypothesis_id: String,
        factor_index: usize,
        #[source]
        source: BackendError,
    },
    #[error("merge failed for document {doc_id}, hypothesis {hypothesis_id}: {source}")]
    Merge {
        doc_id: String,
        hypothesis_id: String,
        #[source]
        source: MaskError,
    },
}

/// Alert detection over a fill result and the merged output: any reserved
/// `"<unk>"` fill, or `"<unk>"` anywhere in the corrected text, raises
/// `UNK_FILL`; an unaligned full-sequence result raises `ALIGNMENT_FAILURE`
/// when the options say so. Unknown fills take precedence.
pub fn detect_alert(
    fill: &FillResult,
    corrected: &str,
    options: &CorrectionOptions,
) -> (bool, AlertReason) {
    if fill.fills.iter().any(|f| f == UNKNOWN_FILL) || corrected.contains(UNKNOWN_FILL) {
        return (true, AlertReason::UnkFill);
    }
    if !fill.alignment_ok && options.alert_on_alignment_failure {
        return (true, AlertReason::AlignmentFailure);
    }
    (false, AlertReason::None)
}

fn request_for(
    document: &SourceDocument,
    masked: &crate::mask::MaskedHypothesis,
    options: &CorrectionOptions,
) -> BackendRequest {
    let rendered = render_input(document, masked, options.max_doc_chars);
    BackendRequest::new(rendered, masked.factors.len(), options.mode).with_slot_metadata(
        masked.factors.iter().map(|f| f.category).collect(),
        masked.factors.iter().map(|f| f.surface.clone()).collect(),
    )
}

/// Probes every factor independently and returns the indices whose cloze
/// answer differs from the original surface.
pub fn self_diagnose(
    document: &SourceDocument,
    hypothesis: &Hypothesis,
    factors: &[FactualFactor],
    backend: &dyn ClozeBackend,
    options: &CorrectionOptions,
) -> Result<Vec<usize>, PipelineError> {
    let mut kept = Vec::new();
    for (i, factor) in factors.iter().enumerate() {
        let masked = build_masked(&hypothesis.text, factors, &[i], options.mode).map_err(|e| {
            PipelineError::Merge {
                doc_id: document.id.clone(),
                hypothesis_id: hypothesis.id.clone(),
                source: e,
            }
        })?;
        let request = request_for(document, &masked, options);
        let answer = backend
            .fill(&request)
            .map_err(|source| PipelineError::Probe {
                doc_id: document.id.clone(),
                hypothesis_id: hypothesis.id.clone(),
                factor_index: i,
                source,
            })?;
        // an unalignable probe answer counts as disagreement: the backend
        // wants to say something else here
        let differs = match answer.fills.first() {
            Some(fill) if answer.alignment_ok => !normalized_eq(fill, &factor.surface),
            _ => true,
        };
        if differs {
            kept.push(i);
        }
    }
    Ok(kept)
}

/// Corrects one hypothesis against its document.
pub fn correct(
    document: &SourceDocument,
    hypothesis: &Hypothesis,
    tagger: &dyn FactorTagger,
    backend: &dyn ClozeBackend,
    options: &CorrectionOptions,
) -> Result<CorrectionResult, PipelineError> {
    options.validate()?;
    if hypothesis.doc_id != document.id {
        return Err(PipelineError::DocumentMismatch {
            hypothesis_id: hypothesis.id.clone(),
            expected: hypothesis.doc_id.clone(),
            actual: document.id.clone(),
        });
    }

    let extracted =
        extract_factors(&hypothesis.text, tagger).map_err(|source| PipelineError::Extraction {
            hypothesis_id: hypothesis.id.clone(),
            source,
        })?;
    let mut factors: Vec<FactualFactor> = resolve_overlaps(&extracted)
        .into_iter()
        .filter(|f| options.factor_categories.contains(&f.category.class()))
        .collect();
    for (i, f) in factors.iter_mut().enumerate() {
        f.index = i;
    }

    if factors.is_empty() {
        // nothing to correct and no backend call; pre-existing sentinels in
        // the input still flag
        let alert = hypothesis.text.contains(UNKNOWN_FILL);
        return Ok(CorrectionResult {
            corrected: hypothesis.text.clone(),
            changes: Vec::new(),
            diagnosis_kept: DiagnosisSet::all(),
            alert,
            alert_reason: if alert {
                AlertReason::UnkFill
            } else {
                AlertReason::None
            },
            raw_backend_output: String::new(),
        });
    }

    let (selection, diagnosis_kept) = if options.self_diagnosis {
        let kept = self_diagnose(document, hypothesis, &factors, backend, options)?;
        (kept.clone(), DiagnosisSet::Kept(kept))
    } else {
        ((0..factors.len()).collect(), DiagnosisSet::all())
    };

    if selection.is_empty() {
        let alert = hypothesis.text.contains(UNKNOWN_FILL);
        return Ok(CorrectionResult {
            corrected: hypothesis.text.clone(),
            changes: Vec::new(),
            diagnosis_kept,
            alert,
            alert_reason: if alert {
                AlertReason::UnkFill
            } else {
                AlertReason::None
            },
            raw_backend_output: String::new(),
        });
    }

    let masked = build_masked(&hypothesis.text, &factors, &selection, options.mode).map_err(
        |source| PipelineError::Merge {
            doc_id: document.id.clone(),
            hypothesis_id: hypothesis.id.clone(),
            source,
        },
    )?;
    let request = request_for(document, &masked, options);
    let fill = backend
        .fill(&request)
        .map_err(|source| PipelineError::Backend {
            doc_id: document.id.clone(),
            hypothesis_id: hypothesis.id.clone(),
            source,
        })?;

    let (corrected, changes) = if fill.alignment_ok {
        merge_fills(&masked, &fill).map_err(|source| PipelineError::Merge {
            doc_id: document.id.clone(),
            hypothesis_id: hypothesis.id.clone(),
            source,
        })?
    } else {
        // the backend rewrote the sentence; take the rewrite verbatim, with
        // no per-factor attribution
        (fill.raw_output.clone(), Vec::new())
    };

    let (alert, alert_reason) = detect_alert(&fill, &corrected, options);
    Ok(CorrectionResult {
        corrected,
        changes,
        diagnosis_kept,
        alert,
        alert_reason,
        raw_backend_output: fill.raw_output,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{IdentityBackend, ScriptedBackend, ScriptedResponse};
    use crate::factors::RuleTagger;
    use std::collections::HashMap;

    fn doc_and_hyp(doc_text: &str, hyp_text: &str) -> (SourceDocument, Hypothesis) {
        let document = SourceDocument::from_text("d1", doc_text);
        let hypothesis = Hypothesis {
            id: "h1".into(),
            doc_id: "d1".into(),
            text: hyp_text.into(),
        };
        (document, hypothesis)
    }

    #[test]
    fn identity_backend_is_a_fixpoint() {
        let (document, hypothesis) = doc_and_hyp(
            "Rod Temperton wrote songs. He died at 66.",
            "Rod Temperton has died at the age of 66.",
        );
        let result = correct(
            &document,
            &hypothesis,
            &RuleTagger,
            &IdentityBackend,
            &CorrectionOptions::default(),
        )
        .unwrap();
        assert_eq!(result.corrected, hypothesis.text);
        assert!(!result.alert);
        assert!(result.changes.iter().all(|c| !c.changed));
    }

    #[test]
    fn zero_factors_short_circuits() {
        let (document, hypothesis) =
            doc_and_hyp("Nothing in particular.", "it rained all day and night");
        let backend = ScriptedBackend::with_responses(vec![]);
        let result = correct(
            &document,
            &hypothesis,
            &RuleTagger,
            &backend,
            &CorrectionOptions::default(),
        )
        .unwrap();
        assert_eq!(result.corrected, hypothesis.text);
        assert!(!result.alert);
        assert_eq!(backend.call_count(), 0);
    }

    #[test]
    fn self_diagnosis_with_identity_keeps_nothing() {
        let (document, hypothesis) = doc_and_hyp(
            "Rod Temperton wrote songs. He died at 66.",
            "Rod Temperton has died at the age of 66.",
        );
        let factors = crate::factors::rule_based_tag(&hypothesis.text);
        let kept = self_diagnose(
            &document,
            &hypothesis,
            &factors,
            &IdentityBackend,
            &CorrectionOptions::default(),
        )
        .unwrap();
        assert!(kept.is_empty());

        let options = CorrectionOptions {
            self_diagnosis: true,
            ..CorrectionOptions::default()
        };
        let result = correct(&document, &hypothesis, &RuleTagger, &IdentityBackend, &options)
            .unwrap();
        assert_eq!(result.corrected, hypothesis.text);
        assert_eq!(result.diagnosis_kept, DiagnosisSet::Kept(vec![]));
    }

    #[test]
    fn diagnosis_masks_only_disagreeing_factors() {
        let (document, hypothesis) = doc_and_hyp(
            "Old Temperton died at 66.",
            "Old Temperton has died at the age of 74.",
        );
        let backend =
            ScriptedBackend::substituting(HashMap::from([("74".to_string(), "66".to_string())]));
        let options = CorrectionOptions {
            self_diagnosis: true,
            ..CorrectionOptions::default()
        };
        let result =
            correct(&document, &hypothesis, &RuleTagger, &backend, &options).unwrap();
        assert_eq!(result.corrected, "Old Temperton has died at the age of 66.");
        assert_eq!(result.diagnosis_kept, DiagnosisSet::Kept(vec![1]));
        // factor 0 appears verbatim, untouched by the joint pass
        assert_eq!(result.changes.len(), 1);
        assert_eq!(result.changes[0].index, 1);
        // K probes plus one joint pass
        assert_eq!(backend.call_count(), 3);
        let joint = &backend.calls()[2];
        assert_eq!(joint.request.slot_count, 1);
    }

    #[test]
    fn all_unknown_fills_raise_an_alert() {
        let (document, hypothesis) = doc_and_hyp(
            "Quarterly figures improved.",
            "John Carver has been in a row for Newcastle since 2015.",
        );
        let k = crate::factors::rule_based_tag(&hypothesis.text).len();
        let backend = ScriptedBackend::with_responses(vec![ScriptedResponse::Slots(vec![
            UNKNOWN_FILL.into();
            k
        ])]);
        let result = correct(
            &document,
            &hypothesis,
            &RuleTagger,
            &backend,
            &CorrectionOptions::default(),
        )
        .unwrap();
        assert!(result.alert);
        assert_eq!(result.alert_reason, AlertReason::UnkFill);
        assert!(result.corrected.contains(UNKNOWN_FILL));
    }

    #[test]
    fn alignment_failure_respects_the_option() {
        let (document, hypothesis) = doc_and_hyp(
            "Mercedes dominated the race weekend in Austin.",
            "Kimi Raikkonen headed a Ferrari one-two at the 2016 race.",
        );
        let rewrite = "Mercedes dominated the race weekend from start to finish.";
        let options = CorrectionOptions {
            mode: CorrectionMode::FullSequence,
            alert_on_alignment_failure: true,
            ..CorrectionOptions::default()
        };
        let backend = ScriptedBackend::with_responses(vec![ScriptedResponse::Full(
            rewrite.into(),
        )]);
        let result =
            correct(&document, &hypothesis, &RuleTagger, &backend, &options).unwrap();
        assert!(result.alert);
        assert_eq!(result.alert_reason, AlertReason::AlignmentFailure);
        assert_eq!(result.corrected, rewrite);
        assert!(result.changes.is_empty());

        let options = CorrectionOptions {
            alert_on_alignment_failure: false,
            ..options
        };
        let backend = ScriptedBackend::with_responses(vec![ScriptedResponse::Full(
            rewrite.into(),
        )]);
        let result =
            correct(&document, &hypothesis, &RuleTagger, &backend, &options).unwrap();
        assert!(!result.alert);
        assert_eq!(result.corrected, rewrite);
    }

    #[test]
    fn doc_mismatch_is_an_error() {
        let document = SourceDocument::from_text("d1", "text");
        let hypothesis = Hypothesis {
            id: "h1".into(),
            doc_id: "other".into(),
            text: "John Smith spoke.".into(),
        };
        assert!(matches!(
            correct(
                &document,
                &hypothesis,
                &RuleTagger,
                &IdentityBackend,
                &CorrectionOptions::default()
            ),
            Err(PipelineError::DocumentMismatch { .. })
        ));
    }

    #[test]
    fn detect_alert_goldens() {
        let options = CorrectionOptions::default();
        let unk = FillResult {
            fills: vec![UNKNOWN_FILL.into(), UNKNOWN_FILL.into(), UNKNOWN_FILL.into()],
            raw_output: String::new(),
            mode: CorrectionMode::SlotFill,
            alignment_ok: true,
        };
        assert_eq!(detect_alert(&unk, "x", &options), (true, AlertReason::UnkFill));

        let clean = FillResult {
            fills: vec!["Rod Temperton".into(), "66".into()],
            raw_output: String::new(),
            mode: CorrectionMode::SlotFill,
            alignment_ok: true,
        };
        assert_eq!(detect_alert(&clean, "x", &options), (false, AlertReason::None));

        let unaligned = FillResult {
            fills: vec![],
            raw_output: "whatever".into(),
            mode: CorrectionMode::FullSequence,
            alignment_ok: false,
        };
        let strict = CorrectionOptions {
            alert_on_alignment_failure: true,
            ..CorrectionOptions::default()
        };
        assert_eq!(
            detect_alert(&unaligned, "whatever", &strict),
            (true, AlertReason::AlignmentFailure)
        );
        assert_eq!(
            detect_alert(&unaligned, "whatever", &options),
            (false, AlertReason::None)
        );
    }

    #[test]
    fn diagnosis_set_serializes_as_all_or_indices() {
        let all = serde_json::to_string(&DiagnosisSet::all()).unwrap();
        assert_eq!(all, "\"all\"");
        let kept = serde_json::to_string(&DiagnosisSet::Kept(vec![0, 2])).unwrap();
        assert_eq!(kept, "[0,2]");
        let parsed: DiagnosisSet = serde_json::from_str("\"all\"").unwrap();
        assert_eq!(parsed, DiagnosisSet::all());
    }
}
