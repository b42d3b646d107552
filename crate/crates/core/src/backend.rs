//! The cloze backend contract and the built-in test backends.
//!
//! A backend answers one request: fill the placeholders of a rendered input,
//! jointly and in ascending slot order. The fill for slot `k` may depend on
//! fills (and prefills) for slots before `k` and must never depend on later
//! slots. Returning the reserved `"<unk>"` string for a slot is legal and
//! signals a factor the backend could not ground.
//!
//! Real generation models live behind the wire contract in [`crate::wire`];
//! in-core backends exist so the whole pipeline runs and is verified without
//! one. The request carries two in-core metadata fields (`slot_categories`,
//! `slot_originals`) that never cross the wire: the document-retrieval oracle
//! needs the categories and the identity/scripted backends need the original
//! surfaces, neither of which is recoverable from the masked template.

use std::collections::HashMap;
use std::collections::VecDeque;
use std::sync::Mutex;

use thiserror::Error;

use crate::factors::FactorCategory;
use crate::mask::{align_template, normalize, placeholder, split_rendered, CorrectionMode, FillResult};

/// One fill request against a backend.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendRequest {
    /// Document + separator + masked template, from `render_input`.
    pub rendered_input: String,
    /// Number of placeholders in the template.
    pub slot_count: usize,
    pub mode: CorrectionMode,
    /// Fixed fills injected for disturbed-decoding runs, `(slot, fill)` with
    /// strictly ascending slot indices.
    pub prefilled: Vec<(usize, String)>,
    /// Per-slot factor categories; in-core metadata, empty when unknown.
    pub slot_categories: Vec<FactorCategory>,
    /// Per-slot original surfaces; in-core metadata for test backends.
    pub slot_originals: Vec<String>,
}

impl BackendRequest {
    pub fn new(rendered_input: String, slot_count: usize, mode: CorrectionMode) -> Self {
        BackendRequest {
            rendered_input,
            slot_count,
            mode,
            prefilled: Vec::new(),
            slot_categories: Vec::new(),
            slot_originals: Vec::new(),
        }
    }

    pub fn with_prefilled(mut self, prefilled: Vec<(usize, String)>) -> Self {
        self.prefilled = prefilled;
        self
    }

    pub fn with_slot_metadata(
        mut self,
        categories: Vec<FactorCategory>,
        originals: Vec<String>,
    ) -> Self {
        self.slot_categories = categories;
        self.slot_originals = originals;
        self
    }

    /// Checks the prefill invariant: strictly ascending indices below
    /// `slot_count`.
    pub fn validate(&self) -> Result<(), BackendError> {
        let mut prev: Option<usize> = None;
        for (slot, _) in &self.prefilled {
            if *slot >= self.slot_count || prev.is_some_and(|p| p >= *slot) {
                return Err(BackendError::Protocol {
                    message: format!(
                        "prefilled slots must be strictly ascending and < {}, got slot {}",
                        self.slot_count, slot
                    ),
                });
            }
            prev = Some(*slot);
        }
        Ok(())
    }
}

/// What a backend supports; the orchestrator adapts to these.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackendCapabilities {
    pub supports_concurrent_calls: bool,
    pub supports_prefill: bool,
    pub max_input_chars: usize,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend transport failure (retryable: {retryable}): {message}")]
    Transport { message: String, retryable: bool },
    #[error("backend protocol violation: {message}")]
    Protocol { message: String },
    #[error("rendered input of {chars} chars exceeds backend limit of {max}")]
    InputTooLong { chars: usize, max: usize },
    #[error("backend does not support prefilled slots")]
    PrefillUnsupported,
}

/// The cloze model contract implemented by every backend.
pub trait ClozeBackend: Send + Sync {
    fn capabilities(&self) -> BackendCapabilities;

    /// Produces exactly `slot_count` fills, jointly, in ascending slot order.
    /// Deterministic backends return identical output for identical requests.
    fn fill(&self, request: &BackendRequest) -> Result<FillResult, BackendError>;
}

/// Shared request admission checks: input length and prefill support.
pub fn check_request(
    request: &BackendRequest,
    capabilities: &BackendCapabilities,
) -> Result<(), BackendError> {
    request.validate()?;
    let chars = request.rendered_input.chars().count();
    if chars > capabilities.max_input_chars {
        return Err(BackendError::InputTooLong {
            chars,
            max: capabilities.max_input_chars,
        });
    }
    if !request.prefilled.is_empty() && !capabilities.supports_prefill {
        return Err(BackendError::PrefillUnsupported);
    }
    Ok(())
}

fn originals_with_prefills(request: &BackendRequest) -> Result<Vec<String>, BackendError> {
    if request.slot_originals.len() != request.slot_count {
        return Err(BackendError::Protocol {
            message: format!(
                "request carries {} slot originals for {} slots",
                request.slot_originals.len(),
                request.slot_count
            ),
        });
    }
    let mut fills = request.slot_originals.clone();
    for (slot, fill) in &request.prefilled {
        fills[*slot] = fill.clone();
    }
    Ok(fills)
}

fn slot_result(fills: Vec<String>) -> FillResult {
    FillResult {
        raw_output: fills.join("\n"),
        fills,
        mode: CorrectionMode::SlotFill,
        alignment_ok: true,
    }
}

fn full_result_from_fills(request: &BackendRequest, fills: &[String]) -> FillResult {
    let template = template_of(request);
    let mut regenerated = template.clone();
    for (slot, fill) in fills.iter().enumerate() {
        regenerated = regenerated.replace(&placeholder(slot), fill);
    }
    align_template(&template, &regenerated)
}

fn template_of(request: &BackendRequest) -> String {
    split_rendered(&request.rendered_input)
        .map(|(_, t)| t.to_string())
        .unwrap_or_else(|| request.rendered_input.clone())
}

/// Echoes each slot's original surface back; the fixpoint backend used to
/// verify that the pipeline never changes what the model does not change.
#[derive(Debug, Default, Clone, Copy)]
pub struct IdentityBackend;

impl ClozeBackend for IdentityBackend {
    fn capabilities(&self) -> BackendCapabilities {
        BackendCapabilities {
            supports_concurrent_calls: true,
            supports_prefill: true,
            max_input_chars: usize::MAX,
        }
    }

    fn fill(&self, request: &BackendRequest) -> Result<FillResult, BackendError> {
        check_request(request, &self.capabilities())?;
        let fills = originals_with_prefills(request)?;
        Ok(match request.mode {
            CorrectionMode::SlotFill => slot_result(fills),
            CorrectionMode::FullSequence => full_result_from_fills(request, &fills),
        })
    }
}

/// A scripted answer for one backend call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScriptedResponse {
    /// One fill per slot, verbatim.
    Slots(Vec<String>),
    /// A regenerated sentence, aligned against the request's template.
    Full(String),
}

/// One recorded backend call.
#[derive(Debug, Clone)]
pub struct LoggedCall {
    pub request: BackendRequest,
    /// Slot indices in the order their fills were produced.
    pub resolution_order: Vec<usize>,
}

enum Script {
    /// Responses consumed one per call, in order.
    Sequence(Mutex<VecDeque<ScriptedResponse>>),
    /// Per-slot substitution of original surfaces; unmatched surfaces echo.
    Substitutions(HashMap<String, String>),
}

/// A backend programmed ahead of time, recording every call it receives.
/// The call log is the oracle for call-count and causality assertions.
pub struct ScriptedBackend {
    script: Script,
    log: Mutex<Vec<LoggedCall>>,
}

impl ScriptedBackend {
    /// Answers calls from a fixed response queue; a call beyond the end of
    /// the queue is a protocol error.
    pub fn with_responses(responses: Vec<ScriptedResponse>) -> Self {
        ScriptedBackend {
            script: Script::Sequence(Mutex::new(responses.into())),
            log: Mutex::new(Vec::new()),
        }
    }

    /// Answers each slot by looking its original surface up in `answers`,
    /// echoing surfaces that have no entry. Normalized keys are matched
    /// exactly as given.
    pub fn substituting(answers: HashMap<String, String>) -> Self {
        ScriptedBackend {
            script: Script::Substitutions(answers),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn call_count(&self) -> usize {
        self.log.lock().unwrap().len()
    }

    pub fn calls(&self) -> Vec<LoggedCall> {
        self.log.lock().unwrap().clone()
    }
}

impl ClozeBackend for ScriptedBackend {
    fn capabilities(&self) -> BackendCapabilities {
        BackendCapabilities {
            supports_concurrent_calls: true,
            supports_prefill: true,
            max_input_chars: usize::MAX,
        }
    }

    fn fill(&self, request: &BackendRequest) -> Result<FillResult, BackendError> {
        check_request(request, &self.capabilities())?;
        let (result, order) = match &self.script {
            Script::Sequence(queue) => {
                let response = queue.lock().unwrap().pop_front().ok_or_else(|| {
                    BackendError::Protocol {
                        message: "scripted backend exhausted its responses".into(),
                    }
                })?;
                match response {
                    ScriptedResponse::Slots(fills) => {
                        if fills.len() != request.slot_count {
                            return Err(BackendError::Protocol {
                                message: format!(
                                    "scripted response has {} fills for {} slots",
                                    fills.len(),
                                    request.slot_count
                                ),
                            });
                        }
                        let order = (0..fills.len()).collect();
                        (slot_result(fills), order)
                    }
                    ScriptedResponse::Full(sentence) => {
                        let aligned = align_template(&template_of(request), &sentence);
                        let order = (0..aligned.fills.len()).collect();
                        (aligned, order)
                    }
                }
            }
            Script::Substitutions(answers) => {
                let originals = originals_with_prefills(request)?;
                let prefilled: Vec<usize> =
                    request.prefilled.iter().map(|(slot, _)| *slot).collect();
                let fills: Vec<String> = originals
                    .iter()
                    .enumerate()
                    .map(|(slot, surface)| {
                        if prefilled.contains(&slot) {
                            surface.clone()
                        } else {
                            answers.get(surface).cloned().unwrap_or_else(|| surface.clone())
                        }
                    })
                    .collect();
                let order = (0..fills.len()).collect();
                match request.mode {
                    CorrectionMode::SlotFill => (slot_result(fills), order),
                    CorrectionMode::FullSequence => {
                        (full_result_from_fills(request, &fills), order)
                    }
                }
            }
        };
        self.log.lock().unwrap().push(LoggedCall {
            request: request.clone(),
            resolution_order: order,
        });
        Ok(result)
    }
}

/// Serializes calls to a backend that does not support concurrency.
pub struct SerialBackend<'a> {
    inner: &'a dyn ClozeBackend,
    gate: Mutex<()>,
}

impl<'a> SerialBackend<'a> {
    pub fn new(inner: &'a dyn ClozeBackend) -> Self {
        SerialBackend {
            inner,
            gate: Mutex::new(()),
        }
    }
}

impl ClozeBackend for SerialBackend<'_> {
    fn capabilities(&self) -> BackendCapabilities {
        BackendCapabilities {
            supports_concurrent_calls: true,
            ..self.inner.capabilities()
        }
    }

    fn fill(&self, request: &BackendRequest) -> Result<FillResult, BackendError> {
        let _guard = self.gate.lock().unwrap();
        self.inner.fill(request)
    }
}

/// Normalized-surface comparison used when matching prefills against
/// candidates.
pub(crate) fn surfaces_match(a: &str, b: &str) -> bool {
    normalize(a) == normalize(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::document::SourceDocument;
    use crate::factors::rule_based_tag;
    use crate::mask::{build_masked, render_input, UNKNOWN_FILL};

    fn request_for(
        sentence: &str,
        doc_text: &str,
        mode: CorrectionMode,
    ) -> (BackendRequest, crate::mask::MaskedHypothesis) {
        let doc = SourceDocument::from_text("d", doc_text);
        let factors = rule_based_tag(sentence);
        let selection: Vec<usize> = (0..factors.len()).collect();
        let masked = build_masked(sentence, &factors, &selection, mode).unwrap();
        let rendered = render_input(&doc, &masked, 10_000);
        let categories = masked.factors.iter().map(|f| f.category).collect();
        let originals = masked.factors.iter().map(|f| f.surface.clone()).collect();
        let request = BackendRequest::new(rendered, masked.factors.len(), mode)
            .with_slot_metadata(categories, originals);
        (request, masked)
    }

    #[test]
    fn identity_returns_originals_in_slot_mode() {
        let (request, masked) = request_for(
            "Rod Temperton has died at the age of 66.",
            "Some document.",
            CorrectionMode::SlotFill,
        );
        let result = IdentityBackend.fill(&request).unwrap();
        assert!(result.alignment_ok);
        let surfaces: Vec<String> = masked.factors.iter().map(|f| f.surface.clone()).collect();
        assert_eq!(result.fills, surfaces);
    }

    #[test]
    fn identity_round_trips_in_full_mode() {
        let (request, masked) = request_for(
            "Rod Temperton has died at the age of 66.",
            "Some document.",
            CorrectionMode::FullSequence,
        );
        let result = IdentityBackend.fill(&request).unwrap();
        assert!(result.alignment_ok);
        let surfaces: Vec<String> = masked.factors.iter().map(|f| f.surface.clone()).collect();
        assert_eq!(result.fills, surfaces);
        assert_eq!(result.raw_output, masked.original);
    }

    #[test]
    fn identity_honors_prefills() {
        let (request, _) = request_for(
            "Rod Temperton has died at the age of 66.",
            "Some document.",
            CorrectionMode::SlotFill,
        );
        let request = request.with_prefilled(vec![(0, "Chaka Khan".to_string())]);
        let result = IdentityBackend.fill(&request).unwrap();
        assert_eq!(result.fills[0], "Chaka Khan");
        assert_eq!(result.fills[1], "66");
    }

    #[test]
    fn scripted_sequence_returns_programmed_fills_in_order() {
        let backend = ScriptedBackend::with_responses(vec![ScriptedResponse::Slots(vec![
            "Rod Temperton".into(),
            "songwriters".into(),
            "66".into(),
        ])]);
        let (request, _) = request_for(
            "Old Temperton, a 74 writer, died at 66.",
            "doc",
            CorrectionMode::SlotFill,
        );
        assert_eq!(request.slot_count, 3);
        let result = backend.fill(&request).unwrap();
        assert_eq!(
            result.fills,
            vec!["Rod Temperton", "songwriters", "66"]
        );
        let calls = backend.calls();
        assert_eq!(calls.len(), 1);
        assert_eq!(calls[0].resolution_order, vec![0, 1, 2]);
    }

    #[test]
    fn scripted_sequence_rejects_wrong_arity() {
        let backend =
            ScriptedBackend::with_responses(vec![ScriptedResponse::Slots(vec!["x".into()])]);
        let (request, _) = request_for(
            "Rod Temperton has died at the age of 66.",
            "doc",
            CorrectionMode::SlotFill,
        );
        assert!(matches!(
            backend.fill(&request),
            Err(BackendError::Protocol { .. })
        ));
    }

    #[test]
    fn scripted_substitutions_change_only_mapped_surfaces() {
        let backend = ScriptedBackend::substituting(HashMap::from([(
            "74".to_string(),
            "66".to_string(),
        )]));
        let (request, _) = request_for(
            "Old Temperton has died at the age of 74.",
            "doc",
            CorrectionMode::SlotFill,
        );
        let result = backend.fill(&request).unwrap();
        assert_eq!(result.fills, vec!["Old Temperton", "66"]);
    }

    #[test]
    fn exhausted_script_is_a_protocol_error() {
        let backend = ScriptedBackend::with_responses(vec![]);
        let (request, _) = request_for(
            "Rod Temperton has died at the age of 66.",
            "doc",
            CorrectionMode::SlotFill,
        );
        assert!(backend.fill(&request).is_err());
    }

    #[test]
    fn prefill_validation_rejects_disorder() {
        let request = BackendRequest::new("x".into(), 3, CorrectionMode::SlotFill)
            .with_prefilled(vec![(1, "a".into()), (1, "b".into())]);
        assert!(request.validate().is_err());
        let request = BackendRequest::new("x".into(), 3, CorrectionMode::SlotFill)
            .with_prefilled(vec![(5, "a".into())]);
        assert!(request.validate().is_err());
    }

    #[test]
    fn unknown_fill_is_a_legal_scripted_answer() {
        let backend = ScriptedBackend::with_responses(vec![ScriptedResponse::Slots(vec![
            UNKNOWN_FILL.into(),
            UNKNOWN_FILL.into(),
        ])]);
        let (request, _) = request_for(
            "Old Temperton has died at the age of 74.",
            "doc",
            CorrectionMode::SlotFill,
        );
        let result = backend.fill(&request).unwrap();
        assert_eq!(result.fills, vec![UNKNOWN_FILL, UNKNOWN_FILL]);
    }
}
