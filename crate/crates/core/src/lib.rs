//! Factual error correction for abstractive summary sentences.
//!
//! The pipeline masks the factual factors of a hypothesis sentence
//! (entities, noun phrases), asks a cloze backend to fill the slots jointly
//! conditioned on the source document, and merges the answers back. A
//! self-diagnosis pass keeps faithful factors untouched and a post-alert
//! flags sentences the backend refuses to ground. A separate distillation
//! path filters (document, summary-sentence) pairs by factual-consistency
//! thresholds and derives the training corpora that teach external models
//! both behaviors.
//!
//! Backends and metric scorers are pluggable: the crate ships deterministic
//! in-core implementations (identity, scripted, document-retrieval oracle)
//! and a process-boundary wire contract for real models.

pub mod backend;
pub mod distill;
pub mod document;
pub mod factors;
pub mod mask;
pub mod oracle;
pub mod par;
pub mod pipeline;
pub mod report;
pub mod rouge;
pub mod runner;
pub mod train;
pub mod wire;

pub use backend::{BackendCapabilities, BackendError, BackendRequest, ClozeBackend, IdentityBackend, ScriptedBackend, ScriptedResponse};
pub use document::{Hypothesis, SentenceSpan, SourceDocument};
pub use factors::{extract_factors, resolve_overlaps, rule_based_tag, EntityKind, FactorCategory, FactorClass, FactorTagger, FactualFactor, RuleTagger};
pub use mask::{align_full_sequence, build_masked, merge_fills, render_input, CorrectionMode, FactorChange, FillResult, MaskedHypothesis, UNKNOWN_FILL};
pub use oracle::OracleBackend;
pub use pipeline::{correct, detect_alert, self_diagnose, AlertReason, CorrectionOptions, CorrectionResult, DiagnosisSet};
pub use rouge::rouge2_precision;
