//! Batch runs over JSONL files: correction, distillation and training-corpus
//! generation.
//!
//! Every run fans records out to a bounded worker pool and buffers results
//! back into input order, so outputs are byte-identical for any worker
//! count. Malformed lines and unresolvable references become record-level
//! error entries; the run itself only fails on I/O or configuration
//! problems. Alerts are data, never silent drops — the disposition decides
//! where they land.

use std::collections::HashMap;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{ClozeBackend, SerialBackend};
use crate::distill::{
    build_distilled, score_record, DistillStats, MetricAdapter, ScoredPair, Thresholds,
    METRIC_ROUGE2P,
};
use crate::document::{Hypothesis, SourceDocument};
use crate::factors::{extract_factors, resolve_overlaps, FactorTagger};
use crate::mask::FactorChange;
use crate::oracle::OracleBackend;
use crate::par::ordered_map;
use crate::pipeline::{correct, AlertReason, CorrectionOptions, DiagnosisSet};
use crate::rouge::rouge2_precision;
use crate::train::{make_alert_example, make_training_example, BuildOutcome, TrainParams, TrainingExample};
use crate::wire::CommandBackend;

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("configuration error: {0}")]
    Config(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RunnerError + '_ {
    move |source| RunnerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A record-level problem; the run continues past it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorRecord {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub line: Option<usize>,
    pub error: String,
}

/// Reads a JSONL file, collecting malformed lines instead of failing.
pub fn read_jsonl_lossy<T: DeserializeOwned>(
    path: &Path,
) -> Result<(Vec<T>, Vec<ErrorRecord>), RunnerError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut items = Vec::new();
    let mut errors = Vec::new();
    for (idx, line) in io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(item) => items.push(item),
            Err(e) => errors.push(ErrorRecord {
                id: None,
                line: Some(idx + 1),
                error: format!("{}: {e}", path.display()),
            }),
        }
    }
    Ok((items, errors))
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), RunnerError> {
    let mut out = io::BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    for item in items {
        let line = serde_json::to_string(item)
            .map_err(|e| RunnerError::Config(format!("serialization failed: {e}")))?;
        out.write_all(line.as_bytes()).map_err(io_err(path))?;
        out.write_all(b"\n").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

fn sibling(path: &Path, tag: &str) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) => path.with_extension(format!("{tag}.{ext}")),
        None => path.with_extension(format!("{tag}.jsonl")),
    }
}

/// Loads documents into an id-keyed map; documents without sentence spans
/// get them derived from the text.
pub fn load_documents(
    path: &Path,
) -> Result<(HashMap<String, SourceDocument>, Vec<ErrorRecord>), RunnerError> {
    let (raw, mut errors) = read_jsonl_lossy::<SourceDocument>(path)?;
    let mut docs = HashMap::with_capacity(raw.len());
    for mut doc in raw {
        if doc.sentences.is_empty() && !doc.text.is_empty() {
            doc = SourceDocument::from_text(doc.id.clone(), doc.text);
        }
        if let Err(e) = doc.validate() {
            errors.push(ErrorRecord {
                id: Some(doc.id.clone()),
                line: None,
                error: e.to_string(),
            });
            continue;
        }
        if docs.insert(doc.id.clone(), doc).is_some() {
            return Err(RunnerError::Config(format!(
                "duplicate document id in {}",
                path.display()
            )));
        }
    }
    Ok((docs, errors))
}

/// Where alert records go.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlertDisposition {
    /// Alerts stay in the main output, flagged.
    Flag,
    /// Alerts are dropped from the outputs (still counted).
    Drop,
    /// Alerts land in a sibling `.alerts` file.
    SeparateFile,
}

/// Which backend a batch run talks to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSelection {
    Identity,
    /// Per-document retrieval oracle built from the document itself.
    Oracle,
    /// External process speaking the wire contract.
    Command { program: String, args: Vec<String> },
}

#[derive(Debug, Clone)]
pub struct CorrectConfig {
    pub docs: PathBuf,
    pub hypotheses: PathBuf,
    pub out: PathBuf,
    pub backend: BackendSelection,
    pub options: CorrectionOptions,
    pub workers: usize,
    pub disposition: AlertDisposition,
}

/// One corrected hypothesis as written to the output file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectedRecord {
    pub id: String,
    pub doc_id: String,
    pub original: String,
    pub corrected: String,
    pub changes: Vec<FactorChange>,
    pub alert: bool,
    pub alert_reason: AlertReason,
    pub diagnosis_kept: DiagnosisSet,
}

/// Run totals; the four counts partition the input.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectSummary {
    pub corrected: usize,
    pub unchanged: usize,
    pub alerts: usize,
    pub errors: usize,
}

enum PreparedBackend<'a> {
    Shared(Box<dyn ClozeBackend + 'a>),
    PerDocumentOracle(HashMap<String, OracleBackend>),
}

fn prepare_backend<'a>(
    selection: &BackendSelection,
    docs: &HashMap<String, SourceDocument>,
    tagger: &'a dyn FactorTagger,
) -> Result<PreparedBackend<'a>, RunnerError> {
    match selection {
        BackendSelection::Identity => Ok(PreparedBackend::Shared(Box::new(
            crate::backend::IdentityBackend,
        ))),
        BackendSelection::Command { program, args } => Ok(PreparedBackend::Shared(Box::new(
            CommandBackend::new(program.clone(), args.clone()),
        ))),
        BackendSelection::Oracle => {
            let mut oracles = HashMap::with_capacity(docs.len());
            for (id, doc) in docs {
                let oracle = OracleBackend::from_document(doc, tagger).map_err(|e| {
                    RunnerError::Config(format!("cannot build oracle for document {id}: {e}"))
                })?;
                oracles.insert(id.clone(), oracle);
            }
            Ok(PreparedBackend::PerDocumentOracle(oracles))
        }
    }
}

/// Corrects a batch of hypotheses and writes the output files.
pub fn run_correct(
    config: &CorrectConfig,
    tagger: &dyn FactorTagger,
) -> Result<CorrectSummary, RunnerError> {
    config
        .options
        .validate()
        .map_err(|e| RunnerError::Config(e.to_string()))?;
    let (docs, doc_errors) = load_documents(&config.docs)?;
    let (hypotheses, line_errors) = read_jsonl_lossy::<Hypothesis>(&config.hypotheses)?;
    let prepared = prepare_backend(&config.backend, &docs, tagger)?;

    let serial_holder;
    let shared: Option<&dyn ClozeBackend> = match &prepared {
        PreparedBackend::Shared(backend) => {
            if config.workers != 1 && !backend.capabilities().supports_concurrent_calls {
                serial_holder = SerialBackend::new(backend.as_ref());
                Some(&serial_holder)
            } else {
                Some(backend.as_ref())
            }
        }
        PreparedBackend::PerDocumentOracle(_) => None,
    };

    let outcomes = ordered_map(&hypotheses, config.workers, |hypothesis| {
        let Some(document) = docs.get(&hypothesis.doc_id) else {
            return Err(ErrorRecord {
                id: Some(hypothesis.id.clone()),
                line: None,
                error: format!("unknown document id {:?}", hypothesis.doc_id),
            });
        };
        let backend: &dyn ClozeBackend = match &prepared {
            PreparedBackend::Shared(_) => shared.expect("shared backend prepared"),
            PreparedBackend::PerDocumentOracle(oracles) => {
                oracles.get(&hypothesis.doc_id).expect("oracle per document")
            }
        };
        match correct(document, hypothesis, tagger, backend, &config.options) {
            Ok(result) => Ok(CorrectedRecord {
                id: hypothesis.id.clone(),
                doc_id: hypothesis.doc_id.clone(),
                original: hypothesis.text.clone(),
                corrected: result.corrected,
                changes: result.changes,
                alert: result.alert,
                alert_reason: result.alert_reason,
                diagnosis_kept: result.diagnosis_kept,
            }),
            Err(e) => Err(ErrorRecord {
                id: Some(hypothesis.id.clone()),
                line: None,
                error: e.to_string(),
            }),
        }
    });

    let mut summary = CorrectSummary::default();
    let mut main = Vec::new();
    let mut alert_records = Vec::new();
    let mut errors: Vec<ErrorRecord> = doc_errors;
    errors.extend(line_errors);
    summary.errors = errors.len();
    for outcome in outcomes {
        match outcome {
            Ok(record) => {
                if record.alert {
                    summary.alerts += 1;
                    match config.disposition {
                        AlertDisposition::Flag => main.push(record),
                        AlertDisposition::Drop => {}
                        AlertDisposition::SeparateFile => alert_records.push(record),
                    }
                } else if record.corrected != record.original {
                    summary.corrected += 1;
                    main.push(record);
                } else {
                    summary.unchanged += 1;
                    main.push(record);
                }
            }
            Err(error) => {
                summary.errors += 1;
                errors.push(error);
            }
        }
    }

    write_jsonl(&config.out, &main)?;
    if config.disposition == AlertDisposition::SeparateFile {
        write_jsonl(&sibling(&config.out, "alerts"), &alert_records)?;
    }
    if !errors.is_empty() {
        write_jsonl(&sibling(&config.out, "errors"), &errors)?;
    }
    Ok(summary)
}

/// An unscored (document, summary-sentence) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub doc_id: String,
    pub summary_sentence: String,
}

/// One precomputed metric value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct DistillConfig {
    pub pairs: PathBuf,
    pub docs: Option<PathBuf>,
    /// Precomputed scores; mutually exclusive with adapters.
    pub scores: Option<PathBuf>,
    pub thresholds: Thresholds,
    pub out_base: PathBuf,
    pub out_alert: PathBuf,
    pub stats_out: Option<PathBuf>,
    pub workers: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillRunStats {
    pub input_records: usize,
    pub unscored: usize,
    pub errors: usize,
    #[serde(flatten)]
    pub distill: DistillStats,
}

/// Scores (or looks up scores for) each pair, partitions them at the
/// thresholds, and writes the base and alert sets.
pub fn run_distill(
    config: &DistillConfig,
    tagger: &dyn FactorTagger,
    adapters: &[&dyn MetricAdapter],
) -> Result<DistillRunStats, RunnerError> {
    if config.scores.is_some() && !adapters.is_empty() {
        return Err(RunnerError::Config(
            "give either precomputed scores or adapters, not both".into(),
        ));
    }
    if config.scores.is_none() && adapters.is_empty() {
        return Err(RunnerError::Config(
            "no scores available: give a precomputed scores file or configure adapters".into(),
        ));
    }

    let (pairs, mut errors) = read_jsonl_lossy::<PairRecord>(&config.pairs)?;
    let docs = match &config.docs {
        Some(path) => {
            let (docs, doc_errors) = load_documents(path)?;
            errors.extend(doc_errors);
            Some(docs)
        }
        None => None,
    };

    let precomputed: Option<HashMap<String, std::collections::BTreeMap<String, f64>>> =
        match &config.scores {
            Some(path) => {
                let (records, score_errors) = read_jsonl_lossy::<ScoreRecord>(path)?;
                errors.extend(score_errors);
                let mut map: HashMap<String, std::collections::BTreeMap<String, f64>> =
                    HashMap::new();
                for record in records {
                    map.entry(record.id).or_default().insert(record.metric, record.value);
                }
                Some(map)
            }
            None => None,
        };

    let mut unscored = 0usize;
    let doc_text = |pair: &PairRecord| -> Option<String> {
        docs.as_ref()
            .and_then(|d| d.get(&pair.doc_id))
            .map(|d| d.text.clone())
    };

    let scored: Vec<Result<ScoredPair, ErrorRecord>> = match &precomputed {
        Some(map) => pairs
            .iter()
            .map(|pair| {
                let mut scores = map.get(&pair.id).cloned().ok_or_else(|| ErrorRecord {
                    id: Some(pair.id.clone()),
                    line: None,
                    error: "no precomputed scores for record".into(),
                })?;
                if !scores.contains_key(METRIC_ROUGE2P) {
                    let text = doc_text(pair).ok_or_else(|| ErrorRecord {
                        id: Some(pair.id.clone()),
                        line: None,
                        error: format!(
                            "cannot compute {METRIC_ROUGE2P}: document {:?} unavailable",
                            pair.doc_id
                        ),
                    })?;
                    scores.insert(
                        METRIC_ROUGE2P.to_string(),
                        rouge2_precision(&pair.summary_sentence, &text),
                    );
                }
                Ok(ScoredPair {
                    id: pair.id.clone(),
                    doc_id: pair.doc_id.clone(),
                    summary_sentence: pair.summary_sentence.clone(),
                    scores,
                })
            })
            .collect(),
        None => {
            let workers = if adapters.iter().all(|a| a.supports_concurrent_calls()) {
                config.workers
            } else {
                1
            };
            ordered_map(&pairs, workers, |pair| {
                let text = doc_text(pair).ok_or_else(|| ErrorRecord {
                    id: Some(pair.id.clone()),
                    line: None,
                    error: format!("document {:?} unavailable", pair.doc_id),
                })?;
                score_record(&pair.id, &text, &pair.summary_sentence, adapters)
                    .map(|scores| ScoredPair {
                        id: pair.id.clone(),
                        doc_id: pair.doc_id.clone(),
                        summary_sentence: pair.summary_sentence.clone(),
                        scores,
                    })
                    .map_err(|e| ErrorRecord {
                        id: Some(pair.id.clone()),
                        line: None,
                        error: e.to_string(),
                    })
            })
        }
    };

    let mut ready = Vec::with_capacity(scored.len());
    for outcome in scored {
        match outcome {
            Ok(pair) => ready.push(pair),
            Err(e) => {
                unscored += 1;
                errors.push(e);
            }
        }
    }

    // records missing a required metric are unscored, not fatal
    let mut complete = Vec::with_capacity(ready.len());
    for pair in ready {
        let missing: Vec<&str> = [
            crate::distill::METRIC_DAE,
            crate::distill::METRIC_SUMMAC,
            crate::distill::METRIC_CLOZE,
            METRIC_ROUGE2P,
        ]
        .into_iter()
        .filter(|m| !pair.scores.contains_key(*m))
        .collect();
        if missing.is_empty() {
            complete.push(pair);
        } else {
            unscored += 1;
            errors.push(ErrorRecord {
                id: Some(pair.id.clone()),
                line: None,
                error: format!("missing metrics: {}", missing.join(", ")),
            });
        }
    }

    let outcome = build_distilled(&complete, &config.thresholds, tagger)
        .map_err(|e| RunnerError::Config(e.to_string()))?;
    let base: Vec<_> = outcome.base().cloned().collect();
    let alerts: Vec<_> = outcome.alerts().cloned().collect();
    write_jsonl(&config.out_base, &base)?;
    write_jsonl(&config.out_alert, &alerts)?;
    if !errors.is_empty() {
        write_jsonl(&sibling(&config.out_base, "errors"), &errors)?;
    }

    let stats = DistillRunStats {
        input_records: pairs.len(),
        unscored,
        errors: errors.len(),
        distill: outcome.stats,
    };
    if let Some(path) = &config.stats_out {
        let text = serde_json::to_string_pretty(&stats)
            .map_err(|e| RunnerError::Config(format!("serialization failed: {e}")))?;
        fs::write(path, text).map_err(io_err(path))?;
    }
    Ok(stats)
}

#[derive(Debug, Clone)]
pub struct BuildTrainConfig {
    pub pairs: PathBuf,
    pub docs: PathBuf,
    pub out: PathBuf,
    pub alert_pairs: Option<PathBuf>,
    pub params: TrainParams,
    /// Cap on alert examples as a fraction of base examples; unset keeps all.
    pub alert_ratio: Option<f64>,
    pub workers: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildTrainStats {
    pub base_examples: usize,
    pub alert_examples: usize,
    pub skipped: usize,
    pub errors: usize,
}

/// Generates the training corpus: one example per usable pair, alert
/// examples from the alert pairs, deterministic output order (id, then
/// alerts after their base twin).
pub fn run_build_train(
    config: &BuildTrainConfig,
    tagger: &dyn FactorTagger,
) -> Result<BuildTrainStats, RunnerError> {
    let (docs, mut errors) = load_documents(&config.docs)?;
    let (pairs, pair_errors) = read_jsonl_lossy::<PairRecord>(&config.pairs)?;
    errors.extend(pair_errors);
    let (alert_pairs, alert_errors) = match &config.alert_pairs {
        Some(path) => read_jsonl_lossy::<PairRecord>(path)?,
        None => (Vec::new(), Vec::new()),
    };
    errors.extend(alert_errors);

    enum Produced {
        Example(TrainingExample),
        Skipped,
        Error(ErrorRecord),
    }

    let produce = |pair: &PairRecord, alert: bool| -> Produced {
        let Some(document) = docs.get(&pair.doc_id) else {
            return Produced::Error(ErrorRecord {
                id: Some(pair.id.clone()),
                line: None,
                error: format!("unknown document id {:?}", pair.doc_id),
            });
        };
        if pair.summary_sentence.trim().is_empty() {
            return Produced::Skipped;
        }
        let factors = match extract_factors(&pair.summary_sentence, tagger) {
            Ok(f) => resolve_overlaps(&f),
            Err(e) => {
                return Produced::Error(ErrorRecord {
                    id: Some(pair.id.clone()),
                    line: None,
                    error: e.to_string(),
                })
            }
        };
        let built = if alert {
            make_alert_example(
                document,
                &pair.id,
                &pair.summary_sentence,
                &factors,
                config.params.mode,
                config.params.max_doc_chars,
            )
        } else {
            make_training_example(
                document,
                &pair.id,
                &pair.summary_sentence,
                &factors,
                &config.params,
            )
        };
        match built {
            Ok(BuildOutcome::Example(example)) => Produced::Example(example),
            Ok(BuildOutcome::Skipped) => Produced::Skipped,
            Err(e) => Produced::Error(ErrorRecord {
                id: Some(pair.id.clone()),
                line: None,
                error: e.to_string(),
            }),
        }
    };

    let mut stats = BuildTrainStats::default();
    let mut base_examples = Vec::new();
    for produced in ordered_map(&pairs, config.workers, |p| produce(p, false)) {
        match produced {
            Produced::Example(e) => base_examples.push(e),
            Produced::Skipped => stats.skipped += 1,
            Produced::Error(e) => errors.push(e),
        }
    }
    let mut alert_examples = Vec::new();
    for produced in ordered_map(&alert_pairs, config.workers, |p| produce(p, true)) {
        match produced {
            Produced::Example(e) => alert_examples.push(e),
            Produced::Skipped => stats.skipped += 1,
            Produced::Error(e) => errors.push(e),
        }
    }

    base_examples.sort_by(|a, b| a.id.cmp(&b.id));
    alert_examples.sort_by(|a, b| a.id.cmp(&b.id));
    if let Some(ratio) = config.alert_ratio {
        let cap = (ratio * base_examples.len() as f64).round() as usize;
        alert_examples.truncate(cap);
    }
    stats.base_examples = base_examples.len();
    stats.alert_examples = alert_examples.len();

    let mut all = base_examples;
    all.extend(alert_examples);
    all.sort_by(|a, b| a.id.cmp(&b.id).then(a.is_alert.cmp(&b.is_alert)));
    write_jsonl(&config.out, &all)?;
    if !errors.is_empty() {
        write_jsonl(&sibling(&config.out, "errors"), &errors)?;
    }
    stats.errors = errors.len();
    Ok(stats)
}
