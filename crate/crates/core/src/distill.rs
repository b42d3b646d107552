//! Multi-dimensional dataset distillation.
//!
//! Each (document, summary-sentence) pair carries factual-consistency scores
//! from three external metric families (dependency, NLI, QA-style) plus an
//! in-core ROUGE-2 precision. A pair is kept when every factual score is at
//! or above its threshold — strictly lower discards, equality keeps. Among
//! the discarded pairs, those whose ROUGE-2 precision falls below the
//! ROUGE threshold form the alert set used to teach backends to answer
//! `"<unk>"`: their factors are extracted and recorded on the way out.
//!
//! The external metrics are never reimplemented here; they plug in through
//! [`MetricAdapter`].

use std::collections::BTreeMap;
use std::io::Write;
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::factors::{extract_factors, resolve_overlaps, FactorTagger, FactualFactor};
use crate::rouge::rouge2_precision;

pub const METRIC_DAE: &str = "dae";
pub const METRIC_SUMMAC: &str = "summac";
pub const METRIC_CLOZE: &str = "cloze";
pub const METRIC_ROUGE2P: &str = "rouge2p";

/// Per-dataset filtering thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub dataset_label: String,
    pub alpha_dae: f64,
    pub alpha_summac: f64,
    pub alpha_cloze: f64,
    pub alpha_rouge: f64,
}

impl Thresholds {
    pub fn new(
        dataset_label: impl Into<String>,
        alpha_dae: f64,
        alpha_summac: f64,
        alpha_cloze: f64,
        alpha_rouge: f64,
    ) -> Result<Self, DistillError> {
        let t = Thresholds {
            dataset_label: dataset_label.into(),
            alpha_dae,
            alpha_summac,
            alpha_cloze,
            alpha_rouge,
        };
        t.validate()?;
        Ok(t)
    }

    /// Reference thresholds for CNN/DailyMail-style corpora.
    pub fn cnn_dm() -> Self {
        Thresholds {
            dataset_label: "cnndm".into(),
            alpha_dae: 0.70,
            alpha_summac: 0.45,
            alpha_cloze: 0.70,
            alpha_rouge: 0.30,
        }
    }

    /// Reference thresholds for XSum-style corpora.
    pub fn xsum() -> Self {
        Thresholds {
            dataset_label: "xsum".into(),
            alpha_dae: 0.50,
            alpha_summac: 0.02,
            alpha_cloze: 0.60,
            alpha_rouge: 0.15,
        }
    }

    pub fn validate(&self) -> Result<(), DistillError> {
        if !(0.0..=1.0).contains(&self.alpha_rouge) {
            return Err(DistillError::Config(format!(
                "alpha_rouge must lie in [0, 1], got {}",
                self.alpha_rouge
            )));
        }
        Ok(())
    }

    /// Parses the flat `key = value` config format; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, DistillError> {
        let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                DistillError::Config(format!("thresholds line {}: expected key=value", lineno + 1))
            })?;
            fields.insert(key.trim(), value.trim());
        }
        let get = |key: &str| {
            fields
                .get(key)
                .copied()
                .ok_or_else(|| DistillError::Config(format!("thresholds missing key {key}")))
        };
        let num = |key: &str| -> Result<f64, DistillError> {
            get(key)?
                .parse()
                .map_err(|_| DistillError::Config(format!("thresholds key {key} is not a number")))
        };
        Thresholds::new(
            get("dataset_label")?.to_string(),
            num("alpha_dae")?,
            num("alpha_summac")?,
            num("alpha_cloze")?,
            num("alpha_rouge")?,
        )
    }
}

/// Kept/discarded partition; alerts are a subset of the discarded side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Decision {
    Kept,
    Discarded,
    Alert,
}

/// A scored (document, summary-sentence) pair entering distillation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPair {
    pub id: String,
    pub doc_id: String,
    pub summary_sentence: String,
    pub scores: BTreeMap<String, f64>,
}

/// A pair after distillation, with its decision and (for alerts) factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillationRecord {
    pub id: String,
    pub doc_id: String,
    pub summary_sentence: String,
    pub scores: BTreeMap<String, f64>,
    pub decision: Decision,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub factors: Vec<FactualFactor>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillStats {
    pub total: usize,
    pub kept: usize,
    pub discarded: usize,
    pub alerts: usize,
    pub retention: f64,
    /// Records scoring strictly below each factual threshold; one record can
    /// count against several metrics.
    pub rejections: BTreeMap<String, usize>,
}

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("distillation configuration error: {0}")]
    Config(String),
    #[error("record {id}: missing metric {metric}")]
    MissingMetric { id: String, metric: String },
    #[error("record {id}: adapter {adapter} failed: {message}")]
    Adapter {
        id: String,
        adapter: String,
        message: String,
    },
    #[error("record {id}: {source}")]
    Factors {
        id: String,
        #[source]
        source: crate::factors::FactorError,
    },
}

fn required(
    scores: &BTreeMap<String, f64>,
    metric: &str,
    id: &str,
) -> Result<f64, DistillError> {
    scores
        .get(metric)
        .copied()
        .ok_or_else(|| DistillError::MissingMetric {
            id: id.to_string(),
            metric: metric.to_string(),
        })
}

/// Applies the three factual thresholds: kept iff no score is strictly lower
/// than its threshold.
pub fn filter_record(
    scores: &BTreeMap<String, f64>,
    thresholds: &Thresholds,
) -> Result<Decision, DistillError> {
    let dae = required(scores, METRIC_DAE, "<unknown>")?;
    let summac = required(scores, METRIC_SUMMAC, "<unknown>")?;
    let cloze = required(scores, METRIC_CLOZE, "<unknown>")?;
    if dae < thresholds.alpha_dae
        || summac < thresholds.alpha_summac
        || cloze < thresholds.alpha_cloze
    {
        Ok(Decision::Discarded)
    } else {
        Ok(Decision::Kept)
    }
}

/// Output of a distillation run: every input record with its decision,
/// sorted by record id, plus aggregate stats.
#[derive(Debug, Clone)]
pub struct DistillationOutcome {
    pub records: Vec<DistillationRecord>,
    pub stats: DistillStats,
}

impl DistillationOutcome {
    pub fn base(&self) -> impl Iterator<Item = &DistillationRecord> {
        self.records.iter().filter(|r| r.decision == Decision::Kept)
    }

    pub fn alerts(&self) -> impl Iterator<Item = &DistillationRecord> {
        self.records
            .iter()
            .filter(|r| r.decision == Decision::Alert)
    }
}

/// Partitions scored pairs into the base and alert sets.
///
/// Every record ends up exactly one of kept, discarded or alert (alert
/// implying discarded); alert records get their factors extracted via
/// `tagger`. Requires `rouge2p` in the score map of any discarded record.
pub fn build_distilled(
    pairs: &[ScoredPair],
    thresholds: &Thresholds,
    tagger: &dyn FactorTagger,
) -> Result<DistillationOutcome, DistillError> {
    thresholds.validate()?;
    let mut records = Vec::with_capacity(pairs.len());
    let mut stats = DistillStats {
        total: pairs.len(),
        ..DistillStats::default()
    };
    for pair in pairs {
        let dae = required(&pair.scores, METRIC_DAE, &pair.id)?;
        let summac = required(&pair.scores, METRIC_SUMMAC, &pair.id)?;
        let cloze = required(&pair.scores, METRIC_CLOZE, &pair.id)?;
        for (metric, value, alpha) in [
            (METRIC_DAE, dae, thresholds.alpha_dae),
            (METRIC_SUMMAC, summac, thresholds.alpha_summac),
            (METRIC_CLOZE, cloze, thresholds.alpha_cloze),
        ] {
            if value < alpha {
                *stats.rejections.entry(metric.to_string()).or_insert(0) += 1;
            }
        }
        let decision = filter_record(&pair.scores, thresholds)?;
        let (decision, factors) = match decision {
            Decision::Kept => {
                stats.kept += 1;
                (Decision::Kept, Vec::new())
            }
            Decision::Discarded | Decision::Alert => {
                stats.discarded += 1;
                let rouge2p = required(&pair.scores, METRIC_ROUGE2P, &pair.id)?;
                if rouge2p < thresholds.alpha_rouge {
                    stats.alerts += 1;
                    let factors = if pair.summary_sentence.trim().is_empty() {
                        Vec::new()
                    } else {
                        resolve_overlaps(
                            &extract_factors(&pair.summary_sentence, tagger).map_err(
                                |source| DistillError::Factors {
                                    id: pair.id.clone(),
                                    source,
                                },
                            )?,
                        )
                    };
                    (Decision::Alert, factors)
                } else {
                    (Decision::Discarded, Vec::new())
                }
            }
        };
        records.push(DistillationRecord {
            id: pair.id.clone(),
            doc_id: pair.doc_id.clone(),
            summary_sentence: pair.summary_sentence.clone(),
            scores: pair.scores.clone(),
            decision,
            factors,
        });
    }
    stats.retention = if stats.total == 0 {
        0.0
    } else {
        stats.kept as f64 / stats.total as f64
    };
    records.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(DistillationOutcome { records, stats })
}

/// External metric scorer behind a one-record contract.
pub trait MetricAdapter: Send + Sync {
    fn name(&self) -> &str;
    /// Declared inclusive score range.
    fn range(&self) -> (f64, f64);
    fn score(&self, id: &str, document: &str, summary_sentence: &str) -> Result<f64, String>;
    fn supports_concurrent_calls(&self) -> bool {
        false
    }
}

/// Scores one pair through every adapter and always adds the in-core
/// `rouge2p`. Any adapter failure fails the whole record so the caller can
/// flag it unscored and move on.
pub fn score_record(
    id: &str,
    document_text: &str,
    summary_sentence: &str,
    adapters: &[&dyn MetricAdapter],
) -> Result<BTreeMap<String, f64>, DistillError> {
    let mut scores = BTreeMap::new();
    for adapter in adapters {
        let value = adapter
            .score(id, document_text, summary_sentence)
            .map_err(|message| DistillError::Adapter {
                id: id.to_string(),
                adapter: adapter.name().to_string(),
                message,
            })?;
        let (lo, hi) = adapter.range();
        if value < lo || value > hi {
            return Err(DistillError::Adapter {
                id: id.to_string(),
                adapter: adapter.name().to_string(),
                message: format!("score {value} outside declared range [{lo}, {hi}]"),
            });
        }
        scores.insert(adapter.name().to_string(), value);
    }
    scores.insert(
        METRIC_ROUGE2P.to_string(),
        rouge2_precision(summary_sentence, document_text),
    );
    Ok(scores)
}

/// Fixed-score adapter for tests and dry runs.
pub struct ConstantAdapter {
    pub name: String,
    pub value: f64,
}

impl MetricAdapter for ConstantAdapter {
    fn name(&self) -> &str {
        &self.name
    }
    fn range(&self) -> (f64, f64) {
        (0.0, 1.0)
    }
    fn score(&self, _id: &str, _document: &str, _summary: &str) -> Result<f64, String> {
        Ok(self.value)
    }
    fn supports_concurrent_calls(&self) -> bool {
        true
    }
}

/// Request line sent to a command adapter.
#[derive(Debug, Serialize, Deserialize)]
pub struct AdapterRequest<'a> {
    pub id: &'a str,
    pub document: &'a str,
    pub summary_sentence: &'a str,
}

/// Response line expected back from a command adapter.
#[derive(Debug, Serialize, Deserialize)]
pub struct AdapterResponse {
    pub metric: String,
    pub value: f64,
}

/// Adapter that shells out per record: one JSON request line on stdin, one
/// JSON response line on stdout.
pub struct CommandAdapter {
    name: String,
    program: String,
    args: Vec<String>,
    range: (f64, f64),
}

impl CommandAdapter {
    pub fn new(name: impl Into<String>, program: impl Into<String>, args: Vec<String>) -> Self {
        CommandAdapter {
            name: name.into(),
            program: program.into(),
            args,
            range: (0.0, 1.0),
        }
    }

    pub fn with_range(mut self, lo: f64, hi: f64) -> Self {
        self.range = (lo, hi);
        self
    }
}

impl MetricAdapter for CommandAdapter {
    fn name(&self) -> &str {
        &self.name
    }

    fn range(&self) -> (f64, f64) {
        self.range
    }

    fn supports_concurrent_calls(&self) -> bool {
        true
    }

    fn score(&self, id: &str, document: &str, summary_sentence: &str) -> Result<f64, String> {
        let request = serde_json::to_string(&AdapterRequest {
            id,
            document,
            summary_sentence,
        })
        .map_err(|e| e.to_string())?;
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| format!("failed to spawn {}: {e}", self.program))?;
        child
            .stdin
            .take()
            .expect("stdin was piped")
            .write_all(format!("{request}\n").as_bytes())
            .map_err(|e| format!("failed to write request: {e}"))?;
        let output = child
            .wait_with_output()
            .map_err(|e| format!("failed to read response: {e}"))?;
        if !output.status.success() {
            return Err(format!(
                "adapter exited with {}: {}",
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            ));
        }
        let text = String::from_utf8_lossy(&output.stdout);
        let line = text.lines().next().unwrap_or_default();
        let response: AdapterResponse =
            serde_json::from_str(line).map_err(|e| format!("malformed response line: {e}"))?;
        if response.metric != self.name {
            return Err(format!(
                "adapter answered for metric {:?}, expected {:?}",
                response.metric, self.name
            ));
        }
        Ok(response.value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factors::RuleTagger;

    fn scores(dae: f64, summac: f64, cloze: f64) -> BTreeMap<String, f64> {
        BTreeMap::from([
            (METRIC_DAE.to_string(), dae),
            (METRIC_SUMMAC.to_string(), summac),
            (METRIC_CLOZE.to_string(), cloze),
        ])
    }

    #[test]
    fn boundary_equality_keeps() {
        let t = Thresholds::cnn_dm();
        assert_eq!(
            filter_record(&scores(0.70, 0.45, 0.70), &t).unwrap(),
            Decision::Kept
        );
    }

    #[test]
    fn one_strict_violation_discards() {
        let t = Thresholds::cnn_dm();
        assert_eq!(
            filter_record(&scores(0.69, 0.99, 0.99), &t).unwrap(),
            Decision::Discarded
        );
    }

    #[test]
    fn xsum_thresholds() {
        let t = Thresholds::xsum();
        assert_eq!(
            filter_record(&scores(0.55, 0.03, 0.65), &t).unwrap(),
            Decision::Kept
        );
    }

    #[test]
    fn missing_metric_names_the_metric() {
        let t = Thresholds::cnn_dm();
        let mut s = scores(0.9, 0.9, 0.9);
        s.remove(METRIC_SUMMAC);
        let err = filter_record(&s, &t).unwrap_err();
        assert!(err.to_string().contains("summac"));
    }

    fn pair(id: &str, dae: f64, summac: f64, cloze: f64, rouge2p: f64) -> ScoredPair {
        let mut s = scores(dae, summac, cloze);
        s.insert(METRIC_ROUGE2P.to_string(), rouge2p);
        ScoredPair {
            id: id.into(),
            doc_id: format!("doc-{id}"),
            summary_sentence: "John Carver has been in a row since 2015.".into(),
            scores: s,
        }
    }

    #[test]
    fn all_above_thresholds_keeps_everything() {
        let pairs = vec![pair("a", 0.9, 0.9, 0.9, 0.9), pair("b", 0.8, 0.5, 0.8, 0.4)];
        let outcome = build_distilled(&pairs, &Thresholds::cnn_dm(), &RuleTagger).unwrap();
        assert_eq!(outcome.stats.kept, 2);
        assert_eq!(outcome.stats.retention, 1.0);
        assert_eq!(outcome.alerts().count(), 0);
    }

    #[test]
    fn low_everything_becomes_alert_with_factors() {
        let pairs = vec![pair("a", 0.2, 0.1, 0.3, 0.1)];
        let outcome = build_distilled(&pairs, &Thresholds::cnn_dm(), &RuleTagger).unwrap();
        let alerts: Vec<_> = outcome.alerts().collect();
        assert_eq!(alerts.len(), 1);
        assert_eq!(alerts[0].decision, Decision::Alert);
        assert!(!alerts[0].factors.is_empty());
        assert_eq!(outcome.stats.alerts, 1);
        assert_eq!(outcome.stats.retention, 0.0);
    }

    #[test]
    fn discarded_with_high_rouge_is_not_an_alert() {
        let pairs = vec![pair("a", 0.2, 0.9, 0.9, 0.8)];
        let outcome = build_distilled(&pairs, &Thresholds::cnn_dm(), &RuleTagger).unwrap();
        assert_eq!(outcome.stats.discarded, 1);
        assert_eq!(outcome.stats.alerts, 0);
        assert_eq!(outcome.records[0].decision, Decision::Discarded);
    }

    #[test]
    fn partition_is_total_and_alerts_are_discarded() {
        let pairs = vec![
            pair("a", 0.9, 0.9, 0.9, 0.9),
            pair("b", 0.2, 0.9, 0.9, 0.1),
            pair("c", 0.2, 0.9, 0.9, 0.9),
        ];
        let outcome = build_distilled(&pairs, &Thresholds::cnn_dm(), &RuleTagger).unwrap();
        assert_eq!(outcome.stats.total, 3);
        assert_eq!(outcome.stats.kept + outcome.stats.discarded, 3);
        assert!(outcome.stats.alerts <= outcome.stats.discarded);
        assert_eq!(outcome.stats.rejections.get(METRIC_DAE), Some(&2));
    }

    #[test]
    fn records_are_sorted_by_id() {
        let pairs = vec![
            pair("z", 0.9, 0.9, 0.9, 0.9),
            pair("a", 0.9, 0.9, 0.9, 0.9),
        ];
        let outcome = build_distilled(&pairs, &Thresholds::cnn_dm(), &RuleTagger).unwrap();
        let ids: Vec<&str> = outcome.records.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, vec!["a", "z"]);
    }

    #[test]
    fn score_record_merges_adapters_and_rouge() {
        let one = ConstantAdapter {
            name: METRIC_DAE.into(),
            value: 1.0,
        };
        let two = ConstantAdapter {
            name: METRIC_SUMMAC.into(),
            value: 1.0,
        };
        let got = score_record("r1", "the cat sat on the mat", "the cat sat", &[&one, &two])
            .unwrap();
        assert_eq!(got.get(METRIC_DAE), Some(&1.0));
        assert_eq!(got.get(METRIC_SUMMAC), Some(&1.0));
        assert_eq!(got.get(METRIC_ROUGE2P), Some(&1.0));
    }

    #[test]
    fn empty_adapter_list_still_scores_rouge() {
        let got = score_record("r1", "a b c", "x y z", &[]).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got.get(METRIC_ROUGE2P), Some(&0.0));
    }

    #[test]
    fn adapter_out_of_range_fails_the_record() {
        struct Wild;
        impl MetricAdapter for Wild {
            fn name(&self) -> &str {
                "wild"
            }
            fn range(&self) -> (f64, f64) {
                (0.0, 1.0)
            }
            fn score(&self, _: &str, _: &str, _: &str) -> Result<f64, String> {
                Ok(7.5)
            }
        }
        assert!(score_record("r", "d", "s", &[&Wild]).is_err());
    }

    #[test]
    fn thresholds_parse_round_trip() {
        let text = "# reference thresholds\ndataset_label = cnndm\nalpha_dae = 0.70\nalpha_summac = 0.45\nalpha_cloze = 0.70\nalpha_rouge = 0.30\n";
        let parsed = Thresholds::parse(text).unwrap();
        assert_eq!(parsed, Thresholds::cnn_dm());
    }

    #[test]
    fn thresholds_parse_rejects_bad_input() {
        assert!(Thresholds::parse("dataset_label = x\nalpha_dae = 0.5\n").is_err());
        assert!(Thresholds::parse(
            "dataset_label = x\nalpha_dae = a\nalpha_summac = 0\nalpha_cloze = 0\nalpha_rouge = 0"
        )
        .is_err());
        assert!(Thresholds::new("x", 0.5, 0.5, 0.5, 1.5).is_err());
    }
}
