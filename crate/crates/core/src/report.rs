//! Report tables over scored samples: per-error-type metric averages and
//! percentile-binned box statistics. Output is CSV; plotting stays out of
//! scope.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The closed error-type label vocabulary; `NE` marks samples without
/// factual errors.
pub const ERROR_TYPE_LABELS: [&str; 9] = [
    "PredE", "EntE", "CircE", "OutE", "GramE", "LinkE", "CorefE", "OtherE", "NE",
];

/// One sample with its per-metric scores and optional error-type label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub id: String,
    pub scores: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_type: Option<String>,
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("samples without an error-type label: {}", ids.join(", "))]
    UnlabeledSamples { ids: Vec<String> },
    #[error("sample {id} carries unknown error-type label {label:?}")]
    InvalidLabel { id: String, label: String },
    #[error("need at least {needed} samples for {bins} bins, got {got}")]
    TooFewSamples {
        needed: usize,
        bins: usize,
        got: usize,
    },
    #[error("need at least 2 bins, got {0}")]
    TooFewBins(usize),
    #[error("samples missing anchor metric {metric:?}: {}", ids.join(", "))]
    MissingAnchor { metric: String, ids: Vec<String> },
}

/// metric × error-type table of mean scores; a missing cell means no sample
/// carried that (metric, label) combination.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorTypeTable {
    pub metrics: Vec<String>,
    pub cells: BTreeMap<(String, String), f64>,
}

/// Computes the mean score of every metric per error-type label.
pub fn error_type_averages(samples: &[ScoredSample]) -> Result<ErrorTypeTable, ReportError> {
    let unlabeled: Vec<String> = samples
        .iter()
        .filter(|s| s.error_type.is_none())
        .map(|s| s.id.clone())
        .collect();
    if !unlabeled.is_empty() {
        return Err(ReportError::UnlabeledSamples { ids: unlabeled });
    }
    for sample in samples {
        let label = sample.error_type.as_deref().unwrap_or_default();
        if !ERROR_TYPE_LABELS.contains(&label) {
            return Err(ReportError::InvalidLabel {
                id: sample.id.clone(),
                label: label.to_string(),
            });
        }
    }

    let metrics: BTreeSet<String> = samples
        .iter()
        .flat_map(|s| s.scores.keys().cloned())
        .collect();
    let mut sums: BTreeMap<(String, String), (f64, usize)> = BTreeMap::new();
    for sample in samples {
        let label = sample.error_type.clone().unwrap_or_default();
        for (metric, value) in &sample.scores {
            let entry = sums
                .entry((metric.clone(), label.clone()))
                .or_insert((0.0, 0));
            entry.0 += value;
            entry.1 += 1;
        }
    }
    let cells = sums
        .into_iter()
        .map(|(key, (sum, n))| (key, sum / n as f64))
        .collect();
    Ok(ErrorTypeTable {
        metrics: metrics.into_iter().collect(),
        cells,
    })
}

impl ErrorTypeTable {
    /// CSV with one row per metric and one column per label; absent cells
    /// stay empty rather than zero.
    pub fn to_csv(&self) -> String {
        let mut writer = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["metric".to_string()];
        header.extend(ERROR_TYPE_LABELS.iter().map(|l| l.to_string()));
        writer.write_record(&header).expect("in-memory write");
        for metric in &self.metrics {
            let mut row = vec![metric.clone()];
            for label in ERROR_TYPE_LABELS {
                row.push(
                    self.cells
                        .get(&(metric.clone(), label.to_string()))
                        .map(|v| v.to_string())
                        .unwrap_or_default(),
                );
            }
            writer.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("utf-8")
    }
}

/// Box statistics for one (bin, metric) cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BinRow {
    pub bin: usize,
    pub size: usize,
    pub metric: String,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Quantile by rank interpolation: linear between the two closest ranks.
/// `values` must be sorted ascending and non-empty.
fn quantile(values: &[f64], q: f64) -> f64 {
    let pos = q * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        values[lo]
    } else {
        values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
    }
}

/// Groups samples into equal-population bins by the anchor metric's rank
/// (ties broken by sample id) and computes box statistics of every other
/// metric within each bin.
pub fn percentile_bins(
    samples: &[ScoredSample],
    anchor: &str,
    n_bins: usize,
) -> Result<Vec<BinRow>, ReportError> {
    if n_bins < 2 {
        return Err(ReportError::TooFewBins(n_bins));
    }
    if samples.len() < n_bins {
        return Err(ReportError::TooFewSamples {
            needed: n_bins,
            bins: n_bins,
            got: samples.len(),
        });
    }
    let missing: Vec<String> = samples
        .iter()
        .filter(|s| !s.scores.contains_key(anchor))
        .map(|s| s.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(ReportError::MissingAnchor {
            metric: anchor.to_string(),
            ids: missing,
        });
    }

    let mut order: Vec<&ScoredSample> = samples.iter().collect();
    order.sort_by(|a, b| {
        a.scores[anchor]
            .partial_cmp(&b.scores[anchor])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.id.cmp(&b.id))
    });

    let metrics: BTreeSet<&String> = samples
        .iter()
        .flat_map(|s| s.scores.keys())
        .filter(|m| m.as_str() != anchor)
        .collect();

    let n = order.len();
    let mut rows = Vec::new();
    for bin in 0..n_bins {
        let from = bin * n / n_bins;
        let to = (bin + 1) * n / n_bins;
        let members = &order[from..to];
        for metric in &metrics {
            let mut values: Vec<f64> = members
                .iter()
                .filter_map(|s| s.scores.get(metric.as_str()).copied())
                .collect();
            if values.is_empty() {
                continue;
            }
            values.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            rows.push(BinRow {
                bin,
                size: members.len(),
                metric: (*metric).clone(),
                min: values[0],
                q1: quantile(&values, 0.25),
                median: quantile(&values, 0.5),
                q3: quantile(&values, 0.75),
                max: *values.last().expect("non-empty"),
            });
        }
    }
    Ok(rows)
}

/// CSV for bin rows: `bin,size,metric,min,q1,median,q3,max`.
pub fn bins_to_csv(rows: &[BinRow]) -> String {
    let mut writer = csv::Writer::from_writer(Vec::new());
    writer
        .write_record(["bin", "size", "metric", "min", "q1", "median", "q3", "max"])
        .expect("in-memory write");
    for row in rows {
        writer
            .write_record([
                row.bin.to_string(),
                row.size.to_string(),
                row.metric.clone(),
                row.min.to_string(),
                row.q1.to_string(),
                row.median.to_string(),
                row.q3.to_string(),
                row.max.to_string(),
            ])
            .expect("in-memory write");
    }
    String::from_utf8(writer.into_inner().expect("in-memory flush")).expect("utf-8")
}
