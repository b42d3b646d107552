//! Training-pair generation for external cloze models.
//!
//! Regular examples mask a seeded pseudo-random subset of a faithful
//! summary sentence's factors — `max(1, round(mask_rate · K))` of them — and
//! pair the rendered input with either the slot-interleaved answer string or
//! the unmasked sentence, depending on mode. Alert examples mask every
//! factor and answer `"<unk>"` throughout, teaching the model to refuse
//! sentences it cannot ground.
//!
//! Identical inputs and seed produce byte-identical examples; corpus-level
//! determinism comes from deriving each record's RNG stream from the global
//! seed and the record id.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::document::SourceDocument;
use crate::factors::FactualFactor;
use crate::mask::{
    build_masked, placeholder, render_input, CorrectionMode, MaskError, UNKNOWN_FILL,
};

/// One emitted training pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub id: String,
    pub input: String,
    pub target: String,
    pub mode: CorrectionMode,
    pub mask_indices: Vec<usize>,
    pub is_alert: bool,
}

/// A record either yields an example or is skipped (no factors to mask).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BuildOutcome {
    Example(TrainingExample),
    Skipped,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainParams {
    pub mask_rate: f64,
    pub seed: u64,
    pub mode: CorrectionMode,
    pub max_doc_chars: usize,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            mask_rate: 0.5,
            seed: 0,
            mode: CorrectionMode::SlotFill,
            max_doc_chars: 4000,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("mask_rate must lie in (0, 1], got {0}")]
    InvalidMaskRate(f64),
    #[error("record {id}: {source}")]
    Mask {
        id: String,
        #[source]
        source: MaskError,
    },
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

fn slot_target(fills: impl Iterator<Item = String>) -> String {
    fills
        .enumerate()
        .map(|(slot, fill)| format!("{} {}", placeholder(slot), fill))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Builds one regular example: a seeded subset of factors masked, target per
/// mode grammar.
pub fn make_training_example(
    document: &SourceDocument,
    id: &str,
    summary_sentence: &str,
    factors: &[FactualFactor],
    params: &TrainParams,
) -> Result<BuildOutcome, TrainError> {
    if !(params.mask_rate > 0.0 && params.mask_rate <= 1.0) {
        return Err(TrainError::InvalidMaskRate(params.mask_rate));
    }
    if factors.is_empty() {
        return Ok(BuildOutcome::Skipped);
    }
    let k = factors.len();
    let count = ((params.mask_rate * k as f64).round() as usize).clamp(1, k);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ fnv1a64(id.as_bytes()));
    let mut selection: Vec<usize> = rand::seq::index::sample(&mut rng, k, count).into_vec();
    selection.sort_unstable();

    let masked = build_masked(summary_sentence, factors, &selection, params.mode).map_err(
        |source| TrainError::Mask {
            id: id.to_string(),
            source,
        },
    )?;
    let input = render_input(document, &masked, params.max_doc_chars);
    let target = match params.mode {
        CorrectionMode::SlotFill => {
            slot_target(masked.factors.iter().map(|f| f.surface.clone()))
        }
        CorrectionMode::FullSequence => summary_sentence.to_string(),
    };
    Ok(BuildOutcome::Example(TrainingExample {
        id: id.to_string(),
        input,
        target,
        mode: params.mode,
        mask_indices: selection,
        is_alert: false,
    }))
}

/// Builds one alert example: every factor masked, every answer `"<unk>"`.
pub fn make_alert_example(
    document: &SourceDocument,
    id: &str,
    summary_sentence: &str,
    factors: &[FactualFactor],
    mode: CorrectionMode,
    max_doc_chars: usize,
) -> Result<BuildOutcome, TrainError> {
    if factors.is_empty() {
        return Ok(BuildOutcome::Skipped);
    }
    let selection: Vec<usize> = (0..factors.len()).collect();
    let masked = build_masked(summary_sentence, factors, &selection, mode).map_err(|source| {
        TrainError::Mask {
            id: id.to_string(),
            source,
        }
    })?;
    let input = render_input(document, &masked, max_doc_chars);
    let target = match mode {
        CorrectionMode::SlotFill => {
            slot_target(std::iter::repeat_n(UNKNOWN_FILL.to_string(), factors.len()))
        }
        CorrectionMode::FullSequence => {
            let mut out = String::with_capacity(summary_sentence.len());
            let mut cursor = 0usize;
            for factor in &masked.factors {
                out.push_str(&summary_sentence[cursor..factor.start]);
                out.push_str(UNKNOWN_FILL);
                cursor = factor.end;
            }
            out.push_str(&summary_sentence[cursor..]);
            out
        }
    };
    Ok(BuildOutcome::Example(TrainingExample {
        id: id.to_string(),
        input,
        target,
        mode,
        mask_indices: selection,
        is_alert: true,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factors::rule_based_tag;

    fn doc() -> SourceDocument {
        SourceDocument::from_text("d1", "Rod Temperton wrote Thriller and died at 66 in London.")
    }

    #[test]
    fn mask_count_law() {
        let sentence = "Alice Smith met Bob Jones in Paris on 12 October 2016.";
        let factors = rule_based_tag(sentence);
        let k = factors.len();
        assert!(k >= 4);
        let params = TrainParams {
            mask_rate: 0.5,
            seed: 7,
            ..TrainParams::default()
        };
        match make_training_example(&doc(), "r1", sentence, &factors, &params).unwrap() {
            BuildOutcome::Example(example) => {
                assert_eq!(
                    example.mask_indices.len(),
                    ((0.5 * k as f64).round() as usize).clamp(1, k)
                );
            }
            BuildOutcome::Skipped => panic!("should not skip"),
        }
    }

    #[test]
    fn same_seed_same_example() {
        let sentence = "Alice Smith met Bob Jones in Paris on 12 October 2016.";
        let factors = rule_based_tag(sentence);
        let params = TrainParams {
            seed: 42,
            ..TrainParams::default()
        };
        let a = make_training_example(&doc(), "r1", sentence, &factors, &params).unwrap();
        let b = make_training_example(&doc(), "r1", sentence, &factors, &params).unwrap();
        assert_eq!(a, b);
        let other = TrainParams {
            seed: 43,
            ..TrainParams::default()
        };
        // a different seed is allowed to pick a different subset; determinism
        // is per (inputs, seed)
        let c = make_training_example(&doc(), "r1", sentence, &factors, &other).unwrap();
        let BuildOutcome::Example(c) = c else { panic!() };
        assert_eq!(
            c.mask_indices.len(),
            match &a {
                BuildOutcome::Example(e) => e.mask_indices.len(),
                _ => unreachable!(),
            }
        );
    }

    #[test]
    fn slot_fill_target_grammar() {
        let sentence = "Old Temperton has died at the age of 66.";
        let factors = rule_based_tag(sentence);
        assert_eq!(factors.len(), 2);
        let params = TrainParams {
            mask_rate: 1.0,
            ..TrainParams::default()
        };
        let BuildOutcome::Example(example) =
            make_training_example(&doc(), "r1", sentence, &factors, &params).unwrap()
        else {
            panic!()
        };
        assert_eq!(example.target, "⟨M0⟩ Old Temperton ⟨M1⟩ 66");
        assert_eq!(example.mask_indices, vec![0, 1]);
    }

    #[test]
    fn full_sequence_target_is_the_sentence() {
        let sentence = "Old Temperton has died at the age of 66.";
        let factors = rule_based_tag(sentence);
        let params = TrainParams {
            mode: CorrectionMode::FullSequence,
            ..TrainParams::default()
        };
        let BuildOutcome::Example(example) =
            make_training_example(&doc(), "r1", sentence, &factors, &params).unwrap()
        else {
            panic!()
        };
        assert_eq!(example.target, sentence);
    }

    #[test]
    fn zero_factors_skip() {
        let params = TrainParams::default();
        assert_eq!(
            make_training_example(&doc(), "r1", "no factors here", &[], &params).unwrap(),
            BuildOutcome::Skipped
        );
        assert_eq!(
            make_alert_example(
                &doc(),
                "r1",
                "no factors here",
                &[],
                CorrectionMode::SlotFill,
                100
            )
            .unwrap(),
            BuildOutcome::Skipped
        );
    }

    #[test]
    fn invalid_mask_rate_is_rejected() {
        let sentence = "Old Temperton died.";
        let factors = rule_based_tag(sentence);
        for rate in [0.0, -0.5, 1.5] {
            let params = TrainParams {
                mask_rate: rate,
                ..TrainParams::default()
            };
            assert!(make_training_example(&doc(), "r", sentence, &factors, &params).is_err());
        }
    }

    #[test]
    fn alert_example_masks_everything_with_unknowns() {
        let sentence = "Old Carver visited London in 2015.";
        let factors = rule_based_tag(sentence);
        assert_eq!(factors.len(), 3);
        let BuildOutcome::Example(example) = make_alert_example(
            &doc(),
            "r1",
            sentence,
            &factors,
            CorrectionMode::SlotFill,
            4000,
        )
        .unwrap() else {
            panic!()
        };
        assert!(example.is_alert);
        assert_eq!(example.mask_indices, vec![0, 1, 2]);
        assert_eq!(example.target, "⟨M0⟩ <unk> ⟨M1⟩ <unk> ⟨M2⟩ <unk>");
    }

    #[test]
    fn alert_full_sequence_replaces_surfaces() {
        let sentence = "John Carver has been in a row";
        let factors = rule_based_tag(sentence);
        assert_eq!(factors.len(), 1);
        let BuildOutcome::Example(example) = make_alert_example(
            &doc(),
            "r1",
            sentence,
            &factors,
            CorrectionMode::FullSequence,
            4000,
        )
        .unwrap() else {
            panic!()
        };
        assert_eq!(example.target, "<unk> has been in a row");
    }

    #[test]
    fn non_alert_slot_targets_reslice_the_sentence() {
        let sentence = "Alice Smith met Bob Jones in Paris.";
        let factors = rule_based_tag(sentence);
        let params = TrainParams {
            mask_rate: 1.0,
            ..TrainParams::default()
        };
        let BuildOutcome::Example(example) =
            make_training_example(&doc(), "r1", sentence, &factors, &params).unwrap()
        else {
            panic!()
        };
        for (slot, &fi) in example.mask_indices.iter().enumerate() {
            let f = &factors[fi];
            assert!(example.target.contains(&format!("{} {}", placeholder(slot), f.surface)));
            assert_eq!(&sentence[f.start..f.end], f.surface);
        }
    }
}
