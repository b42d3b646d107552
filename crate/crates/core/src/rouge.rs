//! ROUGE-2 precision over a fixed, fully specified tokenization.
//!
//! Filter decisions downstream depend on these scores bit-exactly, so the
//! tokenization is pinned here rather than left to a library: lowercase,
//! split on whitespace, strip leading/trailing non-alphanumeric characters
//! from each token, drop empty tokens.

use std::collections::HashMap;

/// Tokenizes text for n-gram scoring.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .filter_map(|raw| {
            let core = raw.trim_matches(|c: char| !c.is_alphanumeric());
            if core.is_empty() {
                None
            } else {
                Some(core.to_lowercase())
            }
        })
        .collect()
}

pub(crate) fn bigram_counts(tokens: &[String]) -> HashMap<(&str, &str), usize> {
    let mut counts = HashMap::new();
    for pair in tokens.windows(2) {
        *counts
            .entry((pair[0].as_str(), pair[1].as_str()))
            .or_insert(0) += 1;
    }
    counts
}

/// Clipped bigram precision of `candidate` against `reference` in `[0, 1]`.
///
/// A candidate with fewer than two tokens scores 0.0.
pub fn rouge2_precision(candidate: &str, reference: &str) -> f64 {
    let cand_tokens = tokenize(candidate);
    if cand_tokens.len() < 2 {
        return 0.0;
    }
    let ref_tokens = tokenize(reference);
    let cand_bigrams = bigram_counts(&cand_tokens);
    let ref_bigrams = bigram_counts(&ref_tokens);
    let total: usize = cand_bigrams.values().sum();
    let matched: usize = cand_bigrams
        .iter()
        .map(|(bigram, count)| (*count).min(ref_bigrams.get(bigram).copied().unwrap_or(0)))
        .sum();
    matched as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_overlap() {
        assert_eq!(
            rouge2_precision("the cat sat", "the cat sat on the mat"),
            1.0
        );
    }

    #[test]
    fn identity_is_one() {
        let s = "John Carver has been in a row for Newcastle united since the defeat .";
        assert_eq!(rouge2_precision(s, s), 1.0);
    }

    #[test]
    fn disjoint_is_zero() {
        assert_eq!(rouge2_precision("a b c", "x y z"), 0.0);
    }

    #[test]
    fn short_candidate_is_zero() {
        assert_eq!(rouge2_precision("word", "word word word"), 0.0);
        assert_eq!(rouge2_precision("", "anything here"), 0.0);
    }

    #[test]
    fn tokenization_strips_punctuation_and_case() {
        assert_eq!(tokenize("The cat, sat!"), vec!["the", "cat", "sat"]);
        assert_eq!(tokenize("... ,, !"), Vec::<String>::new());
        assert_eq!(tokenize("café 北京"), vec!["café", "北京"]);
    }

    #[test]
    fn clipping_counts_repeats() {
        // candidate bigram (a,a) appears twice, reference has it once
        assert_eq!(rouge2_precision("a a a", "a a b"), 0.5);
    }
}
