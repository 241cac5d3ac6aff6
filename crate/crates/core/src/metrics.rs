//! Answer-quality metrics: token F1, ROUGE-1, ROUGE-L and normalized
//! Levenshtein similarity, with max aggregation over multiple references.
//!
//! Inputs are normalized first: lowercase, punctuation removed, whitespace
//! collapsed. [`Normalization::StripArticles`] additionally drops `a`/`an`/`the`
//! (the SQuAD convention). No stemming.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("no reference answers to score against")]
    NoReferences,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalScores {
    pub f1: f64,
    pub rouge1: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub lev: f64,
}

impl EvalScores {
    pub fn max(self, other: Self) -> Self {
        Self {
            f1: self.f1.max(other.f1),
            rouge1: self.rouge1.max(other.rouge1),
            rouge_l: self.rouge_l.max(other.rouge_l),
            lev: self.lev.max(other.lev),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Lowercase, strip punctuation, collapse whitespace.
    #[default]
    Basic,
    /// `Basic` plus removal of the articles `a`, `an`, `the`.
    StripArticles,
}

/// The normalized answer string under [`Normalization::Basic`].
pub fn normalize_answer(text: &str) -> String {
    normalize_answer_with(Normalization::Basic, text)
}

pub fn normalize_answer_with(norm: Normalization, text: &str) -> String {
    let lower = text.to_lowercase();
    let no_punct: String = lower
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect();
    no_punct
        .split_whitespace()
        .filter(|w| norm == Normalization::Basic || !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn answer_tokens(norm: Normalization, text: &str) -> Vec<String> {
    normalize_answer_with(norm, text)
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

fn f_measure(matched: usize, pred_len: usize, ref_len: usize) -> f64 {
    if pred_len == 0 && ref_len == 0 {
        return 1.0;
    }
    if pred_len == 0 || ref_len == 0 || matched == 0 {
        return 0.0;
    }
    let p = matched as f64 / pred_len as f64;
    let r = matched as f64 / ref_len as f64;
    2.0 * p * r / (p + r)
}

/// Size of the multiset intersection of two token lists.
pub fn unigram_overlap(pred: &[String], reference: &[String]) -> usize {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in reference {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut overlap = 0;
    for t in pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    overlap
}

pub fn token_f1(prediction: &str, reference: &str) -> f64 {
    token_f1_with(Normalization::Basic, prediction, reference)
}

pub fn token_f1_with(norm: Normalization, prediction: &str, reference: &str) -> f64 {
    let p = answer_tokens(norm, prediction);
    let r = answer_tokens(norm, reference);
    f_measure(unigram_overlap(&p, &r), p.len(), r.len())
}

/// Unigram-overlap F-measure. Numerically identical to [`token_f1`] under the
/// shared normalization; kept separate because the two are reported separately.
pub fn rouge1(prediction: &str, reference: &str) -> f64 {
    rouge1_with(Normalization::Basic, prediction, reference)
}

pub fn rouge1_with(norm: Normalization, prediction: &str, reference: &str) -> f64 {
    let p = answer_tokens(norm, prediction);
    let r = answer_tokens(norm, reference);
    let overlap = unigram_overlap(&p, &r);
    f_measure(overlap, p.len(), r.len())
}

/// Longest common subsequence length with a two-row table.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l(prediction: &str, reference: &str) -> f64 {
    rouge_l_with(Normalization::Basic, prediction, reference)
}

pub fn rouge_l_with(norm: Normalization, prediction: &str, reference: &str) -> f64 {
    let p = answer_tokens(norm, prediction);
    let r = answer_tokens(norm, reference);
    f_measure(lcs_len(&p, &r), p.len(), r.len())
}

/// Character-level edit distance (insert, delete, substitute; unit costs).
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if ca == cb {
                diag
            } else {
                1 + diag.min(up).min(row[j])
            };
            diag = up;
        }
    }
    row[b.len()]
}

/// `1 - dist / max(len)` over normalized strings; 1 when both are empty.
pub fn levenshtein_similarity(prediction: &str, reference: &str) -> f64 {
    levenshtein_similarity_with(Normalization::Basic, prediction, reference)
}

pub fn levenshtein_similarity_with(norm: Normalization, prediction: &str, reference: &str) -> f64 {
    let p = normalize_answer_with(norm, prediction);
    let r = normalize_answer_with(norm, reference);
    let longest = p.chars().count().max(r.chars().count());
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein(&p, &r) as f64 / longest as f64
}

pub fn score(norm: Normalization, prediction: &str, reference: &str) -> EvalScores {
    EvalScores {
        f1: token_f1_with(norm, prediction, reference),
        rouge1: rouge1_with(norm, prediction, reference),
        rouge_l: rouge_l_with(norm, prediction, reference),
        lev: levenshtein_similarity_with(norm, prediction, reference),
    }
}

/// Per-metric maximum over the references.
pub fn score_against_references(
    prediction: &str,
    references: &[String],
) -> Result<EvalScores, MetricsError> {
    score_against_references_with(Normalization::Basic, prediction, references)
}

pub fn score_against_references_with(
    norm: Normalization,
    prediction: &str,
    references: &[String],
) -> Result<EvalScores, MetricsError> {
    references
        .iter()
        .map(|r| score(norm, prediction, r))
        .reduce(EvalScores::max)
        .ok_or(MetricsError::NoReferences)
}
