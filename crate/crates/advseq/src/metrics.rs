//! Evaluation metrics: smoothed sentence BLEU, token-level Levenshtein
//! distance, perplexity, and a set-coverage table-faithfulness score
//! (`parent_lite`). All pure functions over token id sequences.

use std::collections::HashMap;
use std::collections::HashSet;

use crate::model::{ParamSet, TokenId, TokenSeq};

/// Sentence BLEU on [0,1]: geometric mean of modified n-gram precisions
/// n=1..4 with add-one smoothing on zero counts for n >= 2, times the
/// brevity penalty. Zero unigram matches floor the score to 0.
pub fn bleu(candidate: &[TokenId], reference: &[TokenId]) -> f64 {
    assert!(!reference.is_empty(), "bleu: empty reference");
    if candidate.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let cand_counts = ngram_counts(candidate, n);
        let ref_counts = ngram_counts(reference, n);
        let total: usize = cand_counts.values().sum();
        let matched: usize = cand_counts
            .iter()
            .map(|(ng, c)| (*c).min(ref_counts.get(ng).copied().unwrap_or(0)))
            .sum();
        let p = if matched > 0 {
            matched as f64 / total as f64
        } else if n == 1 {
            return 0.0;
        } else {
            // add-one smoothing on zero counts; also covers candidates
            // shorter than n (total = 0 -> p = 1)
            1.0 / (total as f64 + 1.0)
        };
        log_sum += p.ln();
    }
    let bp = if candidate.len() < reference.len() {
        (1.0 - reference.len() as f64 / candidate.len() as f64).exp()
    } else {
        1.0
    };
    bp * (log_sum / 4.0).exp()
}

fn ngram_counts(seq: &[TokenId], n: usize) -> HashMap<&[TokenId], usize> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Token-level Levenshtein distance with unit costs.
pub fn edit_distance(a: &[TokenId], b: &[TokenId]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, &ai) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &bj) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ai != bj);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// exp(-logprob/|y|) of the reference under the model.
pub fn perplexity(params: &ParamSet, x: &TokenSeq, y: &TokenSeq) -> f64 {
    assert!(!y.ids.is_empty(), "perplexity: empty target");
    let lp = crate::model::sequence_logprob(params, x, y);
    (-lp / y.ids.len() as f64).exp()
}

/// A toy table: ordered (key, values) pairs with distinct keys.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TableRecord {
    pub pairs: Vec<(TokenId, Vec<TokenId>)>,
}

impl TableRecord {
    pub fn value_tokens(&self) -> Vec<TokenId> {
        self.pairs.iter().flat_map(|(_, vs)| vs.iter().copied()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParentScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Set-coverage precision/recall against the table values and reference.
///
/// Precision: fraction of generated content tokens (those not on the
/// stop list) found in table values or the reference. Recall: fraction
/// of table value tokens mentioned in the generation.
pub fn parent_lite(
    generated: &[TokenId],
    table: &TableRecord,
    reference: &[TokenId],
    stop_list: &HashSet<TokenId>,
) -> ParentScore {
    let values: HashSet<TokenId> = table.value_tokens().into_iter().collect();
    let ref_set: HashSet<TokenId> = reference.iter().copied().collect();
    let gen_set: HashSet<TokenId> = generated.iter().copied().collect();

    let content: Vec<TokenId> = generated
        .iter()
        .copied()
        .filter(|t| !stop_list.contains(t))
        .collect();
    let precision = if content.is_empty() {
        0.0
    } else {
        let covered = content
            .iter()
            .filter(|t| values.contains(t) || ref_set.contains(t))
            .count();
        covered as f64 / content.len() as f64
    };
    let recall = if values.is_empty() {
        0.0
    } else {
        let mentioned = values.iter().filter(|t| gen_set.contains(t)).count();
        mentioned as f64 / values.len() as f64
    };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    ParentScore { precision, recall, f1 }
}
