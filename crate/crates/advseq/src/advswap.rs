//! Explicit adversarial samples: pick a target context over y, select the
//! source positions most responsible for it, and swap each selected token
//! along the gradient-ascent direction in embedding space.

use rand::Rng;
use std::collections::{BTreeSet, HashSet};
use thiserror::Error;

use crate::autodiff::{Array, Graph};
use crate::model::{
    decoder_input, forward, BoundParams, ParamSet, TokenId, TokenSeq, NUM_SPECIALS,
};
use crate::objectives::{nll_graph, ObjectiveError};

/// Half-open [start, end) spans over target positions.
pub type SpanList = Vec<(usize, usize)>;

pub fn spans_to_mask(spans: &SpanList, len: usize) -> Vec<bool> {
    let mut mask = vec![false; len];
    for &(s, e) in spans {
        for m in mask.iter_mut().take(e.min(len)).skip(s) {
            *m = true;
        }
    }
    mask
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SelectStrategy {
    GradientRanking,
    WordOverlapping,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContextMode {
    Whole,
    Spans,
}

#[derive(Debug, Error)]
pub enum SwapError {
    #[error("no eligible (non-special) source positions")]
    EmptyEligible,
    #[error("vocabulary has no candidate replacement tokens")]
    NoCandidates,
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
}

/// A fully resolved swap decision for one sample.
#[derive(Clone, Debug)]
pub struct SwapPlan {
    pub target_context: SpanList,
    pub selected_positions: BTreeSet<usize>,
    pub replacements: Vec<(usize, TokenId)>,
    pub strategy: SelectStrategy,
    pub k: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct AdvSwapConfig {
    pub strategy: SelectStrategy,
    pub context_mode: ContextMode,
    pub k: f64,
    pub num_spans: usize,
    pub span_len: usize,
    pub smoothing: f64,
    /// attempts per span at drawing one that overlaps x before the
    /// whole-sequence fallback
    pub retry_budget: usize,
}

impl Default for AdvSwapConfig {
    fn default() -> Self {
        AdvSwapConfig {
            strategy: SelectStrategy::GradientRanking,
            context_mode: ContextMode::Spans,
            k: 0.15,
            num_spans: 2,
            span_len: 3,
            smoothing: 0.1,
            retry_budget: 16,
        }
    }
}

fn eligible_positions(x: &TokenSeq) -> Vec<usize> {
    x.ids
        .iter()
        .enumerate()
        .filter(|(_, &id)| id >= NUM_SPECIALS)
        .map(|(i, _)| i)
        .collect()
}

/// Per-position embedding-gradient rows of the context-restricted loss,
/// from one backward pass on the clean forward.
fn source_grad_rows(
    params: &ParamSet,
    x: &TokenSeq,
    y: &TokenSeq,
    mask: &[bool],
    smoothing: f64,
) -> Result<Array, SwapError> {
    let graph = Graph::new();
    let bp = BoundParams::bind(&graph, params);
    let dec_ids = decoder_input(y);
    let pass = forward(&graph, &bp, &params.cfg, &x.ids, &dec_ids, &[]);
    pass.enc_sites[0].retain_grad();
    let loss = nll_graph(&graph, &pass.log_probs, &y.ids, smoothing, Some(mask));
    graph.backward(&loss)?;
    Ok(pass.enc_sites[0].grad()?)
}

/// Rank non-special source positions by the two-norm of their embedding
/// gradient under the context-restricted loss; return the top ceil(k*n).
pub fn select_gradient_ranking(
    params: &ParamSet,
    x: &TokenSeq,
    y: &TokenSeq,
    target_context: &SpanList,
    k: f64,
) -> Result<BTreeSet<usize>, SwapError> {
    assert!(k > 0.0 && k <= 1.0, "k must be in (0,1]");
    assert!(!target_context.is_empty(), "target context must be non-empty");
    let eligible = eligible_positions(x);
    if eligible.is_empty() {
        return Err(SwapError::EmptyEligible);
    }
    let mask = spans_to_mask(target_context, y.len());
    let grads = source_grad_rows(params, x, y, &mask, 0.0)?;
    let scored: Vec<(usize, f64)> = eligible
        .iter()
        .map(|&pos| {
            let norm = grads.row(pos).iter().map(|v| v * v).sum::<f64>().sqrt();
            (pos, norm)
        })
        .collect();
    Ok(rank_top_k(scored, k))
}

/// Top ceil(k*n) positions by score, descending, ties toward the smaller
/// position index.
pub fn rank_top_k(mut scored: Vec<(usize, f64)>, k: f64) -> BTreeSet<usize> {
    let n = scored.len();
    // stable descending sort; equal scores keep the smaller position first
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let take = ((k * n as f64).ceil() as usize).max(1);
    scored.into_iter().take(take).map(|(p, _)| p).collect()
}

/// Positions in x whose token id occurs inside the target context.
pub fn select_word_overlapping(
    x: &TokenSeq,
    y: &TokenSeq,
    target_context: &SpanList,
) -> BTreeSet<usize> {
    let mask = spans_to_mask(target_context, y.len());
    let context_tokens: HashSet<TokenId> = y
        .ids
        .iter()
        .zip(&mask)
        .filter(|(_, &m)| m)
        .map(|(&id, _)| id)
        .collect();
    x.ids
        .iter()
        .enumerate()
        .filter(|(_, &id)| id >= NUM_SPECIALS && context_tokens.contains(&id))
        .map(|(i, _)| i)
        .collect()
}

/// Sample the target context: the whole target, or `num_spans` spans each
/// required to share a token with x (falling back to the whole target when
/// the retry budget runs out).
pub fn pick_target_context<R: Rng>(
    x: &TokenSeq,
    y: &TokenSeq,
    mode: ContextMode,
    num_spans: usize,
    span_len: usize,
    retry_budget: usize,
    rng: &mut R,
) -> SpanList {
    let whole: SpanList = vec![(0, y.len())];
    if mode == ContextMode::Whole || span_len >= y.len() {
        return whole;
    }
    let x_tokens: HashSet<TokenId> = x.ids.iter().copied().collect();
    let mut spans = SpanList::new();
    for _ in 0..num_spans.max(1) {
        let mut found = None;
        for _ in 0..retry_budget.max(1) {
            let start = rng.gen_range(0..=y.len() - span_len);
            let overlaps = y.ids[start..start + span_len]
                .iter()
                .any(|id| x_tokens.contains(id));
            if overlaps {
                found = Some((start, start + span_len));
                break;
            }
        }
        match found {
            Some(span) => spans.push(span),
            None => return whole,
        }
    }
    spans
}

/// Eq.-7 style replacement: the vocabulary token (excluding specials and
/// the original) whose embedding offset from the original best aligns with
/// the gradient. A vanishing gradient degrades to the nearest embedding
/// neighbor. Ties break toward the smaller token id.
pub fn swap_token(
    params: &ParamSet,
    x: &TokenSeq,
    position: usize,
    grad_at_position: &[f64],
) -> Result<TokenId, SwapError> {
    let emb = params.get("emb");
    let dim = emb.shape[1];
    assert_eq!(grad_at_position.len(), dim, "gradient width mismatch");
    let original = x.ids[position];
    let e_orig = emb.row(original);
    let gnorm = grad_at_position.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut best: Option<(f64, TokenId)> = None;
    for cand in NUM_SPECIALS..params.cfg.vocab_size {
        if cand == original {
            continue;
        }
        let e_cand = emb.row(cand);
        let score = if gnorm < 1e-12 {
            // nearest neighbor: maximize negative squared distance
            -e_cand
                .iter()
                .zip(e_orig)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        } else {
            let mut dot = 0.0;
            let mut dnorm = 0.0;
            for ((c, o), g) in e_cand.iter().zip(e_orig).zip(grad_at_position) {
                let d = c - o;
                dot += d * g;
                dnorm += d * d;
            }
            let dnorm = dnorm.sqrt();
            if dnorm < 1e-12 {
                f64::NEG_INFINITY
            } else {
                dot / (dnorm * gnorm)
            }
        };
        let better = match best {
            None => true,
            Some((s, _)) => score > s,
        };
        if better {
            best = Some((score, cand));
        }
    }
    best.map(|(_, id)| id).ok_or(SwapError::NoCandidates)
}

/// Build the explicit adversarial sample: one backward pass supplies all
/// per-position gradients, every selected position is swapped once.
pub fn build_advswap<R: Rng>(
    params: &ParamSet,
    x: &TokenSeq,
    y: &TokenSeq,
    cfg: &AdvSwapConfig,
    rng: &mut R,
) -> Result<(TokenSeq, Vec<bool>, SwapPlan), SwapError> {
    let context = pick_target_context(
        x,
        y,
        cfg.context_mode,
        cfg.num_spans,
        cfg.span_len,
        cfg.retry_budget,
        rng,
    );
    let mask = spans_to_mask(&context, y.len());
    let selected = match cfg.strategy {
        SelectStrategy::GradientRanking => {
            match select_gradient_ranking(params, x, y, &context, cfg.k) {
                Ok(s) => s,
                Err(SwapError::EmptyEligible) => BTreeSet::new(),
                Err(e) => return Err(e),
            }
        }
        SelectStrategy::WordOverlapping => select_word_overlapping(x, y, &context),
    };
    let mut x_adv = x.clone();
    let mut replacements = Vec::new();
    if !selected.is_empty() {
        let grads = source_grad_rows(params, x, y, &mask, cfg.smoothing)?;
        for &pos in &selected {
            let new_id = swap_token(params, x, pos, grads.row(pos))?;
            x_adv.ids[pos] = new_id;
            replacements.push((pos, new_id));
        }
    }
    let plan = SwapPlan {
        target_context: context,
        selected_positions: selected,
        replacements,
        strategy: cfg.strategy,
        k: cfg.k,
    };
    Ok((x_adv, mask, plan))
}
