//! Exact attention mass per candidate, summed over layers, heads and query rows.
//!
//! For each `(layer, head, query row)` the logits `q . k / sqrt(d)` over the
//! candidates are causally masked (a candidate after the query row is
//! excluded), softmax-normalized with max subtraction, and added to the
//! candidate's total. Each `(layer, head)` pair produces a partial vector
//! (query rows accumulated in the given order); partials are then reduced in
//! `(layer, head)` order, so the result is bitwise identical whatever the
//! number of rayon workers.

use rayon::prelude::*;
use thiserror::Error;

use crate::trace::KvTrace;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScoringError {
    #[error("candidate set is empty")]
    EmptyCandidates,
    #[error("query row set is empty")]
    EmptyQueryRows,
    #[error("position {position} out of range for {num_tokens} tokens")]
    OutOfRange { position: usize, num_tokens: usize },
    #[error("query row {0} sees no unmasked candidate")]
    NoVisibleCandidates(usize),
}

/// Aggregate attention mass per candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub candidate_positions: Vec<usize>,
    pub scores: Vec<f64>,
}

impl ScoreVector {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.candidate_positions
            .iter()
            .copied()
            .zip(self.scores.iter().copied())
    }
}

pub(crate) fn check_positions(positions: &[usize], num_tokens: usize) -> Result<(), ScoringError> {
    match positions.iter().find(|&&p| p >= num_tokens) {
        Some(&position) => Err(ScoringError::OutOfRange {
            position,
            num_tokens,
        }),
        None => Ok(()),
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum()
}

/// Attention mass of one (layer, head) slot over all query rows.
fn slot_scores(
    trace: &KvTrace,
    layer: usize,
    head: usize,
    candidates: &[usize],
    query_rows: &[usize],
) -> Result<Vec<f64>, ScoringError> {
    let scale = 1.0 / (trace.shape().head_dim as f64).sqrt();
    let mut acc = vec![0.0f64; candidates.len()];
    let mut logits = vec![f64::NEG_INFINITY; candidates.len()];
    for &row in query_rows {
        let q = trace.query(row, layer, head);
        let mut max = f64::NEG_INFINITY;
        for (logit, &c) in logits.iter_mut().zip(candidates) {
            *logit = if c <= row {
                dot(q, trace.key(c, layer, head)) * scale
            } else {
                f64::NEG_INFINITY
            };
            max = max.max(*logit);
        }
        if max == f64::NEG_INFINITY {
            return Err(ScoringError::NoVisibleCandidates(row));
        }
        let mut z = 0.0;
        for logit in logits.iter_mut() {
            *logit = (*logit - max).exp();
            z += *logit;
        }
        for (a, w) in acc.iter_mut().zip(&logits) {
            *a += w / z;
        }
    }
    Ok(acc)
}

/// Sums causal softmax attention over every layer, head and query row.
pub fn exact_scores(
    trace: &KvTrace,
    candidates: &[usize],
    query_rows: &[usize],
) -> Result<ScoreVector, ScoringError> {
    if candidates.is_empty() {
        return Err(ScoringError::EmptyCandidates);
    }
    if query_rows.is_empty() {
        return Err(ScoringError::EmptyQueryRows);
    }
    check_positions(candidates, trace.num_tokens())?;
    check_positions(query_rows, trace.num_tokens())?;

    let shape = trace.shape();
    let partials: Vec<Vec<f64>> = (0..shape.slots())
        .into_par_iter()
        .map(|slot| {
            slot_scores(
                trace,
                slot / shape.num_heads,
                slot % shape.num_heads,
                candidates,
                query_rows,
            )
        })
        .collect::<Result<_, _>>()?;

    let mut scores = vec![0.0f64; candidates.len()];
    for partial in &partials {
        for (s, p) in scores.iter_mut().zip(partial) {
            *s += p;
        }
    }
    Ok(ScoreVector {
        candidate_positions: candidates.to_vec(),
        scores,
    })
}
