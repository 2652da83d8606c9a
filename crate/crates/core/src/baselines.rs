//! Comparison policies expressed through the same block interface.
//!
//! - `ExactOnly`: recall filled purely by exact attention Top-K (heavy hitters).
//! - `LshOnly`: recall filled purely by SimHash collision Top-K.
//! - `SlidingWindow`: anchors plus local window; the recall share stays unused.
//! - `RecursiveSummary`: a fixed-size summary re-pruned every block from the
//!   previous summary and the new block by exact score. This is a simplified
//!   recursive-compression contrast arm (exact scores only, no prompt
//!   guidance), not a reproduction of any specific system.

use std::collections::HashMap;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::BudgetPlan;
use crate::lsh::CollisionScoreVector;
use crate::scoring::ScoreVector;
use crate::selection::{
    syntactic_set, top_k, AnchorMode, BlockCandidates, RecallPicks, SelectionResult,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    #[serde(rename = "laser")]
    LaserKv,
    #[serde(rename = "exact")]
    ExactOnly,
    #[serde(rename = "lsh")]
    LshOnly,
    #[serde(rename = "window")]
    SlidingWindow,
    #[serde(rename = "recursive")]
    RecursiveSummary,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::LaserKv,
        PolicyKind::ExactOnly,
        PolicyKind::LshOnly,
        PolicyKind::SlidingWindow,
        PolicyKind::RecursiveSummary,
    ];

    /// CLI / CSV name.
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::LaserKv => "laser",
            PolicyKind::ExactOnly => "exact",
            PolicyKind::LshOnly => "lsh",
            PolicyKind::SlidingWindow => "window",
            PolicyKind::RecursiveSummary => "recursive",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                format!("unknown policy `{s}` (expected laser|exact|lsh|window|recursive)")
            })
    }
}

/// A policy and its parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolicyHandle {
    /// Exact+LSH recall with the config's `alpha`.
    LaserKv,
    ExactOnly,
    LshOnly,
    SlidingWindow,
    /// Summary size; `None` uses the per-block budget `B`.
    RecursiveSummary {
        fixed_size: Option<usize>,
    },
}

impl PolicyHandle {
    pub fn kind(&self) -> PolicyKind {
        match self {
            PolicyHandle::LaserKv => PolicyKind::LaserKv,
            PolicyHandle::ExactOnly => PolicyKind::ExactOnly,
            PolicyHandle::LshOnly => PolicyKind::LshOnly,
            PolicyHandle::SlidingWindow => PolicyKind::SlidingWindow,
            PolicyHandle::RecursiveSummary { .. } => PolicyKind::RecursiveSummary,
        }
    }

    pub fn from_kind(kind: PolicyKind, summary_size: Option<usize>) -> Self {
        match kind {
            PolicyKind::LaserKv => PolicyHandle::LaserKv,
            PolicyKind::ExactOnly => PolicyHandle::ExactOnly,
            PolicyKind::LshOnly => PolicyHandle::LshOnly,
            PolicyKind::SlidingWindow => PolicyHandle::SlidingWindow,
            PolicyKind::RecursiveSummary => PolicyHandle::RecursiveSummary {
                fixed_size: summary_size,
            },
        }
    }

    /// Whether the policy ever consults SimHash scores for the given alpha.
    pub fn uses_lsh(&self, alpha: f64) -> bool {
        match self {
            PolicyHandle::LaserKv => alpha < 1.0,
            PolicyHandle::LshOnly => true,
            _ => false,
        }
    }
}

/// Recall filled by exact Top-K alone.
pub fn exact_only_select(exact: &ScoreVector, b_long: usize) -> RecallPicks {
    RecallPicks {
        exact: top_k(exact.iter().collect(), b_long),
        lsh: Vec::new(),
    }
}

/// Recall filled by collision Top-K alone.
pub fn lsh_only_select(lsh: &CollisionScoreVector, b_long: usize) -> RecallPicks {
    let items = lsh
        .candidate_positions
        .iter()
        .copied()
        .zip(lsh.scores.iter().copied())
        .collect();
    RecallPicks {
        exact: Vec::new(),
        lsh: top_k(items, b_long),
    }
}

/// Anchors and local window only.
pub fn sliding_window_select(
    plan: &BudgetPlan,
    block: &BlockCandidates<'_>,
    mode: AnchorMode,
) -> SelectionResult {
    let (anchors, local_window) = syntactic_set(block, plan, mode);
    let uncompressed = anchors.len() + local_window.len() == block.available();
    SelectionResult {
        anchors,
        local_window,
        uncompressed,
        ..SelectionResult::default()
    }
}

/// Summary carried between blocks by the recursive policy: position and the
/// block that admitted it, ascending by position.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SummaryState {
    pub entries: Vec<(usize, usize)>,
}

impl SummaryState {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn positions(&self) -> Vec<usize> {
        self.entries.iter().map(|&(p, _)| p).collect()
    }

    pub fn contains(&self, position: usize) -> bool {
        self.entries
            .binary_search_by_key(&position, |&(p, _)| p)
            .is_ok()
    }
}

/// Candidates the recursive policy scores for a block: the summary followed
/// by the block.
pub fn recursive_candidates(summary: &SummaryState, block: Range<usize>) -> Vec<usize> {
    summary.positions().into_iter().chain(block).collect()
}

/// Re-prunes `summary ∪ block` to the `fixed_size` best by exact score.
/// `scores` must cover [`recursive_candidates`]. Returns the newly admitted
/// block tokens (as exact picks), the evicted count and the new summary.
pub fn recursive_summary_select(
    summary: &SummaryState,
    block_id: usize,
    block: Range<usize>,
    scores: &ScoreVector,
    fixed_size: usize,
) -> (SelectionResult, usize, SummaryState) {
    let kept = top_k(scores.iter().collect(), fixed_size);
    let admitted_in: HashMap<usize, usize> = summary.entries.iter().copied().collect();
    let entries: Vec<(usize, usize)> = kept
        .iter()
        .map(|&p| (p, admitted_in.get(&p).copied().unwrap_or(block_id)))
        .collect();
    let exact_picks: Vec<usize> = kept.iter().copied().filter(|p| block.contains(p)).collect();
    let evicted = summary.len() + exact_picks.len() - entries.len();
    let uncompressed = kept.len() == scores.len();
    (
        SelectionResult {
            exact_picks,
            uncompressed,
            ..SelectionResult::default()
        },
        evicted,
        SummaryState { entries },
    )
}
