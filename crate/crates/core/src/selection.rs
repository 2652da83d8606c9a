//! Block-level token selection.
//!
//! A block's selection is its syntactic set (anchors and local window) plus a
//! recall set chosen by [`exact_lsh_select`]: the top `floor(alpha * B_long)`
//! candidates by exact attention mass, then the top remaining candidates by
//! SimHash collision fraction among those not already taken. Every Top-K
//! breaks score ties toward the lower absolute position, so results depend
//! only on the (position, score) pairs and never on candidate order.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::BudgetPlan;
use crate::lsh::{CollisionScoreVector, LshError};
use crate::scoring::{ScoreVector, ScoringError};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SelectionError {
    #[error("exact and LSH score vectors are not aligned to the same candidates")]
    Misaligned,
    #[error("candidate position {0} appears more than once")]
    DuplicateCandidate(usize),
    #[error("tail candidate {0} overlaps the current block")]
    Overlap(usize),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Lsh(#[from] LshError),
}

/// Why a token was admitted to the pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AdmissionReason {
    Anchor,
    LocalWindow,
    ExactTopK,
    LshTopK,
    SecondChance,
}

/// Where anchors are reserved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AnchorMode {
    /// First `floor(B/n)` tokens of the sequence, admitted with the first block.
    /// Later blocks give the anchor share to recall.
    #[default]
    Global,
    /// First `floor(B/n)` tokens of every block.
    PerBlock,
}

/// Recall picks split by branch, each sorted by position.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RecallPicks {
    pub exact: Vec<usize>,
    pub lsh: Vec<usize>,
}

/// One block's admissions, split by reason. The lists are pairwise disjoint;
/// `second_chance` holds recall picks that came from the previous block's
/// tail (from either branch), and `exact_picks` / `lsh_picks` hold only picks
/// from the current block.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SelectionResult {
    pub anchors: Vec<usize>,
    pub local_window: Vec<usize>,
    pub exact_picks: Vec<usize>,
    pub lsh_picks: Vec<usize>,
    pub second_chance: Vec<usize>,
    /// Every available candidate was kept.
    pub uncompressed: bool,
}

impl SelectionResult {
    pub fn len(&self) -> usize {
        self.anchors.len()
            + self.local_window.len()
            + self.exact_picks.len()
            + self.lsh_picks.len()
            + self.second_chance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All admissions with their reasons, in ascending position order.
    pub fn admissions(&self) -> Vec<(usize, AdmissionReason)> {
        let mut out: Vec<(usize, AdmissionReason)> = self
            .anchors
            .iter()
            .map(|&p| (p, AdmissionReason::Anchor))
            .chain(
                self.local_window
                    .iter()
                    .map(|&p| (p, AdmissionReason::LocalWindow)),
            )
            .chain(
                self.exact_picks
                    .iter()
                    .map(|&p| (p, AdmissionReason::ExactTopK)),
            )
            .chain(
                self.lsh_picks
                    .iter()
                    .map(|&p| (p, AdmissionReason::LshTopK)),
            )
            .chain(
                self.second_chance
                    .iter()
                    .map(|&p| (p, AdmissionReason::SecondChance)),
            )
            .collect();
        out.sort_unstable_by_key(|&(p, _)| p);
        out
    }
}

/// Higher score first, then lower position.
#[inline]
fn rank_order(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Positions of the `k` best `(position, score)` pairs, ascending by position.
pub fn top_k(mut items: Vec<(usize, f64)>, k: usize) -> Vec<usize> {
    if k == 0 {
        return Vec::new();
    }
    if k < items.len() {
        items.select_nth_unstable_by(k - 1, rank_order);
        items.truncate(k);
    }
    let mut out: Vec<usize> = items.into_iter().map(|(p, _)| p).collect();
    out.sort_unstable();
    out
}

/// Exact-branch share of the recall budget, `floor(alpha * b_long)`.
pub fn exact_share(b_long: usize, alpha: f64) -> usize {
    ((alpha * b_long as f64).floor() as usize).min(b_long)
}

fn check_unique(positions: &[usize]) -> Result<(), SelectionError> {
    let mut seen = HashSet::with_capacity(positions.len());
    for &p in positions {
        if !seen.insert(p) {
            return Err(SelectionError::DuplicateCandidate(p));
        }
    }
    Ok(())
}

/// Splits the recall budget `b_long` between exact Top-K (`floor(alpha *
/// b_long)` tokens) and LSH Top-K over the residual (the rest). With fewer
/// candidates than budget every candidate is kept.
pub fn exact_lsh_select(
    exact: &ScoreVector,
    lsh: &CollisionScoreVector,
    b_long: usize,
    alpha: f64,
) -> Result<RecallPicks, SelectionError> {
    if exact.candidate_positions != lsh.candidate_positions
        || exact.scores.len() != exact.candidate_positions.len()
        || lsh.scores.len() != lsh.candidate_positions.len()
    {
        return Err(SelectionError::Misaligned);
    }
    check_unique(&exact.candidate_positions)?;
    let k_exact = exact_share(b_long, alpha);
    let exact_picks = top_k(exact.iter().collect(), k_exact);

    let taken: HashSet<usize> = exact_picks.iter().copied().collect();
    let residual: Vec<(usize, f64)> = lsh
        .candidate_positions
        .iter()
        .copied()
        .zip(lsh.scores.iter().copied())
        .filter(|(p, _)| !taken.contains(p))
        .collect();
    let lsh_picks = top_k(residual, b_long - k_exact);
    Ok(RecallPicks {
        exact: exact_picks,
        lsh: lsh_picks,
    })
}

/// Supplies scores for recall candidates on demand.
pub trait RecallScorer {
    fn exact(&mut self, candidates: &[usize]) -> Result<ScoreVector, SelectionError>;
    fn lsh(&mut self, candidates: &[usize]) -> Result<CollisionScoreVector, SelectionError>;
}

/// Tokens available to one block: its own positions plus the not-yet-admitted
/// tail of the previous block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockCandidates<'a> {
    pub block_id: usize,
    pub block: Range<usize>,
    pub tail: &'a [usize],
}

impl BlockCandidates<'_> {
    pub fn available(&self) -> usize {
        self.block.len() + self.tail.len()
    }
}

/// Anchors and local window for a block.
pub fn syntactic_set(
    block: &BlockCandidates<'_>,
    plan: &BudgetPlan,
    mode: AnchorMode,
) -> (Vec<usize>, Vec<usize>) {
    let range = &block.block;
    let anchor_count = match mode {
        AnchorMode::Global if block.block_id == 0 => plan.anchor,
        AnchorMode::Global => 0,
        AnchorMode::PerBlock => plan.anchor,
    };
    let anchor_end = range.start + anchor_count.min(range.len());
    let anchors: Vec<usize> = (range.start..anchor_end).collect();
    let local_start = range.end.saturating_sub(plan.local).max(anchor_end);
    let local: Vec<usize> = (local_start..range.end).collect();
    (anchors, local)
}

/// Assembles one block's selection: syntactic set, then the recall split over
/// the remaining block tokens and the previous block's tail.
///
/// The recall budget is whatever the block budget leaves after the anchors and
/// local window actually admitted, so later blocks under [`AnchorMode::Global`]
/// receive the anchor share as recall.
pub fn assemble_block_selection(
    block: &BlockCandidates<'_>,
    plan: &BudgetPlan,
    mode: AnchorMode,
    alpha: f64,
    scorer: &mut dyn RecallScorer,
) -> Result<SelectionResult, SelectionError> {
    assemble_with(block, plan, mode, |candidates, b_long| {
        select_recall(candidates, b_long, alpha, scorer)
    })
}

/// Block assembly with a caller-supplied recall step `(candidates, b_long) ->
/// picks`. Candidates are the tail followed by the unprotected block tokens.
pub fn assemble_with<F>(
    block: &BlockCandidates<'_>,
    plan: &BudgetPlan,
    mode: AnchorMode,
    recall: F,
) -> Result<SelectionResult, SelectionError>
where
    F: FnOnce(&[usize], usize) -> Result<RecallPicks, SelectionError>,
{
    check_unique(block.tail)?;
    if let Some(&p) = block.tail.iter().find(|&&p| p >= block.block.start) {
        return Err(SelectionError::Overlap(p));
    }
    let (anchors, local_window) = syntactic_set(block, plan, mode);
    let b_long = plan
        .total
        .saturating_sub(anchors.len() + local_window.len());

    let protected_end = anchors.last().map_or(block.block.start, |&p| p + 1);
    let local_start = local_window.first().copied().unwrap_or(block.block.end);
    let candidates: Vec<usize> = block
        .tail
        .iter()
        .copied()
        .chain(protected_end..local_start)
        .collect();

    let picks = recall(&candidates, b_long)?;
    let (second_exact, exact_picks): (Vec<usize>, Vec<usize>) = picks
        .exact
        .into_iter()
        .partition(|&p| p < block.block.start);
    let (second_lsh, lsh_picks): (Vec<usize>, Vec<usize>) =
        picks.lsh.into_iter().partition(|&p| p < block.block.start);
    let mut second_chance = second_exact;
    second_chance.extend(second_lsh);
    second_chance.sort_unstable();

    let mut result = SelectionResult {
        anchors,
        local_window,
        exact_picks,
        lsh_picks,
        second_chance,
        uncompressed: false,
    };
    result.uncompressed = result.len() == block.available();
    Ok(result)
}

/// Runs [`exact_lsh_select`], asking the scorer only for the branches that
/// have a non-zero share.
pub fn select_recall(
    candidates: &[usize],
    b_long: usize,
    alpha: f64,
    scorer: &mut dyn RecallScorer,
) -> Result<RecallPicks, SelectionError> {
    if candidates.is_empty() || b_long == 0 {
        return Ok(RecallPicks::default());
    }
    let k_exact = exact_share(b_long, alpha);
    let exact = if k_exact > 0 {
        scorer.exact(candidates)?
    } else {
        ScoreVector {
            candidate_positions: candidates.to_vec(),
            scores: vec![0.0; candidates.len()],
        }
    };
    let lsh = if b_long > k_exact && candidates.len() > k_exact {
        scorer.lsh(candidates)?
    } else {
        CollisionScoreVector {
            candidate_positions: candidates.to_vec(),
            scores: vec![0.0; candidates.len()],
        }
    };
    exact_lsh_select(&exact, &lsh, b_long, alpha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::partition_budget;
    use proptest::prelude::*;

    fn sv(positions: &[usize], scores: &[f64]) -> (ScoreVector, CollisionScoreVector) {
        (
            ScoreVector {
                candidate_positions: positions.to_vec(),
                scores: scores.to_vec(),
            },
            CollisionScoreVector {
                candidate_positions: positions.to_vec(),
                scores: vec![0.0; positions.len()],
            },
        )
    }

    /// Full sorts and explicit set subtraction.
    fn reference(
        positions: &[usize],
        exact: &[f64],
        lsh: &[f64],
        b_long: usize,
        alpha: f64,
    ) -> (Vec<usize>, Vec<usize>) {
        let k_exact = (alpha * b_long as f64).floor() as usize;
        let mut by_exact: Vec<usize> = (0..positions.len()).collect();
        by_exact.sort_by(|&i, &j| {
            exact[j]
                .partial_cmp(&exact[i])
                .unwrap()
                .then(positions[i].cmp(&positions[j]))
        });
        let mut kept_exact: Vec<usize> = by_exact
            .iter()
            .take(k_exact)
            .map(|&i| positions[i])
            .collect();
        let mut residual: Vec<usize> = (0..positions.len())
            .filter(|&i| !kept_exact.contains(&positions[i]))
            .collect();
        residual.sort_by(|&i, &j| {
            lsh[j]
                .partial_cmp(&lsh[i])
                .unwrap()
                .then(positions[i].cmp(&positions[j]))
        });
        let mut kept_lsh: Vec<usize> = residual
            .iter()
            .take(b_long - k_exact)
            .map(|&i| positions[i])
            .collect();
        kept_exact.sort();
        kept_lsh.sort();
        (kept_exact, kept_lsh)
    }

    fn hand_instance() -> (ScoreVector, CollisionScoreVector) {
        let positions: Vec<usize> = (0..8).collect();
        let exact = ScoreVector {
            candidate_positions: positions.clone(),
            scores: vec![9.0, 8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0],
        };
        // positions 3..7 carry the listed LSH scores; 0..2 sit below all of them
        let lsh = CollisionScoreVector {
            candidate_positions: positions,
            scores: vec![0.0, 0.0, 0.0, 0.1, 0.9, 0.2, 0.8, 0.3],
        };
        (exact, lsh)
    }

    #[test]
    fn hand_instance_half_split() {
        let (e, l) = hand_instance();
        let picks = exact_lsh_select(&e, &l, 4, 0.5).unwrap();
        assert_eq!(picks.exact, vec![0, 1]);
        assert_eq!(picks.lsh, vec![4, 6]);
    }

    #[test]
    fn alpha_boundaries() {
        let (e, l) = hand_instance();
        let all_exact = exact_lsh_select(&e, &l, 4, 1.0).unwrap();
        assert_eq!(all_exact.exact, vec![0, 1, 2, 3]);
        assert!(all_exact.lsh.is_empty());
        let all_lsh = exact_lsh_select(&e, &l, 4, 0.0).unwrap();
        assert!(all_lsh.exact.is_empty());
        assert_eq!(all_lsh.lsh, vec![4, 5, 6, 7]);
    }

    #[test]
    fn small_pool_keeps_everything() {
        let (e, l) = sv(&[4, 9, 2], &[0.1, 0.3, 0.2]);
        let picks = exact_lsh_select(&e, &l, 10, 0.25).unwrap();
        let mut all = picks.exact.clone();
        all.extend(&picks.lsh);
        all.sort();
        assert_eq!(all, vec![2, 4, 9]);
    }

    #[test]
    fn ties_go_to_lower_position() {
        let (e, l) = sv(&[7, 3, 5, 1], &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(exact_lsh_select(&e, &l, 2, 1.0).unwrap().exact, vec![1, 3]);
    }

    #[test]
    fn misaligned_rejected() {
        let (e, _) = sv(&[1, 2], &[0.0, 0.0]);
        let (_, l) = sv(&[1, 3], &[0.0, 0.0]);
        assert_eq!(
            exact_lsh_select(&e, &l, 1, 0.5),
            Err(SelectionError::Misaligned)
        );
        let (e, l) = sv(&[1, 1], &[0.0, 0.0]);
        assert_eq!(
            exact_lsh_select(&e, &l, 1, 0.5),
            Err(SelectionError::DuplicateCandidate(1))
        );
    }

    #[test]
    fn exact_share_floors() {
        assert_eq!(exact_share(4, 0.75), 3);
        assert_eq!(exact_share(5, 0.75), 3);
        assert_eq!(exact_share(820, 0.75), 615);
        assert_eq!(exact_share(7, 1.0), 7);
        assert_eq!(exact_share(7, 0.0), 0);
    }

    /// Scores a candidate by its position (exact) or reversed position (lsh).
    struct PositionScorer {
        lsh_calls: usize,
    }

    impl RecallScorer for PositionScorer {
        fn exact(&mut self, c: &[usize]) -> Result<ScoreVector, SelectionError> {
            Ok(ScoreVector {
                candidate_positions: c.to_vec(),
                scores: c.iter().map(|&p| p as f64).collect(),
            })
        }
        fn lsh(&mut self, c: &[usize]) -> Result<CollisionScoreVector, SelectionError> {
            self.lsh_calls += 1;
            Ok(CollisionScoreVector {
                candidate_positions: c.to_vec(),
                scores: c.iter().map(|&p| 1.0 / (1.0 + p as f64)).collect(),
            })
        }
    }

    #[test]
    fn first_block_assembly() {
        let plan = partition_budget(8, 4).unwrap();
        let block = BlockCandidates {
            block_id: 0,
            block: 0..16,
            tail: &[],
        };
        let mut scorer = PositionScorer { lsh_calls: 0 };
        let sel =
            assemble_block_selection(&block, &plan, AnchorMode::Global, 0.5, &mut scorer).unwrap();
        assert_eq!(sel.anchors, vec![0, 1]);
        assert_eq!(sel.local_window, vec![14, 15]);
        assert_eq!(sel.exact_picks, vec![12, 13]);
        assert_eq!(sel.lsh_picks, vec![2, 3]);
        assert!(sel.second_chance.is_empty());
        assert_eq!(sel.len(), 8);
        assert!(!sel.uncompressed);
    }

    #[test]
    fn later_block_gets_anchor_share_and_second_chance() {
        let plan = partition_budget(8, 4).unwrap();
        let tail = [29, 30, 31];
        let block = BlockCandidates {
            block_id: 2,
            block: 32..48,
            tail: &tail,
        };
        let mut scorer = PositionScorer { lsh_calls: 0 };
        let sel =
            assemble_block_selection(&block, &plan, AnchorMode::Global, 0.5, &mut scorer).unwrap();
        assert!(sel.anchors.is_empty());
        assert_eq!(sel.local_window, vec![46, 47]);
        // recall budget 6: exact takes the 3 highest positions, lsh the 3 lowest
        assert_eq!(sel.exact_picks, vec![43, 44, 45]);
        assert!(sel.lsh_picks.is_empty());
        assert_eq!(sel.second_chance, vec![29, 30, 31]);
        assert_eq!(sel.len(), 8);

        let per_block =
            assemble_block_selection(&block, &plan, AnchorMode::PerBlock, 0.5, &mut scorer)
                .unwrap();
        assert_eq!(per_block.anchors, vec![32, 33]);
        assert_eq!(per_block.len(), 8);
    }

    #[test]
    fn empty_tail_no_second_chance() {
        let plan = partition_budget(8, 4).unwrap();
        let block = BlockCandidates {
            block_id: 1,
            block: 16..32,
            tail: &[],
        };
        let mut scorer = PositionScorer { lsh_calls: 0 };
        let sel =
            assemble_block_selection(&block, &plan, AnchorMode::Global, 0.75, &mut scorer).unwrap();
        assert!(sel.second_chance.is_empty());
    }

    #[test]
    fn zero_recall_budget() {
        let plan = partition_budget(4, 2).unwrap();
        assert_eq!(plan.recall, 0);
        let block = BlockCandidates {
            block_id: 0,
            block: 0..16,
            tail: &[],
        };
        let mut scorer = PositionScorer { lsh_calls: 0 };
        let sel =
            assemble_block_selection(&block, &plan, AnchorMode::Global, 0.5, &mut scorer).unwrap();
        assert_eq!(sel.anchors, vec![0, 1]);
        assert_eq!(sel.local_window, vec![14, 15]);
        assert!(sel.exact_picks.is_empty() && sel.lsh_picks.is_empty());
    }

    #[test]
    fn alpha_one_skips_lsh() {
        let plan = partition_budget(8, 4).unwrap();
        let block = BlockCandidates {
            block_id: 0,
            block: 0..16,
            tail: &[],
        };
        let mut scorer = PositionScorer { lsh_calls: 0 };
        assemble_block_selection(&block, &plan, AnchorMode::Global, 1.0, &mut scorer).unwrap();
        assert_eq!(scorer.lsh_calls, 0);
    }

    #[test]
    fn short_block_is_uncompressed() {
        let plan = partition_budget(8, 4).unwrap();
        let block = BlockCandidates {
            block_id: 0,
            block: 0..5,
            tail: &[],
        };
        let mut scorer = PositionScorer { lsh_calls: 0 };
        let sel =
            assemble_block_selection(&block, &plan, AnchorMode::Global, 0.5, &mut scorer).unwrap();
        assert_eq!(sel.len(), 5);
        assert!(sel.uncompressed);
    }

    #[test]
    fn tail_overlap_rejected() {
        let plan = partition_budget(8, 4).unwrap();
        let tail = [16];
        let block = BlockCandidates {
            block_id: 1,
            block: 16..32,
            tail: &tail,
        };
        let mut scorer = PositionScorer { lsh_calls: 0 };
        assert_eq!(
            assemble_block_selection(&block, &plan, AnchorMode::Global, 0.5, &mut scorer),
            Err(SelectionError::Overlap(16))
        );
    }

    fn instance() -> impl Strategy<Value = (Vec<usize>, Vec<f64>, Vec<f64>, usize, f64)> {
        (1usize..=64).prop_flat_map(|n| {
            (
                proptest::sample::subsequence((0..512usize).collect::<Vec<_>>(), n).prop_shuffle(),
                proptest::collection::vec((0u8..8).prop_map(|x| x as f64 / 4.0), n),
                proptest::collection::vec((0u8..8).prop_map(|x| x as f64 / 8.0), n),
                0usize..80,
                proptest::sample::select(vec![0.0, 0.25, 0.5, 0.75, 1.0]),
            )
        })
    }

    proptest! {
        #[test]
        fn matches_reference((pos, ex, ls, b, alpha) in instance()) {
            let e = ScoreVector { candidate_positions: pos.clone(), scores: ex.clone() };
            let l = CollisionScoreVector { candidate_positions: pos.clone(), scores: ls.clone() };
            let picks = exact_lsh_select(&e, &l, b, alpha).unwrap();
            let (re, rl) = reference(&pos, &ex, &ls, b, alpha);
            prop_assert_eq!(&picks.exact, &re);
            prop_assert_eq!(&picks.lsh, &rl);
            prop_assert_eq!(picks.exact.len() + picks.lsh.len(), b.min(pos.len()));
        }

        #[test]
        fn order_independent((pos, ex, ls, b, alpha) in instance(), seed in any::<u64>()) {
            let e = ScoreVector { candidate_positions: pos.clone(), scores: ex.clone() };
            let l = CollisionScoreVector { candidate_positions: pos.clone(), scores: ls.clone() };
            let base = exact_lsh_select(&e, &l, b, alpha).unwrap();
            let mut idx: Vec<usize> = (0..pos.len()).collect();
            let mut s = seed;
            for i in (1..idx.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                idx.swap(i, (s >> 33) as usize % (i + 1));
            }
            let e2 = ScoreVector {
                candidate_positions: idx.iter().map(|&i| pos[i]).collect(),
                scores: idx.iter().map(|&i| ex[i]).collect(),
            };
            let l2 = CollisionScoreVector {
                candidate_positions: idx.iter().map(|&i| pos[i]).collect(),
                scores: idx.iter().map(|&i| ls[i]).collect(),
            };
            prop_assert_eq!(exact_lsh_select(&e2, &l2, b, alpha).unwrap(), base);
        }
    }
}
