//! The accumulative block loop and its append-only memory pool.
//!
//! Block `t` covers `[t*S, min((t+1)*S, T))`. Its scoring window is the block
//! plus the last `W` tokens of block `t-1`; the tail tokens that were not
//! admitted in block `t-1` get one more chance as recall candidates. Query
//! rows are the last `W_q` positions of the scoring window. Admitted tokens
//! are appended to the pool and never removed.
//!
//! The recursive-summary baseline runs through [`run_pipeline`] as well but
//! keeps a re-pruned summary instead of a pool; its final summary is turned
//! into a pool once the last block is done.

use std::collections::{BTreeMap, HashSet};
use std::io::{self, Write};
use std::ops::Range;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{
    exact_only_select, lsh_only_select, recursive_candidates, recursive_summary_select,
    sliding_window_select, PolicyHandle, SummaryState,
};
use crate::config::{ModelShape, ValidatedConfig};
use crate::lsh::CollisionScoreVector;
use crate::lsh::{build_tables, collision_scores, HashTableSet, LshError, QueryRepresentative};
use crate::scoring::{exact_scores, ScoreVector};
use crate::selection::{
    assemble_block_selection, assemble_with, AdmissionReason, AnchorMode, BlockCandidates,
    RecallScorer, SelectionError, SelectionResult,
};
use crate::trace::KvTrace;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("trace shape {trace:?} with {trace_tokens} tokens does not match config ({config:?}, {config_tokens} tokens)")]
    ShapeMismatch {
        trace: ModelShape,
        trace_tokens: usize,
        config: ModelShape,
        config_tokens: usize,
    },
    #[error("policy violation in block {block_id}: {detail}")]
    PolicyViolation { block_id: usize, detail: String },
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Lsh(#[from] LshError),
}

/// A cached token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEntry {
    pub position: usize,
    /// `(layer, head, dim)` order.
    pub key: Vec<f32>,
    pub value: Vec<f32>,
    pub block_id: usize,
    pub reason: AdmissionReason,
}

/// Append-only store of admitted tokens.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MemoryPool {
    entries: Vec<TokenEntry>,
    admitted_blocks: usize,
    index: HashSet<usize>,
}

impl MemoryPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, position: usize) -> bool {
        self.index.contains(&position)
    }

    /// Entries in admission order.
    pub fn entries(&self) -> &[TokenEntry] {
        &self.entries
    }

    /// Number of blocks that have been closed with [`MemoryPool::finish_block`].
    pub fn admitted_blocks(&self) -> usize {
        self.admitted_blocks
    }

    /// Admission sequence as `(block_id, position)`.
    pub fn admission_log(&self) -> Vec<(usize, usize)> {
        self.entries
            .iter()
            .map(|e| (e.block_id, e.position))
            .collect()
    }

    /// Appends a token. Rejects duplicates and decreasing block ids.
    pub fn admit(
        &mut self,
        trace: &KvTrace,
        position: usize,
        block_id: usize,
        reason: AdmissionReason,
    ) -> Result<(), PipelineError> {
        if position >= trace.num_tokens() {
            return Err(PipelineError::PolicyViolation {
                block_id,
                detail: format!("position {position} out of range"),
            });
        }
        if let Some(last) = self.entries.last() {
            if block_id < last.block_id {
                return Err(PipelineError::PolicyViolation {
                    block_id,
                    detail: format!("block id decreased from {}", last.block_id),
                });
            }
        }
        if !self.index.insert(position) {
            return Err(PipelineError::PolicyViolation {
                block_id,
                detail: format!("position {position} already in the pool"),
            });
        }
        self.entries.push(TokenEntry {
            position,
            key: trace.token_keys(position).to_vec(),
            value: trace.token_values(position).to_vec(),
            block_id,
            reason,
        });
        Ok(())
    }

    pub fn finish_block(&mut self) {
        self.admitted_blocks += 1;
    }
}

/// Per-block summary, one JSON object per line in report files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockReport {
    pub block_id: usize,
    pub candidates: usize,
    pub admitted_anchor: usize,
    pub admitted_local: usize,
    pub admitted_exact: usize,
    pub admitted_lsh: usize,
    pub admitted_second_chance: usize,
    /// Tokens dropped from a recursive summary in this block.
    pub evicted: usize,
    pub uncompressed: bool,
    pub pool_size: usize,
    pub elapsed_us: u64,
}

impl BlockReport {
    pub fn admitted(&self) -> usize {
        self.admitted_anchor
            + self.admitted_local
            + self.admitted_exact
            + self.admitted_lsh
            + self.admitted_second_chance
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub pool: MemoryPool,
    pub reports: Vec<BlockReport>,
    /// Per-block selections, in block order.
    pub selections: Vec<SelectionResult>,
}

/// Writes reports as JSON lines.
pub fn write_reports_jsonl<W: Write>(reports: &[BlockReport], mut out: W) -> io::Result<()> {
    for r in reports {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Scores recall candidates against the block's query rows.
struct TraceScorer<'a> {
    trace: &'a KvTrace,
    tables: Option<&'a HashTableSet>,
    query_rows: &'a [usize],
}

impl RecallScorer for TraceScorer<'_> {
    fn exact(&mut self, candidates: &[usize]) -> Result<ScoreVector, SelectionError> {
        // rows before the earliest candidate see nothing once anchors are excluded
        let first = candidates.iter().copied().min().unwrap_or(0);
        let rows: Vec<usize> = self
            .query_rows
            .iter()
            .copied()
            .filter(|&r| r >= first)
            .collect();
        Ok(exact_scores(self.trace, candidates, &rows)?)
    }

    fn lsh(&mut self, candidates: &[usize]) -> Result<CollisionScoreVector, SelectionError> {
        let tables = self
            .tables
            .expect("hash tables are built for every policy that uses LSH");
        let rep = QueryRepresentative::from_rows(self.trace, self.query_rows)?;
        Ok(collision_scores(tables, self.trace, candidates, &rep)?)
    }
}

/// Block ranges for a context of `len` tokens.
pub fn block_ranges(len: usize, block_size: usize) -> Vec<Range<usize>> {
    (0..len.div_ceil(block_size))
        .map(|t| t * block_size..((t + 1) * block_size).min(len))
        .collect()
}

fn check_selection(
    sel: &SelectionResult,
    block_id: usize,
    block: &Range<usize>,
    tail: &[usize],
    pool: &MemoryPool,
) -> Result<(), PipelineError> {
    let mut seen = HashSet::with_capacity(sel.len());
    for (p, _) in sel.admissions() {
        let allowed = block.contains(&p) || tail.contains(&p);
        let detail = if !allowed {
            Some(format!("position {p} is not a candidate of this block"))
        } else if pool.contains(p) {
            Some(format!("position {p} already in the pool"))
        } else if !seen.insert(p) {
            Some(format!("position {p} selected twice"))
        } else {
            None
        };
        if let Some(detail) = detail {
            return Err(PipelineError::PolicyViolation { block_id, detail });
        }
    }
    Ok(())
}

/// Runs `policy` over every block of `trace` and returns the compressed cache.
pub fn run_pipeline(
    trace: &KvTrace,
    cfg: &ValidatedConfig,
    policy: &PolicyHandle,
) -> Result<PipelineOutput, PipelineError> {
    if trace.shape() != cfg.shape || trace.num_tokens() != cfg.context_len {
        return Err(PipelineError::ShapeMismatch {
            trace: trace.shape(),
            trace_tokens: trace.num_tokens(),
            config: cfg.shape,
            config_tokens: cfg.context_len,
        });
    }
    if let PolicyHandle::RecursiveSummary { fixed_size } = policy {
        return run_recursive(trace, cfg, fixed_size.unwrap_or(cfg.plan.total));
    }

    let c = &cfg.config;
    let tables = if policy.uses_lsh(c.alpha) {
        Some(build_tables(
            cfg.shape,
            c.hash_rounds,
            c.hash_bits,
            c.rng_seed,
        )?)
    } else {
        None
    };
    let mode = if c.per_block_anchors {
        AnchorMode::PerBlock
    } else {
        AnchorMode::Global
    };
    let lookback = cfg.lookback();
    let plan = cfg.plan;

    let mut pool = MemoryPool::new();
    let mut reports = Vec::new();
    let mut selections = Vec::new();
    let mut prev: Option<Range<usize>> = None;

    for (block_id, block) in block_ranges(trace.num_tokens(), c.block_size)
        .into_iter()
        .enumerate()
    {
        let started = Instant::now();
        let tail_range = prev.as_ref().map_or(block.start..block.start, |p| {
            p.end.saturating_sub(lookback).max(p.start)..p.end
        });
        let tail: Vec<usize> = tail_range.clone().filter(|&p| !pool.contains(p)).collect();
        let window_start = tail_range.start;
        let query_rows: Vec<usize> =
            (block.end.saturating_sub(c.scoring_window).max(window_start)..block.end).collect();

        let candidates = BlockCandidates {
            block_id,
            block: block.clone(),
            tail: &tail,
        };
        let mut scorer = TraceScorer {
            trace,
            tables: tables.as_ref(),
            query_rows: &query_rows,
        };
        let sel = match policy {
            PolicyHandle::LaserKv => {
                assemble_block_selection(&candidates, &plan, mode, c.alpha, &mut scorer)?
            }
            PolicyHandle::ExactOnly => assemble_with(&candidates, &plan, mode, |cands, b_long| {
                if cands.is_empty() || b_long == 0 {
                    return Ok(Default::default());
                }
                Ok(exact_only_select(&scorer.exact(cands)?, b_long))
            })?,
            PolicyHandle::LshOnly => assemble_with(&candidates, &plan, mode, |cands, b_long| {
                if cands.is_empty() || b_long == 0 {
                    return Ok(Default::default());
                }
                Ok(lsh_only_select(&scorer.lsh(cands)?, b_long))
            })?,
            PolicyHandle::SlidingWindow => sliding_window_select(&plan, &candidates, mode),
            PolicyHandle::RecursiveSummary { .. } => unreachable!("handled above"),
        };
        check_selection(&sel, block_id, &block, &tail, &pool)?;
        for (p, reason) in sel.admissions() {
            pool.admit(trace, p, block_id, reason)?;
        }
        pool.finish_block();

        reports.push(BlockReport {
            block_id,
            candidates: candidates.available(),
            admitted_anchor: sel.anchors.len(),
            admitted_local: sel.local_window.len(),
            admitted_exact: sel.exact_picks.len(),
            admitted_lsh: sel.lsh_picks.len(),
            admitted_second_chance: sel.second_chance.len(),
            evicted: 0,
            uncompressed: sel.uncompressed,
            pool_size: pool.len(),
            elapsed_us: started.elapsed().as_micros() as u64,
        });
        selections.push(sel);
        prev = Some(block);
    }

    Ok(PipelineOutput {
        pool,
        reports,
        selections,
    })
}

fn run_recursive(
    trace: &KvTrace,
    cfg: &ValidatedConfig,
    fixed_size: usize,
) -> Result<PipelineOutput, PipelineError> {
    let c = &cfg.config;
    let mut summary = SummaryState::default();
    let mut reports = Vec::new();
    let mut selections = Vec::new();

    for (block_id, block) in block_ranges(trace.num_tokens(), c.block_size)
        .into_iter()
        .enumerate()
    {
        let started = Instant::now();
        let query_rows: Vec<usize> =
            (block.end.saturating_sub(c.scoring_window).max(block.start)..block.end).collect();
        let cands = recursive_candidates(&summary, block.clone());
        let scores = if fixed_size == 0 {
            ScoreVector {
                candidate_positions: cands.clone(),
                scores: vec![0.0; cands.len()],
            }
        } else {
            exact_scores(trace, &cands, &query_rows).map_err(SelectionError::from)?
        };
        let (sel, evicted, next) =
            recursive_summary_select(&summary, block_id, block.clone(), &scores, fixed_size);
        summary = next;
        reports.push(BlockReport {
            block_id,
            candidates: cands.len(),
            admitted_anchor: 0,
            admitted_local: 0,
            admitted_exact: sel.exact_picks.len(),
            admitted_lsh: 0,
            admitted_second_chance: 0,
            evicted,
            uncompressed: sel.uncompressed,
            pool_size: summary.len(),
            elapsed_us: started.elapsed().as_micros() as u64,
        });
        selections.push(sel);
    }

    let mut entries = summary.entries;
    entries.sort_by_key(|&(p, b)| (b, p));
    let mut pool = MemoryPool::new();
    for (p, b) in entries {
        pool.admit(trace, p, b, AdmissionReason::ExactTopK)?;
    }
    pool.admitted_blocks = reports.len();
    Ok(PipelineOutput {
        pool,
        reports,
        selections,
    })
}

/// The compressed cache keyed by absolute position.
pub fn final_cache_view(pool: &MemoryPool) -> BTreeMap<usize, &TokenEntry> {
    pool.entries.iter().map(|e| (e.position, e)).collect()
}
