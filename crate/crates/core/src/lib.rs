//! Accumulative block-wise KV-cache compression.
//!
//! The context is processed in fixed-size blocks. For every block a per-block
//! token budget `B` is split by a protection divisor `n` into sequence-initial
//! anchors, a local window at the end of the block, and a recall share. The
//! recall share is filled by a two-branch policy: a fraction `alpha` goes to
//! the tokens with the highest attention mass summed over every layer and
//! head, and the rest goes to the tokens whose keys collide most often with
//! the query under SimHash. Selected tokens are appended to a memory pool that
//! is never re-pruned.
//!
//! Modules:
//! - [`config`]: model shape, compression config, budget arithmetic.
//! - [`trace`]: synthetic key/value/query traces and the `LKVT` file format.
//! - [`scoring`]: exact softmax attention mass aggregated over layers and heads.
//! - [`lsh`]: SimHash tables and collision-fraction scoring.
//! - [`selection`]: the exact+LSH recall split and per-block assembly.
//! - [`pipeline`]: the block loop and the append-only memory pool.
//! - [`baselines`]: comparison policies sharing the pipeline interface.
//! - [`harness`]: sweeps, metrics, CSV/JSON output.

pub mod baselines;
pub mod config;
pub mod harness;
pub mod lsh;
pub mod pipeline;
pub mod scoring;
pub mod selection;
pub mod trace;

pub use baselines::{PolicyHandle, PolicyKind};
pub use config::{
    effective_budget, partition_budget, validate_config, BudgetPlan, CompressionConfig,
    ConfigError, ConfigErrors, ModelShape, ValidatedConfig,
};
pub use lsh::{build_tables, collision_scores, hash_code, CollisionScoreVector, HashTableSet};
pub use pipeline::{final_cache_view, run_pipeline, BlockReport, MemoryPool, PipelineOutput};
pub use scoring::{exact_scores, ScoreVector};
pub use selection::{exact_lsh_select, RecallPicks, SelectionResult};
pub use trace::{generate_trace, load_trace, save_trace, KvTrace, NeedleAnnotation, NeedleSpec};
