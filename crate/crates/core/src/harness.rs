//! Experiment driver: sweeps, retention/overlap metrics and report files.
//!
//! The metrics are mechanism-level proxies. `needle_retention` is the
//! fraction of planted needles that survive in the final cache and
//! `oracle_overlap` is the agreement between the cache and the top-|pool|
//! tokens ranked by full-context attention from the probe query. Neither is a
//! downstream task accuracy.
//!
//! Metric CSV/JSON files hold only deterministic fields, so two runs of the
//! same spec produce byte-identical files. Wall-clock timings go to a
//! separate timings file.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{PolicyHandle, PolicyKind};
use crate::config::{
    validate_config, CompressionConfig, ConfigErrors, ModelShape, ValidatedConfig,
};
use crate::pipeline::{block_ranges, run_pipeline, MemoryPool, PipelineError};
use crate::scoring::{exact_scores, ScoringError};
use crate::selection::top_k;
use crate::trace::{generate_trace, KvTrace, NeedleSpec, TraceError};

/// Version of the metrics CSV/JSON schema.
pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config #{index}: {errors}")]
    InvalidConfig { index: usize, errors: ConfigErrors },
    #[error("invalid experiment spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

/// How needles are planted in each repetition's trace.
#[derive(Debug, Clone, PartialEq)]
pub enum NeedleLayout {
    None,
    /// Fixed `(position, target_cosine)` pairs.
    Explicit(Vec<(usize, f32)>),
    /// `count` distinct positions drawn from the middle half of the context,
    /// avoiding every position that any swept config protects as an anchor or
    /// local-window token, and the probe token.
    MidContext {
        count: usize,
        cosine: f32,
    },
}

/// One point of the config sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub block_size: usize,
    pub ratio: f64,
    pub divisor: usize,
    pub alpha: f64,
    pub hash_rounds: usize,
    pub hash_bits: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub shape: ModelShape,
    pub num_tokens: usize,
    pub needles: NeedleLayout,
    /// Base seed; each repetition derives its trace and hash seeds from it.
    pub seed: u64,
    pub block_sizes: Vec<usize>,
    pub ratios: Vec<f64>,
    pub divisors: Vec<usize>,
    pub alphas: Vec<f64>,
    pub hash_rounds: Vec<usize>,
    pub hash_bits: Vec<usize>,
    pub lookback: Option<usize>,
    pub scoring_window: usize,
    pub per_block_anchors: bool,
    pub policies: Vec<PolicyKind>,
    pub summary_size: Option<usize>,
    pub repetitions: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        let c = CompressionConfig::default();
        Self {
            shape: ModelShape::new(2, 2, 16),
            num_tokens: 4096,
            needles: NeedleLayout::MidContext {
                count: 8,
                cosine: 0.9,
            },
            seed: 0,
            block_sizes: vec![1024],
            ratios: vec![c.compression_ratio],
            divisors: vec![c.protection_divisor],
            alphas: vec![c.alpha],
            hash_rounds: vec![c.hash_rounds],
            hash_bits: vec![c.hash_bits],
            lookback: None,
            scoring_window: c.scoring_window,
            per_block_anchors: false,
            policies: PolicyKind::ALL.to_vec(),
            summary_size: None,
            repetitions: 1,
        }
    }
}

impl ExperimentSpec {
    /// Cartesian product of the sweep lists, in a fixed nesting order.
    pub fn sweep_points(&self) -> Vec<SweepPoint> {
        let mut out = Vec::new();
        for &block_size in &self.block_sizes {
            for &ratio in &self.ratios {
                for &divisor in &self.divisors {
                    for &alpha in &self.alphas {
                        for &hash_rounds in &self.hash_rounds {
                            for &hash_bits in &self.hash_bits {
                                out.push(SweepPoint {
                                    block_size,
                                    ratio,
                                    divisor,
                                    alpha,
                                    hash_rounds,
                                    hash_bits,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn config_for(&self, point: &SweepPoint, repetition: usize) -> CompressionConfig {
        CompressionConfig {
            block_size: point.block_size,
            compression_ratio: point.ratio,
            protection_divisor: point.divisor,
            alpha: point.alpha,
            hash_rounds: point.hash_rounds,
            hash_bits: point.hash_bits,
            lookback: self.lookback,
            scoring_window: self.scoring_window,
            rng_seed: hash_seed(self.seed, repetition),
            per_block_anchors: self.per_block_anchors,
        }
    }

    /// Validates every sweep point against the trace geometry.
    pub fn validated_configs(&self) -> Result<Vec<Vec<ValidatedConfig>>, HarnessError> {
        if self.repetitions == 0 {
            return Err(HarnessError::InvalidSpec(
                "repetitions must be at least 1".into(),
            ));
        }
        if self.policies.is_empty() {
            return Err(HarnessError::InvalidSpec("no policies given".into()));
        }
        let points = self.sweep_points();
        if points.is_empty() {
            return Err(HarnessError::InvalidSpec("a sweep list is empty".into()));
        }
        let mut per_rep = Vec::with_capacity(self.repetitions);
        for rep in 0..self.repetitions {
            let mut configs = Vec::with_capacity(points.len());
            for (index, p) in points.iter().enumerate() {
                let cfg = self.config_for(p, rep);
                configs.push(
                    validate_config(&cfg, self.shape, self.num_tokens)
                        .map_err(|errors| HarnessError::InvalidConfig { index, errors })?,
                );
            }
            per_rep.push(configs);
        }
        Ok(per_rep)
    }
}

const SEED_STEP: u64 = 0x9E37_79B9_7F4A_7C15;

/// Trace seed for a repetition.
pub fn trace_seed(base: u64, repetition: usize) -> u64 {
    base.wrapping_add((repetition as u64).wrapping_mul(SEED_STEP))
}

/// Hash-projection seed for a repetition.
pub fn hash_seed(base: u64, repetition: usize) -> u64 {
    trace_seed(base, repetition) ^ 0xD1B5_4A32_D192_ED03
}

/// Positions some config protects: global anchors and every block's local window.
fn protected_positions(configs: &[ValidatedConfig]) -> HashSet<usize> {
    let mut out = HashSet::new();
    for v in configs {
        let blocks = block_ranges(v.context_len, v.config.block_size);
        for (t, b) in blocks.iter().enumerate() {
            if t == 0 || v.config.per_block_anchors {
                out.extend(b.start..(b.start + v.plan.anchor).min(b.end));
            }
            out.extend(b.end.saturating_sub(v.plan.local).max(b.start)..b.end);
        }
    }
    out
}

/// Needle positions for one repetition.
pub fn place_needles(
    layout: &NeedleLayout,
    num_tokens: usize,
    configs: &[ValidatedConfig],
    seed: u64,
) -> Result<Vec<NeedleSpec>, HarnessError> {
    match layout {
        NeedleLayout::None => Ok(Vec::new()),
        NeedleLayout::Explicit(list) => {
            Ok(list.iter().map(|&(p, c)| NeedleSpec::new(p, c)).collect())
        }
        NeedleLayout::MidContext { count, cosine } => {
            let protected = protected_positions(configs);
            let probe = num_tokens.saturating_sub(1);
            let allowed: Vec<usize> = (num_tokens / 4..3 * num_tokens / 4)
                .filter(|p| !protected.contains(p) && *p != probe)
                .collect();
            if allowed.len() < *count {
                return Err(HarnessError::InvalidSpec(format!(
                    "only {} unprotected mid-context positions for {count} needles",
                    allowed.len()
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6E65_6564_6C65_7321);
            let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, allowed.len(), *count)
                .into_iter()
                .map(|i| allowed[i])
                .collect();
            picked.sort_unstable();
            Ok(picked
                .into_iter()
                .map(|p| NeedleSpec::new(p, *cosine))
                .collect())
        }
    }
}

/// Full-context ranking of every token by attention from the probe query.
#[derive(Debug, Clone)]
pub struct OracleRanking {
    scored: Vec<(usize, f64)>,
}

impl OracleRanking {
    pub fn new(trace: &KvTrace) -> Result<Self, ScoringError> {
        let all: Vec<usize> = (0..trace.num_tokens()).collect();
        let scores = exact_scores(trace, &all, &[trace.probe_position()])?;
        Ok(Self {
            scored: scores.iter().collect(),
        })
    }

    /// The top `m` positions (ties to lower position).
    pub fn top(&self, m: usize) -> Vec<usize> {
        top_k(self.scored.clone(), m)
    }

    /// `|pool ∩ top(|pool|)| / |pool|`; an empty pool counts as full agreement.
    pub fn overlap(&self, positions: &[usize]) -> f64 {
        if positions.is_empty() {
            return 1.0;
        }
        let oracle: HashSet<usize> = self.top(positions.len()).into_iter().collect();
        let hits = positions.iter().filter(|p| oracle.contains(p)).count();
        hits as f64 / positions.len() as f64
    }
}

/// Overlap of the pool with the full-attention top-|pool| set.
pub fn compute_oracle_overlap(pool: &MemoryPool, trace: &KvTrace) -> Result<f64, ScoringError> {
    let positions: Vec<usize> = pool.entries().iter().map(|e| e.position).collect();
    Ok(OracleRanking::new(trace)?.overlap(&positions))
}

/// Fraction of the trace's needles present in the pool; `None` without needles.
pub fn needle_retention(pool: &MemoryPool, trace: &KvTrace) -> Option<f64> {
    let needles = trace.needles();
    if needles.is_empty() {
        return None;
    }
    let kept = needles.iter().filter(|n| pool.contains(n.position)).count();
    Some(kept as f64 / needles.len() as f64)
}

/// One run's metrics. Field order is the CSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub schema_version: u32,
    pub policy: String,
    pub config_index: usize,
    pub repetition: usize,
    pub trace_seed: u64,
    pub hash_seed: u64,
    pub num_tokens: usize,
    pub block_size: usize,
    pub ratio: f64,
    pub divisor: usize,
    pub alpha: f64,
    pub hash_rounds: usize,
    pub hash_bits: usize,
    pub lookback: usize,
    pub scoring_window: usize,
    pub budget: usize,
    pub num_blocks: usize,
    pub pool_size: usize,
    pub needles: usize,
    pub needles_retained: usize,
    pub needle_retention: Option<f64>,
    pub oracle_overlap: f64,
    pub achieved_compression: f64,
}

/// Wall time of one block of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub policy: String,
    pub config_index: usize,
    pub repetition: usize,
    pub block_id: usize,
    pub elapsed_us: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunFailure {
    pub policy: PolicyKind,
    pub config_index: usize,
    pub repetition: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExperimentOutcome {
    pub rows: Vec<MetricsRow>,
    pub timings: Vec<TimingRow>,
    pub failures: Vec<RunFailure>,
}

type RunResult = Result<(MetricsRow, Vec<TimingRow>), RunFailure>;
type KeyedRuns = Vec<((PolicyKind, usize, usize), RunResult)>;

fn run_one(
    trace: &KvTrace,
    oracle: &OracleRanking,
    v: &ValidatedConfig,
    policy: PolicyKind,
    summary_size: Option<usize>,
    config_index: usize,
    repetition: usize,
) -> RunResult {
    let handle = PolicyHandle::from_kind(policy, summary_size);
    let out = run_pipeline(trace, v, &handle).map_err(|e| RunFailure {
        policy,
        config_index,
        repetition,
        message: e.to_string(),
    })?;
    let positions: Vec<usize> = out.pool.entries().iter().map(|e| e.position).collect();
    let needles = trace.needles().len();
    let retained = trace
        .needles()
        .iter()
        .filter(|n| out.pool.contains(n.position))
        .count();
    let c = &v.config;
    let row = MetricsRow {
        schema_version: METRICS_SCHEMA_VERSION,
        policy: policy.name().to_owned(),
        config_index,
        repetition,
        trace_seed: trace.seed(),
        hash_seed: c.rng_seed,
        num_tokens: trace.num_tokens(),
        block_size: c.block_size,
        ratio: c.compression_ratio,
        divisor: c.protection_divisor,
        alpha: c.alpha,
        hash_rounds: c.hash_rounds,
        hash_bits: c.hash_bits,
        lookback: v.lookback(),
        scoring_window: c.scoring_window,
        budget: v.plan.total,
        num_blocks: out.reports.len(),
        pool_size: out.pool.len(),
        needles,
        needles_retained: retained,
        needle_retention: needle_retention(&out.pool, trace),
        oracle_overlap: oracle.overlap(&positions),
        achieved_compression: out.pool.len() as f64 / trace.num_tokens() as f64,
    };
    let timings = out
        .reports
        .iter()
        .map(|r| TimingRow {
            policy: policy.name().to_owned(),
            config_index,
            repetition,
            block_id: r.block_id,
            elapsed_us: r.elapsed_us,
        })
        .collect();
    Ok((row, timings))
}

/// Runs the full cross product of sweep points, policies and repetitions.
/// Individual run failures are collected rather than aborting the sweep.
/// Rows are ordered by (policy, config index, repetition).
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutcome, HarnessError> {
    let configs = spec.validated_configs()?;
    let mut policies = spec.policies.clone();
    policies.sort();
    policies.dedup();

    // (policy, config, rep) -> result, gathered per repetition
    let per_rep: Vec<Result<KeyedRuns, HarnessError>> = (0..spec.repetitions)
        .into_par_iter()
        .map(|rep| {
            let seed = trace_seed(spec.seed, rep);
            let needles = place_needles(&spec.needles, spec.num_tokens, &configs[rep], seed)?;
            let trace = generate_trace(spec.shape, spec.num_tokens, &needles, seed)?;
            let oracle = OracleRanking::new(&trace)?;
            let jobs: Vec<(PolicyKind, usize)> = policies
                .iter()
                .flat_map(|&p| (0..configs[rep].len()).map(move |ci| (p, ci)))
                .collect();
            Ok(jobs
                .into_par_iter()
                .map(|(policy, ci)| {
                    let r = run_one(
                        &trace,
                        &oracle,
                        &configs[rep][ci],
                        policy,
                        spec.summary_size,
                        ci,
                        rep,
                    );
                    ((policy, ci, rep), r)
                })
                .collect())
        })
        .collect();

    let mut all = Vec::new();
    for r in per_rep {
        all.extend(r?);
    }
    all.sort_by_key(|(k, _)| *k);
    let mut outcome = ExperimentOutcome::default();
    for (_, r) in all {
        match r {
            Ok((row, timings)) => {
                outcome.rows.push(row);
                outcome.timings.extend(timings);
            }
            Err(f) => outcome.failures.push(f),
        }
    }
    Ok(outcome)
}

pub fn write_csv<T: Serialize, W: io::Write>(rows: &[T], out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: io::Read>(input: R) -> Result<Vec<MetricsRow>, HarnessError> {
    let mut r = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for row in r.deserialize() {
        let row: MetricsRow = row?;
        if row.schema_version != METRICS_SCHEMA_VERSION {
            return Err(HarnessError::InvalidSpec(format!(
                "metrics schema version {} (expected {METRICS_SCHEMA_VERSION})",
                row.schema_version
            )));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Writes `metrics.csv`, `metrics.json` and `timings.csv` into `dir`.
pub fn write_outcome(outcome: &ExperimentOutcome, dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    write_csv(&outcome.rows, fs::File::create(dir.join("metrics.csv"))?)?;
    let json = serde_json::to_string_pretty(&outcome.rows)?;
    fs::write(dir.join("metrics.json"), json + "\n")?;
    write_csv(&outcome.timings, fs::File::create(dir.join("timings.csv"))?)?;
    Ok(())
}

/// Mean metrics of all repetitions of one (policy, config) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub policy: String,
    pub block_size: usize,
    pub ratio: f64,
    pub divisor: usize,
    pub alpha: f64,
    pub hash_rounds: usize,
    pub hash_bits: usize,
    pub runs: usize,
    pub mean_retention: Option<f64>,
    pub std_retention: Option<f64>,
    pub mean_oracle_overlap: f64,
    pub mean_compression: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Groups rows by policy and config and averages over repetitions.
pub fn summarize(rows: &[MetricsRow]) -> Vec<SummaryRow> {
    type Key = (String, usize, u64, usize, u64, usize, usize);
    let mut groups: BTreeMap<Key, Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows {
        let key = (
            r.policy.clone(),
            r.block_size,
            r.ratio.to_bits(),
            r.divisor,
            r.alpha.to_bits(),
            r.hash_rounds,
            r.hash_bits,
        );
        groups.entry(key).or_default().push(r);
    }
    groups
        .into_values()
        .map(|g| {
            let first = g[0];
            let retention: Vec<f64> = g.iter().filter_map(|r| r.needle_retention).collect();
            let (mr, sr) = if retention.is_empty() {
                (None, None)
            } else {
                let (m, s) = mean_std(&retention);
                (Some(m), Some(s))
            };
            let overlap: Vec<f64> = g.iter().map(|r| r.oracle_overlap).collect();
            let compression: Vec<f64> = g.iter().map(|r| r.achieved_compression).collect();
            SummaryRow {
                policy: first.policy.clone(),
                block_size: first.block_size,
                ratio: first.ratio,
                divisor: first.divisor,
                alpha: first.alpha,
                hash_rounds: first.hash_rounds,
                hash_bits: first.hash_bits,
                runs: g.len(),
                mean_retention: mr,
                std_retention: sr,
                mean_oracle_overlap: mean_std(&overlap).0,
                mean_compression: mean_std(&compression).0,
            }
        })
        .collect()
}

/// Fixed-width text table of summary rows.
pub fn format_summary(rows: &[SummaryRow]) -> String {
    let mut out = format!(
        "{:<10} {:>6} {:>6} {:>3} {:>5} {:>4} {:>3} {:>5} {:>10} {:>8} {:>8}\n",
        "policy", "block", "ratio", "n", "alpha", "R", "K", "runs", "retention", "overlap", "kept"
    );
    for r in rows {
        let retention = r
            .mean_retention
            .map_or_else(|| "-".to_owned(), |m| format!("{m:.4}"));
        out.push_str(&format!(
            "{:<10} {:>6} {:>6} {:>3} {:>5} {:>4} {:>3} {:>5} {:>10} {:>8.4} {:>8.4}\n",
            r.policy,
            r.block_size,
            r.ratio,
            r.divisor,
            r.alpha,
            r.hash_rounds,
            r.hash_bits,
            r.runs,
            retention,
            r.mean_oracle_overlap,
            r.mean_compression
        ));
    }
    out
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_flat_config(text: &str) -> Result<BTreeMap<String, String>, HarnessError> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            HarnessError::InvalidSpec(format!("line {}: expected key = value", i + 1))
        })?;
        let key = k.trim().replace('-', "_");
        if out.insert(key.clone(), v.trim().to_owned()).is_some() {
            return Err(HarnessError::InvalidSpec(format!(
                "line {}: duplicate key `{key}`",
                i + 1
            )));
        }
    }
    Ok(out)
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, HarnessError> {
    v.trim()
        .parse()
        .map_err(|_| HarnessError::InvalidSpec(format!("bad value `{v}` for `{key}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, HarnessError> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_value(key, s))
        .collect()
}

fn parse_bool(key: &str, v: &str) -> Result<bool, HarnessError> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(HarnessError::InvalidSpec(format!(
            "bad value `{v}` for `{key}`"
        ))),
    }
}

/// Applies one flat-config key to a compression config. Returns `false` for
/// keys that are not config fields.
pub fn apply_config_key(
    cfg: &mut CompressionConfig,
    key: &str,
    value: &str,
) -> Result<bool, HarnessError> {
    match key {
        "block_size" => cfg.block_size = parse_value(key, value)?,
        "ratio" | "compression_ratio" => cfg.compression_ratio = parse_value(key, value)?,
        "divisor" | "protection_divisor" => cfg.protection_divisor = parse_value(key, value)?,
        "alpha" => cfg.alpha = parse_value(key, value)?,
        "hash_rounds" => cfg.hash_rounds = parse_value(key, value)?,
        "hash_bits" => cfg.hash_bits = parse_value(key, value)?,
        "lookback" => cfg.lookback = Some(parse_value(key, value)?),
        "scoring_window" => cfg.scoring_window = parse_value(key, value)?,
        "seed" | "rng_seed" => cfg.rng_seed = parse_value(key, value)?,
        "per_block_anchors" => cfg.per_block_anchors = parse_bool(key, value)?,
        _ => return Ok(false),
    }
    Ok(true)
}

/// Builds a compression config from flat `key = value` text over the defaults.
pub fn config_from_flat(text: &str) -> Result<CompressionConfig, HarnessError> {
    let mut cfg = CompressionConfig::default();
    for (k, v) in parse_flat_config(text)? {
        if !apply_config_key(&mut cfg, &k, &v)? {
            return Err(HarnessError::InvalidSpec(format!(
                "unknown config key `{k}`"
            )));
        }
    }
    Ok(cfg)
}

/// Parses an experiment spec. Sweep keys take comma-separated lists.
///
/// ```text
/// layers = 2
/// heads = 2
/// head_dim = 16
/// tokens = 4096
/// seed = 7
/// mid_needles = 8          # or: needles = 1500:0.9, 2300:0.9
/// needle_cosine = 0.9
/// block_size = 1024
/// ratio = 0.25, 0.5
/// divisor = 4
/// alpha = 0, 0.75, 1
/// hash_rounds = 64
/// hash_bits = 8
/// scoring_window = 32
/// policies = laser, exact, lsh, window, recursive
/// repetitions = 10
/// ```
pub fn spec_from_flat(text: &str) -> Result<ExperimentSpec, HarnessError> {
    let mut spec = ExperimentSpec::default();
    let mut mid: Option<usize> = None;
    let mut cosine: f32 = 0.9;
    let mut explicit: Option<Vec<(usize, f32)>> = None;
    for (k, v) in parse_flat_config(text)? {
        let k = k.as_str();
        match k {
            "layers" => spec.shape.num_layers = parse_value(k, &v)?,
            "heads" => spec.shape.num_heads = parse_value(k, &v)?,
            "head_dim" => spec.shape.head_dim = parse_value(k, &v)?,
            "tokens" => spec.num_tokens = parse_value(k, &v)?,
            "seed" => spec.seed = parse_value(k, &v)?,
            "block_size" => spec.block_sizes = parse_list(k, &v)?,
            "ratio" => spec.ratios = parse_list(k, &v)?,
            "divisor" => spec.divisors = parse_list(k, &v)?,
            "alpha" => spec.alphas = parse_list(k, &v)?,
            "hash_rounds" => spec.hash_rounds = parse_list(k, &v)?,
            "hash_bits" => spec.hash_bits = parse_list(k, &v)?,
            "lookback" => spec.lookback = Some(parse_value(k, &v)?),
            "scoring_window" => spec.scoring_window = parse_value(k, &v)?,
            "per_block_anchors" => spec.per_block_anchors = parse_bool(k, &v)?,
            "policies" | "policy" => {
                spec.policies = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse().map_err(HarnessError::InvalidSpec))
                    .collect::<Result<_, _>>()?
            }
            "summary_size" => spec.summary_size = Some(parse_value(k, &v)?),
            "repetitions" => spec.repetitions = parse_value(k, &v)?,
            "mid_needles" => mid = Some(parse_value(k, &v)?),
            "needle_cosine" => cosine = parse_value(k, &v)?,
            "needles" => explicit = Some(parse_needles(&v)?),
            _ => return Err(HarnessError::InvalidSpec(format!("unknown spec key `{k}`"))),
        }
    }
    spec.needles = match (explicit, mid) {
        (Some(_), Some(_)) => {
            return Err(HarnessError::InvalidSpec(
                "give either `needles` or `mid_needles`, not both".into(),
            ))
        }
        (Some(list), None) => NeedleLayout::Explicit(list),
        (None, Some(0)) => NeedleLayout::None,
        (None, Some(count)) => NeedleLayout::MidContext { count, cosine },
        (None, None) => match spec.needles {
            NeedleLayout::MidContext { count, .. } => NeedleLayout::MidContext { count, cosine },
            other => other,
        },
    };
    Ok(spec)
}

/// Parses `pos:cos, pos:cos, ...`.
pub fn parse_needles(v: &str) -> Result<Vec<(usize, f32)>, HarnessError> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let (p, c) = item.split_once(':').ok_or_else(|| {
                HarnessError::InvalidSpec(format!("needle `{item}` is not pos:cosine"))
            })?;
            Ok((parse_value("needles", p)?, parse_value("needles", c)?))
        })
        .collect()
}
