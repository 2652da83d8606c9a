//! Model shape, compression configuration and budget arithmetic.
//!
//! All token counts are integers. The only real-valued inputs are the
//! compression ratio `r` and the recall split `alpha`; `r` enters the budget
//! formula through an exact rational evaluation so that the floor is never
//! perturbed by rounding.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Layer/head/dimension geometry of a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelShape {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
}

impl ModelShape {
    pub fn new(num_layers: usize, num_heads: usize, head_dim: usize) -> Self {
        Self {
            num_layers,
            num_heads,
            head_dim,
        }
    }

    /// Number of (layer, head) slots.
    #[inline]
    pub fn slots(&self) -> usize {
        self.num_layers * self.num_heads
    }

    /// Reals stored per token for one tensor (keys, values or queries).
    #[inline]
    pub fn token_stride(&self) -> usize {
        self.slots() * self.head_dim
    }

    #[inline]
    pub fn slot_index(&self, layer: usize, head: usize) -> usize {
        layer * self.num_heads + head
    }

    pub fn is_valid(&self) -> bool {
        self.num_layers >= 1 && self.num_heads >= 1 && self.head_dim >= 1
    }
}

/// Tunables of one compression run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionConfig {
    /// Tokens per block (`S_block`).
    pub block_size: usize,
    /// Compression ratio `r` in (0, 1].
    pub compression_ratio: f64,
    /// Protection divisor `n` (>= 2).
    pub protection_divisor: usize,
    /// Share of the recall budget given to exact attention Top-K.
    pub alpha: f64,
    /// SimHash rounds `R`.
    pub hash_rounds: usize,
    /// Sign bits per hash function `K` (at most 64).
    pub hash_bits: usize,
    /// Tail of the previous block re-scored with the current block.
    /// `None` means one local-window share, `floor(B / n)`.
    pub lookback: Option<usize>,
    /// Trailing query rows of the scoring window used as the observation window.
    pub scoring_window: usize,
    /// Seed for the hash projections.
    pub rng_seed: u64,
    /// Reserve anchors at the start of every block instead of only the
    /// sequence start.
    pub per_block_anchors: bool,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self {
            block_size: 4096,
            compression_ratio: 0.25,
            protection_divisor: 4,
            alpha: 0.75,
            hash_rounds: 64,
            hash_bits: 8,
            lookback: None,
            scoring_window: 32,
            rng_seed: 0,
            per_block_anchors: false,
        }
    }
}

/// Partition of a block budget into anchor, local-window and recall shares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub total: usize,
    pub anchor: usize,
    pub local: usize,
    pub recall: usize,
}

/// One violated configuration constraint.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("protection divisor {0} is below 2")]
    DivisorTooSmall(usize),
    #[error("alpha {0} is outside [0, 1]")]
    AlphaOutOfRange(f64),
    #[error("compression ratio {0} is outside (0, 1]")]
    RatioOutOfRange(f64),
    #[error("block size {block_size} is smaller than the protection divisor {divisor}")]
    BlockSmallerThanDivisor { block_size: usize, divisor: usize },
    #[error("hash rounds must be at least 1")]
    ZeroHashRounds,
    #[error("hash bits {0} outside 1..=64")]
    HashBitsOutOfRange(usize),
    #[error("scoring window must be at least 1")]
    ZeroScoringWindow,
    #[error("model shape {0:?} has a zero dimension")]
    InvalidShape(ModelShape),
    #[error("context length must be at least 1")]
    EmptyContext,
    #[error("token count {0} exceeds the u32 range")]
    TooManyTokens(usize),
}

impl ConfigError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            ConfigError::DivisorTooSmall(_) => "DivisorTooSmall",
            ConfigError::AlphaOutOfRange(_) => "AlphaOutOfRange",
            ConfigError::RatioOutOfRange(_) => "RatioOutOfRange",
            ConfigError::BlockSmallerThanDivisor { .. } => "BlockSmallerThanDivisor",
            ConfigError::ZeroHashRounds => "ZeroHashRounds",
            ConfigError::HashBitsOutOfRange(_) => "HashBitsOutOfRange",
            ConfigError::ZeroScoringWindow => "ZeroScoringWindow",
            ConfigError::InvalidShape(_) => "InvalidShape",
            ConfigError::EmptyContext => "EmptyContext",
            ConfigError::TooManyTokens(_) => "TooManyTokens",
        }
    }
}

/// Every constraint a config violated, in check order.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigErrors(pub Vec<ConfigError>);

impl ConfigErrors {
    pub fn codes(&self) -> Vec<&'static str> {
        self.0.iter().map(ConfigError::code).collect()
    }

    pub fn contains_code(&self, code: &str) -> bool {
        self.0.iter().any(|e| e.code() == code)
    }
}

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{}: {}", e.code(), e)?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

/// A config that passed validation, with its derived budget attached.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedConfig {
    pub config: CompressionConfig,
    pub shape: ModelShape,
    pub context_len: usize,
    pub plan: BudgetPlan,
}

impl ValidatedConfig {
    /// Look-back tail length after resolving the default.
    pub fn lookback(&self) -> usize {
        self.config.lookback.unwrap_or(self.plan.local)
    }

    pub fn num_blocks(&self) -> usize {
        self.context_len.div_ceil(self.config.block_size)
    }
}

/// Per-block budget: `floor(2 r S L / (S + L))`, the compression ratio times
/// the harmonic mean of block size and context length.
///
/// `r` is taken as the decimal it prints as (the shortest representation that
/// round-trips), written `m / 10^k`, and the floor is computed on integers:
/// `floor(2 m S L / ((S + L) 10^k))`. A ratio of `0.3` therefore means exactly
/// three tenths, not the nearest binary fraction.
pub fn effective_budget(r: f64, s_block: usize, l_total: usize) -> usize {
    debug_assert!(r > 0.0 && r <= 1.0, "ratio {r} outside (0, 1]");
    debug_assert!(s_block >= 1 && l_total >= 1);
    let exact = decimal_fraction(r).and_then(|(mantissa, scale)| {
        let num = 2u128
            .checked_mul(mantissa)?
            .checked_mul(s_block as u128)?
            .checked_mul(l_total as u128)?;
        let den = (s_block as u128)
            .checked_add(l_total as u128)?
            .checked_mul(scale)?;
        Some(num / den)
    });
    match exact {
        Some(q) => usize::try_from(q).unwrap_or(usize::MAX),
        None => {
            let s = s_block as f64;
            let l = l_total as f64;
            (2.0 * r * s * l / (s + l)).floor() as usize
        }
    }
}

/// Writes a non-negative finite `x` as `mantissa / scale` with `scale` a power
/// of ten, using its shortest round-trip decimal form.
fn decimal_fraction(x: f64) -> Option<(u128, u128)> {
    if !x.is_finite() || x < 0.0 {
        return None;
    }
    let text = x.to_string();
    let (int_part, frac_part) = text.split_once('.').unwrap_or((&text, ""));
    let scale = 10u128.checked_pow(u32::try_from(frac_part.len()).ok()?)?;
    let int: u128 = int_part.parse().ok()?;
    let frac: u128 = if frac_part.is_empty() {
        0
    } else {
        frac_part.parse().ok()?
    };
    Some((int.checked_mul(scale)?.checked_add(frac)?, scale))
}

/// Splits budget `b` into `floor(b/n)` anchors, `floor(b/n)` local-window
/// tokens and the remainder as recall.
pub fn partition_budget(b: usize, n: usize) -> Result<BudgetPlan, ConfigError> {
    if n < 2 {
        return Err(ConfigError::DivisorTooSmall(n));
    }
    let share = b / n;
    Ok(BudgetPlan {
        total: b,
        anchor: share,
        local: share,
        recall: b - 2 * share,
    })
}

/// Checks every constraint and returns either the config with its budget plan
/// or the full list of violations.
pub fn validate_config(
    cfg: &CompressionConfig,
    shape: ModelShape,
    l_total: usize,
) -> Result<ValidatedConfig, ConfigErrors> {
    let mut errors = Vec::new();
    if !shape.is_valid() {
        errors.push(ConfigError::InvalidShape(shape));
    }
    if l_total == 0 {
        errors.push(ConfigError::EmptyContext);
    }
    if l_total > u32::MAX as usize {
        errors.push(ConfigError::TooManyTokens(l_total));
    }
    if cfg.protection_divisor < 2 {
        errors.push(ConfigError::DivisorTooSmall(cfg.protection_divisor));
    }
    if !(cfg.alpha >= 0.0 && cfg.alpha <= 1.0) {
        errors.push(ConfigError::AlphaOutOfRange(cfg.alpha));
    }
    if !(cfg.compression_ratio > 0.0 && cfg.compression_ratio <= 1.0) {
        errors.push(ConfigError::RatioOutOfRange(cfg.compression_ratio));
    }
    if cfg.block_size < cfg.protection_divisor.max(1) {
        errors.push(ConfigError::BlockSmallerThanDivisor {
            block_size: cfg.block_size,
            divisor: cfg.protection_divisor,
        });
    }
    if cfg.block_size > u32::MAX as usize {
        errors.push(ConfigError::TooManyTokens(cfg.block_size));
    }
    if cfg.hash_rounds == 0 {
        errors.push(ConfigError::ZeroHashRounds);
    }
    if cfg.hash_bits == 0 || cfg.hash_bits > 64 {
        errors.push(ConfigError::HashBitsOutOfRange(cfg.hash_bits));
    }
    if cfg.scoring_window == 0 {
        errors.push(ConfigError::ZeroScoringWindow);
    }
    if !errors.is_empty() {
        return Err(ConfigErrors(errors));
    }

    let budget = effective_budget(cfg.compression_ratio, cfg.block_size, l_total);
    let plan =
        partition_budget(budget, cfg.protection_divisor).map_err(|e| ConfigErrors(vec![e]))?;
    if plan.recall == 0 {
        tracing::warn!(
            budget,
            divisor = cfg.protection_divisor,
            "recall budget is zero; selection degenerates to anchors and local window"
        );
    }
    Ok(ValidatedConfig {
        config: cfg.clone(),
        shape,
        context_len: l_total,
        plan,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn budget_examples() {
        assert_eq!(effective_budget(0.25, 4096, 16384), 1638);
        assert_eq!(effective_budget(0.25, 4096, 4096), 1024);
        assert_eq!(effective_budget(1.0, 1, 1), 1);
    }

    #[test]
    fn decimal_decomposition() {
        assert_eq!(decimal_fraction(0.25), Some((25, 100)));
        assert_eq!(decimal_fraction(1.0), Some((1, 1)));
        assert_eq!(decimal_fraction(0.1), Some((1, 10)));
        assert_eq!(decimal_fraction(1e-300), None);
    }

    #[test]
    fn budget_uses_decimal_ratio() {
        // 0.3 is slightly below 3/10 in binary; the decimal reading gives 3.
        assert_eq!(effective_budget(0.3, 10, 10), 3);
        assert_eq!(effective_budget(0.7, 10, 10), 7);
        assert_eq!(effective_budget(0.1, 10, 10), 1);
        assert_eq!(effective_budget(1e-300, 10, 10), 0);
    }

    #[test]
    fn partition_examples() {
        let p = partition_budget(1638, 4).unwrap();
        assert_eq!((p.anchor, p.local, p.recall), (409, 409, 820));
        let p = partition_budget(0, 4).unwrap();
        assert_eq!((p.anchor, p.local, p.recall), (0, 0, 0));
        let p = partition_budget(7, 2).unwrap();
        assert_eq!((p.anchor, p.local, p.recall), (3, 3, 1));
        assert_eq!(
            partition_budget(10, 1),
            Err(ConfigError::DivisorTooSmall(1))
        );
    }

    #[test]
    fn validate_accepts_defaults() {
        let cfg = CompressionConfig::default();
        let v = validate_config(&cfg, ModelShape::new(2, 2, 8), 4096).unwrap();
        assert_eq!(v.plan, partition_budget(1024, 4).unwrap());
        assert_eq!(v.lookback(), 256);
        assert_eq!(v.num_blocks(), 1);
    }

    #[test]
    fn validate_reports_every_violation() {
        let cfg = CompressionConfig {
            protection_divisor: 1,
            alpha: 1.5,
            compression_ratio: 0.0,
            hash_bits: 65,
            scoring_window: 0,
            ..CompressionConfig::default()
        };
        let err = validate_config(&cfg, ModelShape::new(0, 1, 1), 0).unwrap_err();
        assert_eq!(
            err.codes(),
            vec![
                "InvalidShape",
                "EmptyContext",
                "DivisorTooSmall",
                "AlphaOutOfRange",
                "RatioOutOfRange",
                "HashBitsOutOfRange",
                "ZeroScoringWindow",
            ]
        );
    }

    #[test]
    fn validate_single_errors() {
        let shape = ModelShape::new(2, 2, 8);
        let bad = |cfg: CompressionConfig| validate_config(&cfg, shape, 4096).unwrap_err();
        assert!(bad(CompressionConfig {
            protection_divisor: 1,
            ..Default::default()
        })
        .contains_code("DivisorTooSmall"));
        assert!(bad(CompressionConfig {
            alpha: 1.5,
            ..Default::default()
        })
        .contains_code("AlphaOutOfRange"));
        assert!(bad(CompressionConfig {
            alpha: f64::NAN,
            ..Default::default()
        })
        .contains_code("AlphaOutOfRange"));
        assert!(bad(CompressionConfig {
            block_size: 3,
            ..Default::default()
        })
        .contains_code("BlockSmallerThanDivisor"));
        assert!(bad(CompressionConfig {
            hash_rounds: 0,
            ..Default::default()
        })
        .contains_code("ZeroHashRounds"));
    }

    #[test]
    fn zero_recall_is_permitted() {
        let cfg = CompressionConfig {
            protection_divisor: 2,
            block_size: 4,
            compression_ratio: 1.0,
            ..Default::default()
        };
        let v = validate_config(&cfg, ModelShape::new(1, 1, 4), 4).unwrap();
        assert_eq!(v.plan.recall, 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(512))]

        #[test]
        fn partition_sums(b in 0usize..10_000_000, n in 2usize..10_000) {
            let p = partition_budget(b, n).unwrap();
            prop_assert_eq!(p.anchor + p.local + p.recall, b);
            prop_assert_eq!(p.anchor, b / n);
            prop_assert_eq!(p.local, p.anchor);
        }

        #[test]
        fn budget_symmetric(r in 0.001f64..=1.0, s in 1usize..1_000_000, l in 1usize..1_000_000) {
            prop_assert_eq!(effective_budget(r, s, l), effective_budget(r, l, s));
        }

        #[test]
        fn budget_equal_sizes(q in 1u32..=1024, s in 1usize..1_000_000) {
            // r = q / 1024 is exact in binary, so floor(r s) is an exact integer floor
            let r = q as f64 / 1024.0;
            prop_assert_eq!(effective_budget(r, s, s), (q as usize * s) / 1024);
        }

        #[test]
        fn budget_monotone(
            r1 in 0.001f64..=1.0, r2 in 0.001f64..=1.0,
            s1 in 1usize..100_000, s2 in 1usize..100_000,
            l in 1usize..100_000,
        ) {
            let (rlo, rhi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
            let (slo, shi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
            prop_assert!(effective_budget(rlo, slo, l) <= effective_budget(rhi, slo, l));
            prop_assert!(effective_budget(rlo, slo, l) <= effective_budget(rlo, shi, l));
            prop_assert!(effective_budget(rlo, l, slo) <= effective_budget(rlo, l, shi));
        }
    }
}
