//! SimHash tables and collision-fraction scoring.
//!
//! Each (layer, head) slot owns `R` hash functions of `K` random unit
//! directions. A vector hashes to the K-bit code whose bit `j` is set when its
//! dot product with direction `j` is non-negative. Two vectors at angle `theta`
//! agree on one bit with probability `1 - theta/pi`, so a full K-bit code
//! collides with probability `(1 - theta/pi)^K`. A candidate's collision score
//! is the fraction of rounds in which its code equals the query's, averaged
//! over slots.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::config::ModelShape;
use crate::scoring::{check_positions, ScoringError};
use crate::trace::KvTrace;

/// A K-bit SimHash code, bit `j` for projection `j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SimHashCode(pub u64);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LshError {
    #[error("hash rounds and bits must be at least 1 (got R={rounds}, K={bits})")]
    InvalidSize { rounds: usize, bits: usize },
    #[error("at most 64 bits per hash function (got {0})")]
    TooManyBits(usize),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error("query representative has {got} slots, expected {expected}")]
    RepresentativeShape { expected: usize, got: usize },
}

/// Random projection directions for every slot, round and bit.
#[derive(Debug, Clone, PartialEq)]
pub struct HashTableSet {
    shape: ModelShape,
    num_rounds: usize,
    bits_per_hash: usize,
    seed: u64,
    /// `(slot, round, bit, dim)` row-major.
    projections: Vec<f64>,
}

impl HashTableSet {
    pub fn shape(&self) -> ModelShape {
        self.shape
    }

    pub fn num_rounds(&self) -> usize {
        self.num_rounds
    }

    pub fn bits_per_hash(&self) -> usize {
        self.bits_per_hash
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Projection directions per slot (`R * K`).
    pub fn projections_per_slot(&self) -> usize {
        self.num_rounds * self.bits_per_hash
    }

    fn round_directions(&self, slot: usize, round: usize) -> &[f64] {
        let d = self.shape.head_dim;
        let len = self.bits_per_hash * d;
        let start = (slot * self.num_rounds + round) * len;
        &self.projections[start..start + len]
    }

    pub fn projection(&self, layer: usize, head: usize, round: usize, bit: usize) -> &[f64] {
        let d = self.shape.head_dim;
        let dirs = self.round_directions(self.shape.slot_index(layer, head), round);
        &dirs[bit * d..(bit + 1) * d]
    }
}

/// Draws `R * K` independent unit directions per slot from ChaCha8 seeded
/// with `seed`.
pub fn build_tables(
    shape: ModelShape,
    num_rounds: usize,
    bits_per_hash: usize,
    seed: u64,
) -> Result<HashTableSet, LshError> {
    if num_rounds == 0 || bits_per_hash == 0 {
        return Err(LshError::InvalidSize {
            rounds: num_rounds,
            bits: bits_per_hash,
        });
    }
    if bits_per_hash > 64 {
        return Err(LshError::TooManyBits(bits_per_hash));
    }
    let d = shape.head_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut projections = vec![0f64; shape.slots() * num_rounds * bits_per_hash * d];
    for dir in projections.chunks_mut(d) {
        loop {
            let mut norm2 = 0.0;
            for x in dir.iter_mut() {
                *x = StandardNormal.sample(&mut rng);
                norm2 += *x * *x;
            }
            if norm2 > 0.0 {
                let inv = 1.0 / norm2.sqrt();
                dir.iter_mut().for_each(|x| *x *= inv);
                break;
            }
        }
    }
    Ok(HashTableSet {
        shape,
        num_rounds,
        bits_per_hash,
        seed,
        projections,
    })
}

#[inline]
fn code_from_directions<T: Copy + Into<f64>>(dirs: &[f64], vector: &[T], d: usize) -> SimHashCode {
    let mut code = 0u64;
    for (bit, dir) in dirs.chunks_exact(d).enumerate() {
        let dot: f64 = dir.iter().zip(vector).map(|(a, &b)| a * b.into()).sum();
        // a zero projection counts as the positive side
        if dot >= 0.0 {
            code |= 1 << bit;
        }
    }
    SimHashCode(code)
}

/// Code of `vector` under hash function `round` of slot `(layer, head)`.
pub fn hash_code(
    tables: &HashTableSet,
    vector: &[f32],
    layer: usize,
    head: usize,
    round: usize,
) -> SimHashCode {
    assert!(round < tables.num_rounds, "round {round} out of range");
    assert_eq!(vector.len(), tables.shape.head_dim);
    let slot = tables.shape.slot_index(layer, head);
    code_from_directions(
        tables.round_directions(slot, round),
        vector,
        tables.shape.head_dim,
    )
}

/// Code of an `f64` vector; used for pooled query representatives.
pub fn hash_code_f64(
    tables: &HashTableSet,
    vector: &[f64],
    layer: usize,
    head: usize,
    round: usize,
) -> SimHashCode {
    assert!(round < tables.num_rounds, "round {round} out of range");
    assert_eq!(vector.len(), tables.shape.head_dim);
    let slot = tables.shape.slot_index(layer, head);
    code_from_directions(
        tables.round_directions(slot, round),
        vector,
        tables.shape.head_dim,
    )
}

/// Per-slot unit query vector that stands in for a multi-row query window.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRepresentative {
    /// `(slot, dim)` row-major.
    vectors: Vec<f64>,
    head_dim: usize,
}

impl QueryRepresentative {
    /// Mean of the query rows per slot, normalized to unit length. A zero mean
    /// is left as the zero vector, which hashes to all-ones codes.
    pub fn from_rows(trace: &KvTrace, rows: &[usize]) -> Result<Self, ScoringError> {
        if rows.is_empty() {
            return Err(ScoringError::EmptyQueryRows);
        }
        check_positions(rows, trace.num_tokens())?;
        let shape = trace.shape();
        let d = shape.head_dim;
        let mut vectors = vec![0f64; shape.slots() * d];
        for slot in 0..shape.slots() {
            let (l, h) = (slot / shape.num_heads, slot % shape.num_heads);
            let v = &mut vectors[slot * d..(slot + 1) * d];
            for &r in rows {
                for (acc, &x) in v.iter_mut().zip(trace.query(r, l, h)) {
                    *acc += x as f64;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                v.iter_mut().for_each(|x| *x /= norm);
            }
        }
        Ok(Self {
            vectors,
            head_dim: d,
        })
    }

    /// Builds a representative from explicit per-slot vectors, `(slot, dim)` order.
    pub fn from_vectors(vectors: Vec<f64>, head_dim: usize) -> Self {
        Self { vectors, head_dim }
    }

    pub fn slot(&self, slot: usize) -> &[f64] {
        &self.vectors[slot * self.head_dim..(slot + 1) * self.head_dim]
    }

    pub fn num_slots(&self) -> usize {
        self.vectors.len() / self.head_dim
    }
}

/// Stored SimHash codes for a candidate set: `|C| * R` codes per slot.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateCodes {
    candidate_positions: Vec<usize>,
    num_rounds: usize,
    /// `(slot, candidate, round)` row-major.
    codes: Vec<SimHashCode>,
}

impl CandidateCodes {
    pub fn candidate_positions(&self) -> &[usize] {
        &self.candidate_positions
    }

    /// Number of codes stored for one slot.
    pub fn codes_per_slot(&self) -> usize {
        self.candidate_positions.len() * self.num_rounds
    }

    pub fn total_codes(&self) -> usize {
        self.codes.len()
    }

    fn slot_codes(&self, slot: usize) -> &[SimHashCode] {
        let n = self.codes_per_slot();
        &self.codes[slot * n..(slot + 1) * n]
    }
}

/// Hashes every candidate key in every slot and round.
pub fn hash_candidates(
    tables: &HashTableSet,
    trace: &KvTrace,
    candidates: &[usize],
) -> Result<CandidateCodes, LshError> {
    if candidates.is_empty() {
        return Err(ScoringError::EmptyCandidates.into());
    }
    check_positions(candidates, trace.num_tokens())?;
    let shape = tables.shape;
    let rounds = tables.num_rounds;
    let d = shape.head_dim;
    let per_slot: Vec<Vec<SimHashCode>> = (0..shape.slots())
        .into_par_iter()
        .map(|slot| {
            let (l, h) = (slot / shape.num_heads, slot % shape.num_heads);
            let mut out = Vec::with_capacity(candidates.len() * rounds);
            for &c in candidates {
                let key = trace.key(c, l, h);
                for r in 0..rounds {
                    out.push(code_from_directions(
                        tables.round_directions(slot, r),
                        key,
                        d,
                    ));
                }
            }
            out
        })
        .collect();
    Ok(CandidateCodes {
        candidate_positions: candidates.to_vec(),
        num_rounds: rounds,
        codes: per_slot.into_iter().flatten().collect(),
    })
}

/// Collision fraction per candidate, in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct CollisionScoreVector {
    pub candidate_positions: Vec<usize>,
    pub scores: Vec<f64>,
}

impl CollisionScoreVector {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Scores pre-hashed candidates against the query representative.
pub fn collision_scores_from_codes(
    tables: &HashTableSet,
    codes: &CandidateCodes,
    query: &QueryRepresentative,
) -> Result<CollisionScoreVector, LshError> {
    let shape = tables.shape;
    if query.num_slots() != shape.slots() {
        return Err(LshError::RepresentativeShape {
            expected: shape.slots(),
            got: query.num_slots(),
        });
    }
    let rounds = tables.num_rounds;
    let n = codes.candidate_positions.len();
    let mut matches = vec![0u64; n];
    for slot in 0..shape.slots() {
        let (l, h) = (slot / shape.num_heads, slot % shape.num_heads);
        let query_codes: Vec<SimHashCode> = (0..rounds)
            .map(|r| hash_code_f64(tables, query.slot(slot), l, h, r))
            .collect();
        for (ci, cand) in codes.slot_codes(slot).chunks_exact(rounds).enumerate() {
            matches[ci] += cand
                .iter()
                .zip(&query_codes)
                .filter(|(a, b)| a == b)
                .count() as u64;
        }
    }
    let denom = (rounds * shape.slots()) as f64;
    Ok(CollisionScoreVector {
        candidate_positions: codes.candidate_positions.clone(),
        scores: matches.into_iter().map(|m| m as f64 / denom).collect(),
    })
}

/// Fraction of rounds in which each candidate key's code equals the query
/// representative's code, averaged over (layer, head) slots.
pub fn collision_scores(
    tables: &HashTableSet,
    trace: &KvTrace,
    candidates: &[usize],
    query: &QueryRepresentative,
) -> Result<CollisionScoreVector, LshError> {
    let codes = hash_candidates(tables, trace, candidates)?;
    collision_scores_from_codes(tables, &codes, query)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::generate_trace;

    #[test]
    fn table_shapes() {
        let shape = ModelShape::new(2, 3, 4);
        let t = build_tables(shape, 1, 1, 0).unwrap();
        assert_eq!(t.projections_per_slot(), 1);
        assert_eq!(t.projections.len(), 6 * 4);
        let t = build_tables(shape, 64, 8, 0).unwrap();
        assert_eq!(t.projections_per_slot(), 512);
        let n: f64 = t.projection(1, 2, 63, 7).iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
        assert_eq!(t, build_tables(shape, 64, 8, 0).unwrap());
        assert_ne!(t, build_tables(shape, 64, 8, 1).unwrap());
        assert!(build_tables(shape, 0, 8, 0).is_err());
        assert!(build_tables(shape, 4, 65, 0).is_err());
    }

    #[test]
    fn hash_code_properties() {
        let shape = ModelShape::new(1, 1, 6);
        let tables = build_tables(shape, 16, 12, 3).unwrap();
        let v = [0.3f32, -1.2, 0.5, 0.9, -0.1, 0.05];
        let v2: Vec<f32> = v.iter().map(|x| x * 2.0).collect();
        let neg: Vec<f32> = v.iter().map(|x| -x).collect();
        let mask = (1u64 << 12) - 1;
        for r in 0..16 {
            let c = hash_code(&tables, &v, 0, 0, r);
            assert_eq!(c, hash_code(&tables, &v, 0, 0, r));
            assert_eq!(c, hash_code(&tables, &v2, 0, 0, r));
            assert_eq!(c.0 ^ hash_code(&tables, &neg, 0, 0, r).0, mask);
        }
    }

    #[test]
    fn zero_vector_hashes_to_all_ones() {
        let tables = build_tables(ModelShape::new(1, 1, 3), 2, 5, 0).unwrap();
        assert_eq!(hash_code(&tables, &[0.0; 3], 0, 0, 1), SimHashCode(0b11111));
    }

    #[test]
    fn identical_key_scores_one() {
        let shape = ModelShape::new(2, 2, 8);
        let trace = generate_trace(shape, 16, &[], 1).unwrap();
        let tables = build_tables(shape, 32, 8, 9).unwrap();
        let mut v = Vec::new();
        for slot in 0..4 {
            v.extend(trace.key(5, slot / 2, slot % 2).iter().map(|&x| x as f64));
        }
        let q = QueryRepresentative::from_vectors(v, 8);
        let s = collision_scores(&tables, &trace, &[3, 5, 7], &q).unwrap();
        assert_eq!(s.scores[1], 1.0);
        assert!(s.scores.iter().all(|x| (0.0..=1.0).contains(x)));
    }

    #[test]
    fn code_storage_is_candidates_times_rounds() {
        let shape = ModelShape::new(2, 2, 4);
        let trace = generate_trace(shape, 40, &[], 1).unwrap();
        let tables = build_tables(shape, 7, 3, 0).unwrap();
        let cands: Vec<usize> = (0..23).collect();
        let codes = hash_candidates(&tables, &trace, &cands).unwrap();
        assert_eq!(codes.codes_per_slot(), 23 * 7);
        assert_eq!(codes.total_codes(), 4 * 23 * 7);
    }

    #[test]
    fn representative_is_unit_mean() {
        let shape = ModelShape::new(1, 2, 4);
        let trace = generate_trace(shape, 10, &[], 2).unwrap();
        let rep = QueryRepresentative::from_rows(&trace, &[7, 8, 9]).unwrap();
        for slot in 0..2 {
            let v = rep.slot(slot);
            assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
            let mean: Vec<f64> = (0..4)
                .map(|i| {
                    (7..10)
                        .map(|r| trace.query(r, 0, slot)[i] as f64)
                        .sum::<f64>()
                })
                .collect();
            let dot: f64 = mean.iter().zip(v).map(|(a, b)| a * b).sum();
            let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((dot / norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_candidates_rejected() {
        let shape = ModelShape::new(1, 1, 4);
        let trace = generate_trace(shape, 4, &[], 2).unwrap();
        let tables = build_tables(shape, 2, 2, 0).unwrap();
        let rep = QueryRepresentative::from_rows(&trace, &[3]).unwrap();
        assert!(matches!(
            collision_scores(&tables, &trace, &[], &rep),
            Err(LshError::Scoring(ScoringError::EmptyCandidates))
        ));
    }
}
