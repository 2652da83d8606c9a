//! Synthetic key/value/query traces and their on-disk format.
//!
//! Background vectors are standard normal samples normalized to unit length
//! per (token, layer, head), which makes their directions uniform on the
//! sphere. Needles are keys rotated toward the probe query (the query of the
//! last token) so that their cosine to it is a chosen value in every slot.
//!
//! Random numbers come from ChaCha8 seeded with the trace seed through
//! `seed_from_u64`; normals are drawn with the ziggurat sampler of
//! `rand_distr::StandardNormal`. Keys for all tokens are drawn first, then
//! values, then queries, each in (token, layer, head, dim) order.
//!
//! File layout (`LKVT`, all little-endian):
//!
//! ```text
//! magic "LKVT" | version u32 | L u32 | H u32 | d u32 | T u32 | needles u32 | seed u64
//! needles x (position u32 | target_cosine f32 | label_len u16 | label bytes)
//! keys f32[T*L*H*d] | values f32[..] | queries f32[..]
//! crc32 u32 over the three tensor arrays
//! ```

use std::fs;
use std::io;
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::config::ModelShape;

pub const TRACE_MAGIC: &[u8; 4] = b"LKVT";
pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("not a trace file (bad magic)")]
    BadMagic,
    #[error("unsupported trace format version {0}")]
    UnsupportedVersion(u32),
    #[error("trace file is corrupt: {0}")]
    TraceCorrupt(String),
    #[error("payload checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("invalid model shape {0:?}")]
    InvalidShape(ModelShape),
    #[error("needle position {position} out of range for {num_tokens} tokens")]
    NeedleOutOfRange { position: usize, num_tokens: usize },
    #[error("duplicate needle position {0}")]
    DuplicateNeedle(usize),
    #[error("needle target cosine {0} outside [-1, 1]")]
    CosineOutOfRange(f32),
    #[error("head dimension 1 cannot realise cosine {0}")]
    UnattainableCosine(f32),
    #[error("needle label longer than 65535 bytes")]
    LabelTooLong,
    #[error("tensor length {got} does not match shape (expected {expected})")]
    TensorShape { expected: usize, got: usize },
    #[error("token count {0} exceeds the u32 range")]
    TooManyTokens(usize),
}

/// A planted high-relevance key.
#[derive(Debug, Clone, PartialEq)]
pub struct NeedleAnnotation {
    pub position: usize,
    /// Designed cosine between the needle key and the probe query, per slot.
    pub target_cosine: f32,
    pub label: String,
}

/// Request for a needle in [`generate_trace`].
#[derive(Debug, Clone, PartialEq)]
pub struct NeedleSpec {
    pub position: usize,
    pub target_cosine: f32,
    pub label: String,
}

impl NeedleSpec {
    pub fn new(position: usize, target_cosine: f32) -> Self {
        Self {
            position,
            target_cosine,
            label: format!("needle-{position}"),
        }
    }
}

/// Keys, values and queries for every token, laid out as
/// `(token, layer, head, dim)` row-major `f32` arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct KvTrace {
    shape: ModelShape,
    num_tokens: usize,
    keys: Vec<f32>,
    values: Vec<f32>,
    queries: Vec<f32>,
    needles: Vec<NeedleAnnotation>,
    seed: u64,
}

impl KvTrace {
    /// Assembles a trace from raw tensors, checking shapes and needles.
    pub fn from_parts(
        shape: ModelShape,
        num_tokens: usize,
        keys: Vec<f32>,
        values: Vec<f32>,
        queries: Vec<f32>,
        mut needles: Vec<NeedleAnnotation>,
        seed: u64,
    ) -> Result<Self, TraceError> {
        if !shape.is_valid() {
            return Err(TraceError::InvalidShape(shape));
        }
        if num_tokens > u32::MAX as usize {
            return Err(TraceError::TooManyTokens(num_tokens));
        }
        let expected = num_tokens * shape.token_stride();
        for got in [keys.len(), values.len(), queries.len()] {
            if got != expected {
                return Err(TraceError::TensorShape { expected, got });
            }
        }
        needles.sort_by_key(|n| n.position);
        check_needles(
            needles.iter().map(|n| (n.position, n.target_cosine)),
            num_tokens,
        )?;
        if needles.iter().any(|n| n.label.len() > u16::MAX as usize) {
            return Err(TraceError::LabelTooLong);
        }
        Ok(Self {
            shape,
            num_tokens,
            keys,
            values,
            queries,
            needles,
            seed,
        })
    }

    pub fn shape(&self) -> ModelShape {
        self.shape
    }

    pub fn num_tokens(&self) -> usize {
        self.num_tokens
    }

    pub fn needles(&self) -> &[NeedleAnnotation] {
        &self.needles
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    #[inline]
    fn offset(&self, token: usize, layer: usize, head: usize) -> usize {
        (token * self.shape.slots() + self.shape.slot_index(layer, head)) * self.shape.head_dim
    }

    #[inline]
    pub fn key(&self, token: usize, layer: usize, head: usize) -> &[f32] {
        let o = self.offset(token, layer, head);
        &self.keys[o..o + self.shape.head_dim]
    }

    #[inline]
    pub fn value(&self, token: usize, layer: usize, head: usize) -> &[f32] {
        let o = self.offset(token, layer, head);
        &self.values[o..o + self.shape.head_dim]
    }

    #[inline]
    pub fn query(&self, token: usize, layer: usize, head: usize) -> &[f32] {
        let o = self.offset(token, layer, head);
        &self.queries[o..o + self.shape.head_dim]
    }

    /// All slots of one token's key, `(layer, head, dim)` order.
    pub fn token_keys(&self, token: usize) -> &[f32] {
        let stride = self.shape.token_stride();
        &self.keys[token * stride..(token + 1) * stride]
    }

    pub fn token_values(&self, token: usize) -> &[f32] {
        let stride = self.shape.token_stride();
        &self.values[token * stride..(token + 1) * stride]
    }

    /// Position of the probe query (the last token).
    pub fn probe_position(&self) -> usize {
        self.num_tokens.saturating_sub(1)
    }

    pub fn keys_mut(&mut self) -> &mut [f32] {
        &mut self.keys
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn queries_mut(&mut self) -> &mut [f32] {
        &mut self.queries
    }
}

fn check_needles(
    needles: impl Iterator<Item = (usize, f32)>,
    num_tokens: usize,
) -> Result<(), TraceError> {
    let mut prev: Option<usize> = None;
    for (position, cosine) in needles {
        if position >= num_tokens {
            return Err(TraceError::NeedleOutOfRange {
                position,
                num_tokens,
            });
        }
        if prev == Some(position) {
            return Err(TraceError::DuplicateNeedle(position));
        }
        if !(-1.0..=1.0).contains(&cosine) {
            return Err(TraceError::CosineOutOfRange(cosine));
        }
        prev = Some(position);
    }
    Ok(())
}

/// Draws `n` unit vectors as normalized Gaussian samples.
fn fill_unit_vectors(rng: &mut ChaCha8Rng, out: &mut [f32], dim: usize) {
    let mut buf = vec![0f64; dim];
    for chunk in out.chunks_mut(dim) {
        loop {
            let mut norm2 = 0.0;
            for x in buf.iter_mut() {
                *x = StandardNormal.sample(rng);
                norm2 += *x * *x;
            }
            if norm2 > 0.0 {
                let inv = 1.0 / norm2.sqrt();
                for (o, x) in chunk.iter_mut().zip(&buf) {
                    *o = (x * inv) as f32;
                }
                break;
            }
        }
    }
}

/// Returns `cos * q + sin * w` where `w` is the unit component of `seed_dir`
/// orthogonal to the unit vector `q`.
fn rotate_toward(q: &[f64], seed_dir: &[f32], cosine: f64) -> Option<Vec<f64>> {
    let dot: f64 = q.iter().zip(seed_dir).map(|(a, &b)| a * b as f64).sum();
    let mut w: Vec<f64> = q
        .iter()
        .zip(seed_dir)
        .map(|(a, &b)| b as f64 - dot * a)
        .collect();
    let mut norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-6 {
        // seed direction parallel to q: fall back to the basis vector least aligned with it
        let axis = q
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .map(|(i, _)| i)?;
        w = q.iter().map(|a| -q[axis] * a).collect();
        w[axis] += 1.0;
        norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return None;
        }
    }
    let sin = (1.0 - cosine * cosine).max(0.0).sqrt();
    Some(
        q.iter()
            .zip(&w)
            .map(|(a, b)| cosine * a + sin * b / norm)
            .collect(),
    )
}

/// Generates a trace of `num_tokens` tokens with needles planted against the
/// probe query. Deterministic in all arguments.
pub fn generate_trace(
    shape: ModelShape,
    num_tokens: usize,
    needle_spec: &[NeedleSpec],
    seed: u64,
) -> Result<KvTrace, TraceError> {
    if !shape.is_valid() {
        return Err(TraceError::InvalidShape(shape));
    }
    if num_tokens > u32::MAX as usize {
        return Err(TraceError::TooManyTokens(num_tokens));
    }
    let mut needles: Vec<NeedleSpec> = needle_spec.to_vec();
    needles.sort_by_key(|n| n.position);
    check_needles(
        needles.iter().map(|n| (n.position, n.target_cosine)),
        num_tokens,
    )?;
    for n in &needles {
        if shape.head_dim == 1 && n.target_cosine.abs() != 1.0 {
            return Err(TraceError::UnattainableCosine(n.target_cosine));
        }
        if n.label.len() > u16::MAX as usize {
            return Err(TraceError::LabelTooLong);
        }
    }

    let d = shape.head_dim;
    let len = num_tokens * shape.token_stride();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keys = vec![0f32; len];
    let mut values = vec![0f32; len];
    let mut queries = vec![0f32; len];
    fill_unit_vectors(&mut rng, &mut keys, d);
    fill_unit_vectors(&mut rng, &mut values, d);
    fill_unit_vectors(&mut rng, &mut queries, d);

    let mut trace = KvTrace {
        shape,
        num_tokens,
        keys,
        values,
        queries,
        needles: Vec::with_capacity(needles.len()),
        seed,
    };
    let probe = trace.probe_position();
    for n in needles {
        for layer in 0..shape.num_layers {
            for head in 0..shape.num_heads {
                let q: Vec<f64> = trace
                    .query(probe, layer, head)
                    .iter()
                    .map(|&x| x as f64)
                    .collect();
                let o = trace.offset(n.position, layer, head);
                let key = rotate_toward(&q, &trace.keys[o..o + d], n.target_cosine as f64)
                    .ok_or(TraceError::UnattainableCosine(n.target_cosine))?;
                for (dst, src) in trace.keys[o..o + d].iter_mut().zip(key) {
                    *dst = src as f32;
                }
            }
        }
        trace.needles.push(NeedleAnnotation {
            position: n.position,
            target_cosine: n.target_cosine,
            label: n.label,
        });
    }
    Ok(trace)
}

/// Serializes a trace to the `LKVT` byte layout.
pub fn encode_trace(trace: &KvTrace) -> Result<Vec<u8>, TraceError> {
    let tensor_bytes = 3 * trace.keys.len() * 4;
    let mut out = Vec::with_capacity(36 + tensor_bytes + 4);
    out.extend_from_slice(TRACE_MAGIC);
    out.extend_from_slice(&TRACE_VERSION.to_le_bytes());
    for v in [
        trace.shape.num_layers,
        trace.shape.num_heads,
        trace.shape.head_dim,
        trace.num_tokens,
        trace.needles.len(),
    ] {
        let v = u32::try_from(v).map_err(|_| TraceError::TooManyTokens(v))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&trace.seed.to_le_bytes());
    for n in &trace.needles {
        out.extend_from_slice(&(n.position as u32).to_le_bytes());
        out.extend_from_slice(&n.target_cosine.to_le_bytes());
        let label = n.label.as_bytes();
        let len = u16::try_from(label.len()).map_err(|_| TraceError::LabelTooLong)?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(label);
    }
    let payload_start = out.len();
    for tensor in [&trace.keys, &trace.values, &trace.queries] {
        for x in tensor.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out[payload_start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], TraceError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| TraceError::TraceCorrupt(format!("truncated while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16, TraceError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, TraceError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, TraceError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32_array(&mut self, n: usize, what: &str) -> Result<Vec<f32>, TraceError> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| TraceError::TraceCorrupt(format!("{what} size overflows")))?;
        let raw = self.take(bytes, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Parses the `LKVT` byte layout.
pub fn decode_trace(buf: &[u8]) -> Result<KvTrace, TraceError> {
    let mut r = Reader { buf, pos: 0 };
    if buf.len() < 4 {
        return Err(TraceError::TraceCorrupt(
            "truncated while reading magic".into(),
        ));
    }
    if r.take(4, "magic")? != TRACE_MAGIC {
        return Err(TraceError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != TRACE_VERSION {
        return Err(TraceError::UnsupportedVersion(version));
    }
    let layers = r.u32("layer count")? as usize;
    let heads = r.u32("head count")? as usize;
    let dim = r.u32("head dim")? as usize;
    let tokens = r.u32("token count")? as usize;
    let needle_count = r.u32("needle count")? as usize;
    let seed = r.u64("seed")?;
    let shape = ModelShape::new(layers, heads, dim);
    if !shape.is_valid() {
        return Err(TraceError::TraceCorrupt(format!("invalid shape {shape:?}")));
    }

    let mut needles = Vec::new();
    for _ in 0..needle_count {
        let position = r.u32("needle position")? as usize;
        let target_cosine = f32::from_le_bytes(r.take(4, "needle cosine")?.try_into().unwrap());
        let len = r.u16("needle label length")? as usize;
        let label = std::str::from_utf8(r.take(len, "needle label")?)
            .map_err(|_| TraceError::TraceCorrupt("needle label is not UTF-8".into()))?
            .to_owned();
        needles.push(NeedleAnnotation {
            position,
            target_cosine,
            label,
        });
    }

    let elems = tokens
        .checked_mul(shape.token_stride())
        .ok_or_else(|| TraceError::TraceCorrupt("tensor size overflows".into()))?;
    let payload_start = r.pos;
    let keys = r.f32_array(elems, "keys")?;
    let values = r.f32_array(elems, "values")?;
    let queries = r.f32_array(elems, "queries")?;
    let payload_end = r.pos;
    let stored = r.u32("checksum")?;
    if r.pos != buf.len() {
        return Err(TraceError::TraceCorrupt(format!(
            "{} trailing bytes after checksum",
            buf.len() - r.pos
        )));
    }
    let computed = crc32fast::hash(&buf[payload_start..payload_end]);
    if stored != computed {
        return Err(TraceError::ChecksumMismatch { stored, computed });
    }
    let trace = KvTrace::from_parts(shape, tokens, keys, values, queries, needles, seed)
        .map_err(|e| TraceError::TraceCorrupt(e.to_string()))?;
    Ok(trace)
}

pub fn save_trace(trace: &KvTrace, path: impl AsRef<Path>) -> Result<(), TraceError> {
    fs::write(path, encode_trace(trace)?)?;
    Ok(())
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<KvTrace, TraceError> {
    decode_trace(&fs::read(path)?)
}
