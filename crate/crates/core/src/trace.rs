//! Gating-weight traces: the per-token expert weights a router produced for
//! a batch, stored block-major.
//!
//! On disk a trace is a little-endian binary file:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "WDMT"
//! 4       4     u32 format version (currently 1)
//! 8       4     u32 num_blocks
//! 12      4     u32 num_tokens
//! 16      4     u32 num_experts
//! 20      1     u8 dtype tag (4 = f32)
//! 21      3     zero padding to an 8-byte boundary
//! 24      ...   num_blocks * num_tokens * num_experts f32 values,
//!               block-major, token-major, expert-minor
//! ```
//!
//! Only the f32 dtype is defined. Traces loaded into a wider scalar widen
//! each stored value exactly, so a write/load round trip reproduces the
//! in-memory trace bit for bit whenever the weights are f32-representable;
//! [`synth_trace`] quantizes through f32 to guarantee that.

use std::io::{Read as _, Write as _};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::num::Real;

pub const TRACE_MAGIC: [u8; 4] = *b"WDMT";
pub const TRACE_VERSION: u32 = 1;
pub const TRACE_DTYPE_F32: u8 = 4;
const HEADER_LEN: usize = 24;

/// Rows whose sum deviates from 1 by at most this much are accepted as-is.
pub const ROW_SUM_ACCEPT: f64 = 1.0e-6;
/// Rows within this deviation are renormalized on load; beyond it the trace
/// is rejected.
pub const ROW_SUM_RENORMALIZE: f64 = 1.0e-3;

/// Hard cap on total weights in a file, so a corrupt header cannot request
/// an absurd allocation before the payload read fails.
const MAX_ELEMENTS: u64 = 1 << 30;

/// Gating weights for `num_blocks` MoE blocks over a batch of `num_tokens`
/// tokens and `num_experts` experts. Each (block, token) row is a
/// probability vector: nonnegative, summing to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct GatingTrace<T> {
    num_blocks: usize,
    num_tokens: usize,
    num_experts: usize,
    weights: Vec<T>,
}

impl<T: Real> GatingTrace<T> {
    /// Builds a trace from a flat block-major weight buffer, validating row
    /// sums. Rows off by more than [`ROW_SUM_ACCEPT`] but within
    /// [`ROW_SUM_RENORMALIZE`] are rescaled to sum exactly to 1.
    pub fn new(
        num_blocks: usize,
        num_tokens: usize,
        num_experts: usize,
        weights: Vec<T>,
    ) -> Result<Self> {
        if num_blocks == 0 || num_tokens == 0 || num_experts == 0 {
            return Err(Error::Validation(format!(
                "trace dimensions must be positive, got {num_blocks}x{num_tokens}x{num_experts}"
            )));
        }
        let expected = num_blocks
            .checked_mul(num_tokens)
            .and_then(|v| v.checked_mul(num_experts))
            .ok_or_else(|| Error::SizeLimit("trace dimensions overflow".into()))?;
        if weights.len() != expected {
            return Err(Error::Validation(format!(
                "weight buffer has {} values, dimensions require {expected}",
                weights.len()
            )));
        }
        let mut trace = Self {
            num_blocks,
            num_tokens,
            num_experts,
            weights,
        };
        trace.validate_rows()?;
        Ok(trace)
    }

    fn validate_rows(&mut self) -> Result<()> {
        let n = self.num_experts;
        for (r, row) in self.weights.chunks_exact_mut(n).enumerate() {
            let mut sum = T::zero();
            for &w in row.iter() {
                if !w.is_finite() || w < T::zero() {
                    return Err(Error::Validation(format!(
                        "row {r}: weight {w} is negative or non-finite"
                    )));
                }
                sum = sum + w;
            }
            let dev = (sum - T::one()).abs().to_f64_lossy();
            if dev <= ROW_SUM_ACCEPT {
                continue;
            }
            if dev <= ROW_SUM_RENORMALIZE {
                for w in row.iter_mut() {
                    *w = *w / sum;
                }
            } else {
                return Err(Error::Validation(format!(
                    "row {r}: weights sum to {sum}, too far from 1 to repair"
                )));
            }
        }
        Ok(())
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    pub fn num_tokens(&self) -> usize {
        self.num_tokens
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    /// The weight row for one token in one block.
    pub fn row(&self, block: usize, token: usize) -> &[T] {
        let n = self.num_experts;
        let start = (block * self.num_tokens + token) * n;
        &self.weights[start..start + n]
    }

    pub fn weight(&self, block: usize, token: usize, expert: usize) -> T {
        self.row(block, token)[expert]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.weights
    }
}

/// Writes a trace to `path` in the binary format described at module level.
///
/// Values are stored as f32; writing a trace with weights that are not
/// exactly f32-representable narrows them.
pub fn write_trace<T: Real>(trace: &GatingTrace<T>, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN + trace.weights.len() * 4);
    buf.extend_from_slice(&TRACE_MAGIC);
    buf.extend_from_slice(&TRACE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(trace.num_blocks as u32).to_le_bytes());
    buf.extend_from_slice(&(trace.num_tokens as u32).to_le_bytes());
    buf.extend_from_slice(&(trace.num_experts as u32).to_le_bytes());
    buf.push(TRACE_DTYPE_F32);
    buf.extend_from_slice(&[0u8; 3]);
    debug_assert_eq!(buf.len(), HEADER_LEN);
    let mut scratch = [0u8; 4];
    for &w in &trace.weights {
        LittleEndian::write_f32(&mut scratch, w.to_f64_lossy() as f32);
        buf.extend_from_slice(&scratch);
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Loads a trace, checking magic, version, dtype, and payload length, then
/// validating row sums (see [`GatingTrace::new`] for the repair rule).
pub fn load_trace<T: Real>(path: &Path) -> Result<GatingTrace<T>> {
    let mut file = std::fs::File::open(path)?;
    let mut header = [0u8; HEADER_LEN];
    file.read_exact(&mut header)
        .map_err(|_| Error::Format("file shorter than the trace header".into()))?;
    if header[0..4] != TRACE_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:02x?}, expected \"WDMT\"",
            &header[0..4]
        )));
    }
    let version = LittleEndian::read_u32(&header[4..8]);
    if version != TRACE_VERSION {
        return Err(Error::Format(format!(
            "unsupported trace version {version}, expected {TRACE_VERSION}"
        )));
    }
    let num_blocks = LittleEndian::read_u32(&header[8..12]) as usize;
    let num_tokens = LittleEndian::read_u32(&header[12..16]) as usize;
    let num_experts = LittleEndian::read_u32(&header[16..20]) as usize;
    if num_blocks == 0 || num_tokens == 0 || num_experts == 0 {
        return Err(Error::Format(format!(
            "trace dimensions must be positive, got {num_blocks}x{num_tokens}x{num_experts}"
        )));
    }
    let dtype = header[20];
    if dtype != TRACE_DTYPE_F32 {
        return Err(Error::Format(format!(
            "unsupported dtype tag {dtype}, expected {TRACE_DTYPE_F32} (f32)"
        )));
    }
    let count = num_blocks as u64 * num_tokens as u64 * num_experts as u64;
    if count > MAX_ELEMENTS {
        return Err(Error::SizeLimit(format!(
            "trace claims {count} weights, refusing anything above {MAX_ELEMENTS}"
        )));
    }
    let mut payload = vec![0u8; count as usize * 4];
    file.read_exact(&mut payload)
        .map_err(|_| Error::Format("payload shorter than the header promises".into()))?;
    let mut trailing = [0u8; 1];
    if file.read(&mut trailing)? != 0 {
        return Err(Error::Format(
            "trailing bytes after the weight payload".into(),
        ));
    }
    let mut weights = Vec::with_capacity(count as usize);
    for chunk in payload.chunks_exact(4) {
        weights.push(T::cast(f64::from(LittleEndian::read_f32(chunk))));
    }
    GatingTrace::new(num_blocks, num_tokens, num_experts, weights)
}

/// Synthesizes a gating trace with controllable concentration.
///
/// Each row draws `num_experts` standard normal logits, scales them by
/// `peakedness`, and applies a softmax: `peakedness = 0` yields exactly
/// uniform rows, large values concentrate nearly all mass on the top
/// experts. Rows are quantized through f32 so the result survives a disk
/// round trip unchanged; the quantized sums stay within [`ROW_SUM_ACCEPT`].
pub fn synth_trace<T: Real>(
    seed: u64,
    num_blocks: usize,
    num_tokens: usize,
    num_experts: usize,
    peakedness: f64,
) -> Result<GatingTrace<T>> {
    if num_blocks == 0 || num_tokens == 0 || num_experts == 0 {
        return Err(Error::Validation(format!(
            "trace dimensions must be positive, got {num_blocks}x{num_tokens}x{num_experts}"
        )));
    }
    if !(peakedness >= 0.0) || !peakedness.is_finite() {
        return Err(Error::Validation(format!(
            "peakedness must be finite and nonnegative, got {peakedness}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let mut weights = Vec::with_capacity(num_blocks * num_tokens * num_experts);
    let mut logits = vec![0.0f64; num_experts];
    for _ in 0..num_blocks * num_tokens {
        for l in logits.iter_mut() {
            let z: f64 = normal.sample(&mut rng);
            *l = peakedness * z;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut exp = vec![0.0f64; num_experts];
        let mut sum = 0.0;
        for (e, &l) in exp.iter_mut().zip(logits.iter()) {
            *e = (l - max).exp();
            sum += *e;
        }
        for e in &exp {
            // Quantize through f32 so the on-disk narrowing is the identity.
            weights.push(T::cast(f64::from((e / sum) as f32)));
        }
    }
    GatingTrace::new(num_blocks, num_tokens, num_experts, weights)
}

/// Writes a trace as CSV with header `block,token,e0..e{n-1}`, one row per
/// (block, token).
pub fn export_csv<T: Real, W: std::io::Write>(trace: &GatingTrace<T>, out: &mut W) -> Result<()> {
    let mut header = String::from("block,token");
    for e in 0..trace.num_experts {
        header.push_str(&format!(",e{e}"));
    }
    writeln!(out, "{header}")?;
    for block in 0..trace.num_blocks {
        for token in 0..trace.num_tokens {
            let mut line = format!("{block},{token}");
            for &w in trace.row(block, token) {
                line.push_str(&format!(",{w}"));
            }
            writeln!(out, "{line}")?;
        }
    }
    Ok(())
}
