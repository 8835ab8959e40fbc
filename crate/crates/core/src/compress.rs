//! Update compressors and their wire objects.
//!
//! Three families are supported: magnitude masking (top-k), stochastic
//! uniform quantization and single-step power-iteration low-rank
//! factorization, plus an identity compressor. Every compressed update
//! carries the span of rounds it covers so consecutive server updates can
//! be merged into one download.
//!
//! Wire sizes count 4 bytes per transmitted value. Values are held in
//! memory as `f64`; top-k, dense and quantization scales are rounded to
//! `f32` when produced so the in-memory value is exactly the wire value.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::model::{check_dim, MatrixShape, ParamVector, RngStream};
use crate::{Error, Result, Round};

/// Bytes per value on the wire.
pub const VALUE_BYTES: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum CompressorConfig {
    /// Keep the `ceil(ratio * dim)` largest-magnitude entries.
    TopK { ratio: f64 },
    /// Stochastic uniform quantization to `bits` signed bits per value.
    Quant { bits: u32 },
    /// One power-iteration step to a rank-`rank` factorization.
    LowRank { rank: usize },
    Identity,
}

impl CompressorConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            CompressorConfig::TopK { ratio } if !(ratio > 0.0 && ratio <= 1.0) => Err(
                Error::config("compressor", format!("top-k ratio {ratio} not in (0, 1]")),
            ),
            // One bit leaves no non-zero level in a symmetric signed code.
            CompressorConfig::Quant { bits } if !(2..=32).contains(&bits) => Err(Error::config(
                "compressor",
                format!("quantization bits {bits} not in [2, 32]"),
            )),
            CompressorConfig::LowRank { rank: 0 } => {
                Err(Error::config("compressor", "low-rank rank must be >= 1"))
            }
            _ => Ok(()),
        }
    }

    pub fn is_masking(&self) -> bool {
        matches!(self, CompressorConfig::TopK { .. })
    }

    /// Number of entries top-k keeps for a vector of `dim` values.
    pub fn topk_count(ratio: f64, dim: usize) -> usize {
        ((ratio * dim as f64).ceil() as usize).clamp(1, dim)
    }

    /// Wire size of one freshly compressed (non-accumulated) update.
    pub fn single_round_size(&self, shape: MatrixShape) -> u64 {
        let dim = shape.dim();
        match *self {
            CompressorConfig::TopK { ratio } => {
                bitmap_bytes(dim) + VALUE_BYTES * Self::topk_count(ratio, dim) as u64
            }
            CompressorConfig::Quant { bits } => quant_segment_bytes(bits, dim),
            CompressorConfig::LowRank { rank } => {
                let r = effective_rank(rank, shape);
                VALUE_BYTES * (r * (shape.rows + shape.cols)) as u64
            }
            CompressorConfig::Identity => dense_bytes(dim),
        }
    }
}

impl fmt::Display for CompressorConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CompressorConfig::TopK { ratio } => write!(f, "topk:{ratio}"),
            CompressorConfig::Quant { bits } => write!(f, "quant:{bits}"),
            CompressorConfig::LowRank { rank } => write!(f, "lowrank:{rank}"),
            CompressorConfig::Identity => write!(f, "identity"),
        }
    }
}

impl FromStr for CompressorConfig {
    type Err = Error;

    /// Parses `topk:<ratio>`, `quant:<bits>`, `lowrank:<rank>` or `identity`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = |reason: String| Error::config("compressor", reason);
        let (kind, arg) = match s.trim().split_once(':') {
            Some((k, a)) => (k.trim(), Some(a.trim())),
            None => (s.trim(), None),
        };
        let cfg = match (kind, arg) {
            ("identity", None) | ("dense", None) => CompressorConfig::Identity,
            ("topk", Some(a)) => CompressorConfig::TopK {
                ratio: a.parse().map_err(|_| bad(format!("bad ratio `{a}`")))?,
            },
            ("quant", Some(a)) => CompressorConfig::Quant {
                bits: a.parse().map_err(|_| bad(format!("bad bit count `{a}`")))?,
            },
            ("lowrank", Some(a)) => CompressorConfig::LowRank {
                rank: a.parse().map_err(|_| bad(format!("bad rank `{a}`")))?,
            },
            _ => return Err(bad(format!("unknown compressor `{s}`"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl TryFrom<String> for CompressorConfig {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<CompressorConfig> for String {
    fn from(c: CompressorConfig) -> Self {
        c.to_string()
    }
}

/// One quantized vector: `value_i = scale * codes[i] / (2^(bits-1) - 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantSegment {
    pub scale: f32,
    pub codes: Vec<i32>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// Canonical empty update (covers no rounds, zero bytes).
    Zero,
    /// Strictly increasing positions with their values.
    Masked { indices: Vec<u32>, values: Vec<f64> },
    /// Quantized segments whose decodings are summed.
    Quantized { bits: u32, segments: Vec<QuantSegment> },
    /// `P` is `rows × rank`, `Q` is `rank × cols`, both row-major.
    LowRank {
        shape: MatrixShape,
        rank: usize,
        p: Vec<f64>,
        q: Vec<f64>,
    },
    Dense { values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedUpdate {
    dim: usize,
    span: Option<(Round, Round)>,
    payload: Payload,
}

impl CompressedUpdate {
    pub fn zero(dim: usize) -> Self {
        Self {
            dim,
            span: None,
            payload: Payload::Zero,
        }
    }

    pub fn dense(round: Round, values: Vec<f64>) -> Self {
        Self {
            dim: values.len(),
            span: Some((round, round)),
            payload: Payload::Dense { values },
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Inclusive `(first, last)` rounds covered; `None` for the zero update.
    pub fn span(&self) -> Option<(Round, Round)> {
        self.span
    }

    pub fn payload(&self) -> &Payload {
        &self.payload
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.payload, Payload::Dense { .. })
    }

    /// Number of non-zero positions a mask transmits.
    pub fn mask_len(&self) -> Option<usize> {
        match &self.payload {
            Payload::Masked { indices, .. } => Some(indices.len()),
            _ => None,
        }
    }

    pub fn wire_size(&self) -> u64 {
        wire_size(self)
    }
}

fn bitmap_bytes(dim: usize) -> u64 {
    dim.div_ceil(8) as u64
}

fn dense_bytes(dim: usize) -> u64 {
    VALUE_BYTES * dim as u64
}

fn quant_segment_bytes(bits: u32, dim: usize) -> u64 {
    VALUE_BYTES + (u64::from(bits) * dim as u64).div_ceil(8)
}

fn quant_levels(bits: u32) -> f64 {
    ((1u64 << (bits - 1)) - 1) as f64
}

fn effective_rank(rank: usize, shape: MatrixShape) -> usize {
    rank.min(shape.rows).min(shape.cols)
}

/// Byte count of `cu` on the wire.
///
/// Dense: `4·dim`; masked: `ceil(dim/8)` bitmap plus `4·nnz`; quantized: per
/// segment a 4-byte scale plus `ceil(bits·dim/8)`; low-rank: `4·r·(a+b)`.
pub fn wire_size(cu: &CompressedUpdate) -> u64 {
    match &cu.payload {
        Payload::Zero => 0,
        Payload::Dense { values } => dense_bytes(values.len()),
        Payload::Masked { indices, .. } => {
            bitmap_bytes(cu.dim) + VALUE_BYTES * indices.len() as u64
        }
        Payload::Quantized { bits, segments } => {
            segments.len() as u64 * quant_segment_bytes(*bits, cu.dim)
        }
        Payload::LowRank { shape, rank, .. } => {
            VALUE_BYTES * (rank * (shape.rows + shape.cols)) as u64
        }
    }
}

/// Compresses the update produced in `round`.
///
/// `shape` is only consulted by the low-rank compressor; `rng` only by
/// quantization and low-rank.
pub fn compress(
    cfg: &CompressorConfig,
    round: Round,
    update: &ParamVector,
    shape: MatrixShape,
    rng: &RngStream,
) -> Result<CompressedUpdate> {
    cfg.validate()?;
    let v = update.as_slice();
    let payload = match *cfg {
        CompressorConfig::TopK { ratio } => topk(v, ratio),
        CompressorConfig::Quant { bits } => Payload::Quantized {
            bits,
            segments: vec![quantize(v, bits, rng)],
        },
        CompressorConfig::LowRank { rank } => {
            check_dim(shape.dim(), v.len())?;
            low_rank(v, shape, rank, rng)
        }
        CompressorConfig::Identity => Payload::Dense {
            values: v.iter().map(|&x| round_f32(x)).collect(),
        },
    };
    Ok(CompressedUpdate {
        dim: v.len(),
        span: Some((round, round)),
        payload,
    })
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

fn topk(v: &[f64], ratio: f64) -> Payload {
    if v.iter().all(|&x| x == 0.0) {
        return Payload::Masked {
            indices: Vec::new(),
            values: Vec::new(),
        };
    }
    let k = CompressorConfig::topk_count(ratio, v.len());
    let mut order: Vec<u32> = (0..v.len() as u32).collect();
    // Larger magnitude first, lower index first among equal magnitudes.
    let by_rank = |a: &u32, b: &u32| {
        v[*b as usize]
            .abs()
            .total_cmp(&v[*a as usize].abs())
            .then(a.cmp(b))
    };
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, by_rank);
        order.truncate(k);
    }
    order.sort_unstable();
    let values = order.iter().map(|&i| round_f32(v[i as usize])).collect();
    Payload::Masked {
        indices: order,
        values,
    }
}

fn quantize(v: &[f64], bits: u32, rng: &RngStream) -> QuantSegment {
    let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if max == 0.0 {
        return QuantSegment {
            scale: 0.0,
            codes: vec![0; v.len()],
        };
    }
    // The wire scale must not undercut the true maximum, otherwise the
    // largest entry would be clamped and the estimator biased.
    let mut scale = max as f32;
    if f64::from(scale) < max {
        scale = scale.next_up();
    }
    let s = f64::from(scale);
    let levels = quant_levels(bits);
    let mut r = rng.rng();
    let codes = v
        .iter()
        .map(|&x| {
            let y = x / s * levels;
            let lo = y.floor();
            let u: f64 = r.random();
            let q = if u < y - lo { lo + 1.0 } else { lo };
            q.clamp(-levels, levels) as i32
        })
        .collect();
    QuantSegment { scale, codes }
}

fn low_rank(v: &[f64], shape: MatrixShape, rank: usize, rng: &RngStream) -> Payload {
    let (a, b) = (shape.rows, shape.cols);
    let r = effective_rank(rank, shape);
    let mut g = rng.rng();
    let q0: Vec<f64> = (0..b * r).map(|_| g.sample(StandardNormal)).collect();

    // P = M · Q0
    let mut p = vec![0.0; a * r];
    for i in 0..a {
        let row = &v[i * b..(i + 1) * b];
        for k in 0..r {
            p[i * r + k] = (0..b).map(|j| row[j] * q0[j * r + k]).sum();
        }
    }
    orthonormalize_columns(&mut p, a, r);

    // Q = Pᵀ · M
    let mut q = vec![0.0; r * b];
    for i in 0..a {
        let row = &v[i * b..(i + 1) * b];
        for k in 0..r {
            let pik = p[i * r + k];
            if pik == 0.0 {
                continue;
            }
            for j in 0..b {
                q[k * b + j] += pik * row[j];
            }
        }
    }
    Payload::LowRank {
        shape,
        rank: r,
        p,
        q,
    }
}

/// Modified Gram–Schmidt on the columns of a row-major `rows × cols` matrix.
/// Columns that collapse numerically are zeroed.
fn orthonormalize_columns(m: &mut [f64], rows: usize, cols: usize) {
    for c in 0..cols {
        let orig: f64 = (0..rows).map(|i| m[i * cols + c].powi(2)).sum::<f64>().sqrt();
        for prev in 0..c {
            let dot: f64 = (0..rows).map(|i| m[i * cols + c] * m[i * cols + prev]).sum();
            for i in 0..rows {
                m[i * cols + c] -= dot * m[i * cols + prev];
            }
        }
        let norm: f64 = (0..rows).map(|i| m[i * cols + c].powi(2)).sum::<f64>().sqrt();
        let scale = if norm > 1e-10 * orig && norm > 0.0 {
            1.0 / norm
        } else {
            0.0
        };
        for i in 0..rows {
            m[i * cols + c] *= scale;
        }
    }
}

/// Dense decoding of `cu`.
pub fn decompress(cu: &CompressedUpdate, dim: usize) -> Result<ParamVector> {
    check_dim(cu.dim, dim)?;
    let mut out = vec![0.0; dim];
    add_decoded(cu, &mut out);
    Ok(ParamVector::from_finite(out))
}

/// `out += decode(cu)`, accumulating in a fixed order.
fn add_decoded(cu: &CompressedUpdate, out: &mut [f64]) {
    match &cu.payload {
        Payload::Zero => {}
        Payload::Dense { values } => {
            for (o, v) in out.iter_mut().zip(values) {
                *o += v;
            }
        }
        Payload::Masked { indices, values } => {
            for (&i, v) in indices.iter().zip(values) {
                out[i as usize] += v;
            }
        }
        Payload::Quantized { bits, segments } => {
            let levels = quant_levels(*bits);
            for seg in segments {
                let s = f64::from(seg.scale);
                for (o, &c) in out.iter_mut().zip(&seg.codes) {
                    *o += s * f64::from(c) / levels;
                }
            }
        }
        Payload::LowRank {
            shape, rank, p, q, ..
        } => {
            let (a, b, r) = (shape.rows, shape.cols, *rank);
            for i in 0..a {
                for j in 0..b {
                    let mut acc = 0.0;
                    for k in 0..r {
                        acc += p[i * r + k] * q[k * b + j];
                    }
                    out[i * b + j] += acc;
                }
            }
        }
    }
}

/// Merges updates covering consecutive rounds into one update that decodes
/// to their sum.
///
/// Masks merge by union; quantized segments and low-rank factors are
/// concatenated unless that would exceed the dense size, in which case the
/// dense sum is sent instead. Anything mixed with a dense part is dense.
pub fn accumulate(parts: &[CompressedUpdate]) -> Result<CompressedUpdate> {
    let first = parts.first().ok_or(Error::Empty("accumulate parts"))?;
    let dim = first.dim;
    let mut span: Option<(Round, Round)> = None;
    for p in parts {
        check_dim(dim, p.dim)?;
        if let Some((s, e)) = p.span {
            span = match span {
                None => Some((s, e)),
                Some((s0, e0)) if s == e0 + 1 => Some((s0, e)),
                Some((_, e0)) => {
                    return Err(Error::NonContiguous {
                        prev_end: e0,
                        next_start: s,
                    })
                }
            };
        }
    }
    let live: Vec<&CompressedUpdate> = parts.iter().filter(|p| p.span.is_some()).collect();
    let Some(span) = span else {
        return Ok(CompressedUpdate::zero(dim));
    };
    if live.len() == 1 {
        return Ok(live[0].clone());
    }

    let dense_sum = || {
        let mut acc = vec![0.0; dim];
        for p in &live {
            add_decoded(p, &mut acc);
        }
        Payload::Dense { values: acc }
    };
    let same_kind = live
        .iter()
        .all(|p| std::mem::discriminant(&p.payload) == std::mem::discriminant(&live[0].payload));

    let payload = if !same_kind {
        dense_sum()
    } else {
        match &live[0].payload {
            Payload::Masked { .. } => merge_masks(&live, dim),
            Payload::Quantized { bits, .. } => {
                let bits = *bits;
                let mut segments = Vec::new();
                for p in &live {
                    match &p.payload {
                        Payload::Quantized { bits: b, segments: s } if *b == bits => {
                            segments.extend(s.iter().cloned())
                        }
                        _ => {
                            return Err(Error::Incompatible(
                                "quantized updates with different bit widths".into(),
                            ))
                        }
                    }
                }
                if segments.len() as u64 * quant_segment_bytes(bits, dim) > dense_bytes(dim) {
                    dense_sum()
                } else {
                    Payload::Quantized { bits, segments }
                }
            }
            Payload::LowRank { shape, .. } => {
                let shape = *shape;
                let factors: Vec<(usize, &[f64], &[f64])> = live
                    .iter()
                    .map(|p| match &p.payload {
                        Payload::LowRank {
                            shape: s, rank, p, q,
                        } if *s == shape => Ok((*rank, p.as_slice(), q.as_slice())),
                        _ => Err(Error::Incompatible(
                            "low-rank updates with different shapes".into(),
                        )),
                    })
                    .collect::<Result<_>>()?;
                let total: usize = factors.iter().map(|f| f.0).sum();
                if VALUE_BYTES * (total * (shape.rows + shape.cols)) as u64 > dense_bytes(dim) {
                    dense_sum()
                } else {
                    stack_factors(shape, total, &factors)
                }
            }
            Payload::Dense { .. } => dense_sum(),
            Payload::Zero => unreachable!("zero updates are filtered out"),
        }
    };
    Ok(CompressedUpdate {
        dim,
        span: Some(span),
        payload,
    })
}

fn merge_masks(parts: &[&CompressedUpdate], dim: usize) -> Payload {
    let mut acc = vec![0.0; dim];
    let mut present = vec![false; dim];
    for p in parts {
        if let Payload::Masked { indices, values } = &p.payload {
            for (&i, v) in indices.iter().zip(values) {
                acc[i as usize] += v;
                present[i as usize] = true;
            }
        }
    }
    let indices: Vec<u32> = (0..dim as u32).filter(|&i| present[i as usize]).collect();
    let values = indices.iter().map(|&i| acc[i as usize]).collect();
    Payload::Masked { indices, values }
}

fn stack_factors(shape: MatrixShape, total: usize, factors: &[(usize, &[f64], &[f64])]) -> Payload {
    let (a, b) = (shape.rows, shape.cols);
    let mut p = vec![0.0; a * total];
    let mut q = Vec::with_capacity(total * b);
    let mut offset = 0;
    for &(r, fp, fq) in factors {
        for i in 0..a {
            p[i * total + offset..i * total + offset + r].copy_from_slice(&fp[i * r..(i + 1) * r]);
        }
        q.extend_from_slice(fq);
        offset += r;
    }
    Payload::LowRank {
        shape,
        rank: total,
        p,
        q,
    }
}
