//! Parameter-vector math and deterministic random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Round};

/// Flat 64-bit model or update vector.
///
/// Always non-empty; every constructor and arithmetic operation rejects
/// non-finite results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ParamVector {
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("parameter vector"));
        }
        check_finite(&values)?;
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "parameter vector must be non-empty");
        Self {
            values: vec![0.0; dim],
        }
    }

    /// Wraps values that are finite by construction.
    pub(crate) fn from_finite(values: Vec<f64>) -> Self {
        debug_assert!(!values.is_empty());
        debug_assert!(values.iter().all(|v| v.is_finite()));
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.values
    }

    /// `self + alpha * x`.
    pub fn axpy(&self, alpha: f64, x: &ParamVector) -> Result<ParamVector> {
        let mut out = self.clone();
        out.axpy_in_place(alpha, x)?;
        Ok(out)
    }

    /// `self += alpha * x`. On error `self` is left unchanged.
    pub fn axpy_in_place(&mut self, alpha: f64, x: &ParamVector) -> Result<()> {
        check_dim(self.dim(), x.dim())?;
        let updated: Vec<f64> = self
            .values
            .iter()
            .zip(&x.values)
            .map(|(y, x)| y + alpha * x)
            .collect();
        check_finite(&updated)?;
        self.values = updated;
        Ok(())
    }

    /// `self - other`.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.axpy(-1.0, other)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0`.
    pub fn bit_eq(&self, other: &ParamVector) -> bool {
        self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl TryFrom<Vec<f64>> for ParamVector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        ParamVector::new(values)
    }
}

impl From<ParamVector> for Vec<f64> {
    fn from(v: ParamVector) -> Self {
        v.values
    }
}

/// Elementwise `Σ weights[i] * updates[i]`, summed left to right.
pub fn weighted_sum(updates: &[&ParamVector], weights: &[f64]) -> Result<ParamVector> {
    let first = updates.first().ok_or(Error::Empty("weighted_sum updates"))?;
    if updates.len() != weights.len() {
        return Err(Error::WeightCount {
            updates: updates.len(),
            weights: weights.len(),
        });
    }
    let dim = first.dim();
    let mut acc = vec![0.0; dim];
    for (u, &w) in updates.iter().zip(weights) {
        check_dim(dim, u.dim())?;
        for (a, v) in acc.iter_mut().zip(&u.values) {
            *a += w * v;
        }
    }
    check_finite(&acc)?;
    Ok(ParamVector { values: acc })
}

pub(crate) fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimMismatch { expected, actual })
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(i)),
        None => Ok(()),
    }
}

/// Row-major `rows × cols` view of a flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixShape {
    pub rows: usize,
    pub cols: usize,
}

impl MatrixShape {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::config("shape", format!("{rows}x{cols} has a zero side")));
        }
        Ok(Self { rows, cols })
    }

    pub fn dim(&self) -> usize {
        self.rows * self.cols
    }
}

/// Keyed random stream.
///
/// A stream is identified by the run seed plus the path of `(round, client,
/// purpose)` forks that produced it, so draws never depend on the order in
/// which the simulator happens to visit clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    key: u64,
}

/// Client slot used for streams that belong to the server.
pub const SERVER: u64 = u64::MAX;

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            key: splitmix64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn fork(&self, round: Round, client: u64, tag: &str) -> RngStream {
        let mut k = splitmix64(self.key ^ round);
        k = splitmix64(k ^ client);
        k = splitmix64(k ^ fnv1a(tag.as_bytes()));
        RngStream {
            seed: self.seed,
            key: k,
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut bytes = [0u8; 32];
        let mut state = self.key;
        for chunk in bytes.chunks_exact_mut(8) {
            state = splitmix64(state);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        ChaCha8Rng::from_seed(bytes)
    }
}

/// `fork_stream` in free-function form.
pub fn fork_stream(rng: &RngStream, round: Round, client: u64, tag: &str) -> RngStream {
    rng.fork(round, client, tag)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
