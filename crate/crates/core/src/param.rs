//! Flat parameter vectors, task vectors and the linear merge.
//!
//! All arithmetic is `f64` with index-ascending summation so that results are
//! byte-reproducible. The on-disk format is:
//!
//! ```text
//! "MRGL" | version: u32 LE (= 1) | dim: u64 LE | dim x f64 LE
//! ```
//!
//! with no padding and no trailing bytes.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

pub const MAGIC: [u8; 4] = *b"MRGL";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8;

/// Absolute tolerance for `sum(lambda) == 1`.
pub const SIMPLEX_TOL: f64 = 1e-12;
/// Deviations up to this are treated as rounding noise and renormalized.
pub const SIMPLEX_RENORMALIZE_TOL: f64 = 1e-9;

/// A flat, finite, real-valued model parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ParamVector {
    values: Vec<f64>,
}

impl ParamVector {
    /// Wraps `values`, rejecting NaN and infinities.
    ///
    /// A zero-length vector is representable (it is rejected when written).
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { values })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dot(&self, other: &ParamVector) -> Result<f64> {
        check_dim(self.dim(), other.dim())?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum())
    }

    /// Max-abs entrywise difference.
    pub fn max_abs_diff(&self, other: &ParamVector) -> Result<f64> {
        check_dim(self.dim(), other.dim())?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// SHA-256 of the little-endian bytes of every entry.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in &self.values {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

impl TryFrom<Vec<f64>> for ParamVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        ParamVector::new(v)
    }
}

impl From<ParamVector> for Vec<f64> {
    fn from(p: ParamVector) -> Self {
        p.values
    }
}

/// `tau = expert - base`.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskVector {
    delta: ParamVector,
}

impl TaskVector {
    pub fn from_delta(delta: ParamVector) -> Self {
        Self { delta }
    }

    pub fn dim(&self) -> usize {
        self.delta.dim()
    }

    pub fn delta(&self) -> &ParamVector {
        &self.delta
    }

    pub fn as_slice(&self) -> &[f64] {
        self.delta.as_slice()
    }

    pub fn scaled(&self, c: f64) -> Result<TaskVector> {
        let v = self.delta.as_slice().iter().map(|x| c * x).collect();
        Ok(TaskVector {
            delta: ParamVector::new(v)?,
        })
    }
}

/// Non-negative weights summing to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct MergeCoefficients {
    weights: Vec<f64>,
}

impl MergeCoefficients {
    /// Validates the simplex constraint, renormalizing sums within `1e-9` of one.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Simplex("no coefficients".into()));
        }
        for (i, w) in weights.iter().enumerate() {
            if !w.is_finite() {
                return Err(Error::NonFinite { index: i });
            }
            if *w < 0.0 {
                return Err(Error::Simplex(format!("lambda[{i}] = {w} is negative")));
            }
        }
        let sum: f64 = weights.iter().sum();
        let dev = (sum - 1.0).abs();
        if dev <= SIMPLEX_TOL {
            Ok(Self { weights })
        } else if dev <= SIMPLEX_RENORMALIZE_TOL {
            Ok(Self {
                weights: weights.into_iter().map(|w| w / sum).collect(),
            })
        } else {
            Err(Error::Simplex(format!("weights sum to {sum}")))
        }
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Simplex("no coefficients".into()));
        }
        Ok(Self {
            weights: vec![1.0 / n as f64; n],
        })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }
}

impl TryFrom<Vec<f64>> for MergeCoefficients {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        MergeCoefficients::new(v)
    }
}

impl From<MergeCoefficients> for Vec<f64> {
    fn from(c: MergeCoefficients) -> Self {
        c.weights
    }
}

pub fn task_vector(expert: &ParamVector, base: &ParamVector) -> Result<TaskVector> {
    check_dim(base.dim(), expert.dim())?;
    let delta = expert
        .values
        .iter()
        .zip(&base.values)
        .map(|(e, b)| e - b)
        .collect();
    Ok(TaskVector {
        delta: ParamVector::new(delta)?,
    })
}

/// `base + sum_i lambda_i * tau_i`, accumulated task by task in index order.
pub fn merge_linear(
    base: &ParamVector,
    taskvecs: &[TaskVector],
    coeffs: &MergeCoefficients,
) -> Result<ParamVector> {
    if taskvecs.len() != coeffs.len() {
        return Err(Error::CoefficientCount {
            coeffs: coeffs.len(),
            vectors: taskvecs.len(),
        });
    }
    weighted_sum(base, taskvecs, coeffs.as_slice())
}

/// `base + sum_i w_i * tau_i` for arbitrary real weights.
pub(crate) fn weighted_sum(
    base: &ParamVector,
    taskvecs: &[TaskVector],
    w: &[f64],
) -> Result<ParamVector> {
    debug_assert_eq!(taskvecs.len(), w.len());
    let mut acc = vec![0.0; base.dim()];
    for (tv, &lam) in taskvecs.iter().zip(w) {
        check_dim(base.dim(), tv.dim())?;
        for (a, d) in acc.iter_mut().zip(tv.as_slice()) {
            *a += lam * d;
        }
    }
    let out = base.values.iter().zip(&acc).map(|(b, a)| b + a).collect();
    ParamVector::new(out)
}

pub fn squared_distance(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    check_dim(a.dim(), b.dim())?;
    Ok(a.values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| (x - y) * (x - y))
        .sum())
}

pub fn write_params<W: Write>(v: &ParamVector, mut sink: W) -> Result<()> {
    if v.dim() == 0 {
        return Err(Error::EmptyDim);
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * v.dim());
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(v.dim() as u64).to_le_bytes());
    for x in &v.values {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    sink.write_all(&buf)?;
    sink.flush()?;
    Ok(())
}

pub fn read_params<R: Read>(mut source: R) -> Result<ParamVector> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    decode_params(&bytes)
}

pub fn decode_params(bytes: &[u8]) -> Result<ParamVector> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            needed: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("length checked");
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            needed: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("length checked"));
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let dim = u64::from_le_bytes(bytes[8..16].try_into().expect("length checked"));
    if dim == 0 {
        return Err(Error::EmptyDim);
    }
    let needed = usize::try_from(dim)
        .ok()
        .and_then(|d| d.checked_mul(8))
        .and_then(|p| p.checked_add(HEADER_LEN))
        .ok_or(Error::Truncated {
            needed: usize::MAX,
            found: bytes.len(),
        })?;
    if bytes.len() < needed {
        return Err(Error::Truncated {
            needed,
            found: bytes.len(),
        });
    }
    if bytes.len() > needed {
        return Err(Error::TrailingBytes {
            extra: bytes.len() - needed,
        });
    }
    let values = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    ParamVector::new(values)
}

pub fn save_params(v: &ParamVector, path: &std::path::Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_params(v, std::io::BufWriter::new(f))
}

pub fn load_params(path: &std::path::Path) -> Result<ParamVector> {
    read_params(std::fs::File::open(path)?)
}
