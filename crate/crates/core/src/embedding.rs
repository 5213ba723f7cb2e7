//! Embedding vectors, the retrieval distance, and the binary vector file.
//!
//! Vectors are stored as `f32`; every distance accumulates in `f64` so that
//! results at 768 dimensions are deterministic and comparable against scalar
//! oracles.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{RapError, Result};

/// Default embedding width for CLIP-style image encoders.
pub const DEFAULT_DIM: usize = 768;

/// Magic bytes at the start of `vectors.bin`.
pub const VECTOR_FILE_MAGIC: [u8; 4] = *b"RAPV";
pub const VECTOR_FILE_VERSION: u32 = 1;
/// magic + version + dim + count
pub const VECTOR_FILE_HEADER_LEN: usize = 4 + 4 + 4 + 8;

/// A finite, fixed-width feature vector.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(RapError::InvalidInput("embedding must have at least one entry".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(RapError::NonFinite);
        }
        Ok(Self { values })
    }

    pub fn from_f64(values: &[f64]) -> Result<Self> {
        Self::new(values.iter().map(|&v| v as f32).collect())
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.values
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.values
    }

    pub fn norm(&self) -> f64 {
        squared_norm(&self.values).sqrt()
    }

    pub fn check_dim(&self, expected: usize) -> Result<()> {
        if self.dim() != expected {
            return Err(RapError::DimensionMismatch {
                expected,
                actual: self.dim(),
            });
        }
        Ok(())
    }
}

impl<'de> Deserialize<'de> for EmbeddingVector {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let values = Vec::<f32>::deserialize(deserializer)?;
        EmbeddingVector::new(values).map_err(serde::de::Error::custom)
    }
}

impl TryFrom<Vec<f32>> for EmbeddingVector {
    type Error = RapError;

    fn try_from(values: Vec<f32>) -> Result<Self> {
        Self::new(values)
    }
}

/// How retrieval ranks candidates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceMode {
    #[default]
    Euclidean,
    /// `1 - cos(a, b)`; zero vectors are treated as orthogonal to everything.
    Cosine,
}

impl DistanceMode {
    pub fn eval(self, a: &[f32], b: &[f32]) -> f64 {
        match self {
            DistanceMode::Euclidean => l2_distance(a, b),
            DistanceMode::Cosine => cosine_distance(a, b),
        }
    }
}

/// Euclidean distance between two embeddings.
pub fn distance(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(RapError::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    Ok(l2_distance(&a.values, &b.values))
}

/// Scales `a` to unit length.
pub fn normalize(a: &EmbeddingVector) -> Result<EmbeddingVector> {
    let norm = a.norm();
    if norm == 0.0 {
        return Err(RapError::ZeroVector);
    }
    let values = a.values.iter().map(|&v| (v as f64 / norm) as f32).collect();
    Ok(EmbeddingVector { values })
}

/// Slice-level L2 distance; callers guarantee equal lengths.
#[inline]
pub fn l2_distance(a: &[f32], b: &[f32]) -> f64 {
    squared_l2(a, b).sqrt()
}

#[inline]
pub fn squared_l2(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

#[inline]
fn squared_norm(a: &[f32]) -> f64 {
    a.iter().map(|&x| (x as f64) * (x as f64)).sum()
}

pub fn cosine_distance(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    (1.0 - dot / (na.sqrt() * nb.sqrt())).max(0.0)
}

/// Writes rows in the `RAPV` layout: little-endian header then `count × dim` f32s.
pub fn write_vector_file<W: Write>(mut out: W, dim: usize, rows: &[&[f32]]) -> Result<()> {
    out.write_all(&VECTOR_FILE_MAGIC)?;
    out.write_all(&VECTOR_FILE_VERSION.to_le_bytes())?;
    out.write_all(&(dim as u32).to_le_bytes())?;
    out.write_all(&(rows.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(dim * 4);
    for row in rows {
        if row.len() != dim {
            return Err(RapError::DimensionMismatch {
                expected: dim,
                actual: row.len(),
            });
        }
        buf.clear();
        for v in *row {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

/// Parsed vector file: declared dim and row-major values.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorFile {
    pub dim: usize,
    pub count: usize,
    pub values: Vec<f32>,
}

impl VectorFile {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn read_vector_file<R: Read>(mut input: R) -> Result<VectorFile> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    parse_vector_file(&bytes)
}

pub fn parse_vector_file(bytes: &[u8]) -> Result<VectorFile> {
    let corrupt = |msg: String| RapError::CorruptManifest(msg);
    if bytes.len() < VECTOR_FILE_HEADER_LEN {
        return Err(corrupt(format!("vector file too short: {} bytes", bytes.len())));
    }
    if bytes[0..4] != VECTOR_FILE_MAGIC {
        return Err(corrupt("bad vector file magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VECTOR_FILE_VERSION {
        return Err(corrupt(format!("unsupported vector file version {version}")));
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    if dim == 0 {
        return Err(corrupt("vector file declares dim 0".into()));
    }
    let payload = &bytes[VECTOR_FILE_HEADER_LEN..];
    let expected = (count as u128) * (dim as u128) * 4;
    if expected != payload.len() as u128 {
        return Err(corrupt(format!(
            "vector payload is {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let values: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(corrupt("vector file contains non-finite values".into()));
    }
    Ok(VectorFile {
        dim,
        count: count as usize,
        values,
    })
}
