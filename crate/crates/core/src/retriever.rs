//! Exact nearest-neighbour retrieval over a [`StoreSnapshot`].
//!
//! The only index is a flat scan. Results are ordered by `(distance, concept id)`
//! so equal distances always come back in the same order.

use std::cmp::Ordering;
use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{DistanceMode, EmbeddingVector};
use crate::error::{RapError, Result};
use crate::names::Delimiters;
use crate::store::{ConceptRecord, StoreSnapshot};

/// Scans bigger than this many floats fan out over rayon.
const PARALLEL_SCAN_FLOATS: usize = 1 << 18;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub concept_id: String,
    pub distance: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_region: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub per_region_k: usize,
    pub global_k: usize,
    pub distance_mode: DistanceMode,
    pub max_distance: Option<f64>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            per_region_k: 2,
            global_k: 2,
            distance_mode: DistanceMode::Euclidean,
            max_distance: None,
        }
    }
}

impl RetrievalConfig {
    /// Three distinct concepts per query, as used for the Phi3-V style profile.
    pub fn three_concepts() -> Self {
        Self {
            global_k: 3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_region_k == 0 || self.global_k == 0 {
            return Err(RapError::InvalidInput(
                "per_region_k and global_k must be at least 1".into(),
            ));
        }
        if let Some(d) = self.max_distance {
            if !(d.is_finite() && d >= 0.0) {
                return Err(RapError::InvalidInput(
                    "max_distance must be finite and non-negative".into(),
                ));
            }
        }
        Ok(())
    }
}

fn rank(snapshot: &StoreSnapshot, a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0)
        .then_with(|| snapshot.record(a.1).id.cmp(&snapshot.record(b.1).id))
}

fn scan(snapshot: &StoreSnapshot, query: &[f32], mode: DistanceMode) -> Vec<(f64, usize)> {
    let dim = snapshot.dim();
    let matrix = snapshot.matrix();
    if matrix.len() >= PARALLEL_SCAN_FLOATS {
        matrix
            .par_chunks_exact(dim)
            .enumerate()
            .map(|(i, row)| (mode.eval(query, row), i))
            .collect()
    } else {
        matrix
            .chunks_exact(dim)
            .enumerate()
            .map(|(i, row)| (mode.eval(query, row), i))
            .collect()
    }
}

/// Row indices of the `k` nearest rows, ascending by `(distance, id)`.
pub fn knn_rows(
    snapshot: &StoreSnapshot,
    query: &EmbeddingVector,
    k: usize,
    mode: DistanceMode,
) -> Result<Vec<(f64, usize)>> {
    query.check_dim(snapshot.dim())?;
    if k == 0 {
        return Err(RapError::InvalidInput("k must be at least 1".into()));
    }
    let mut scored = scan(snapshot, query.as_slice(), mode);
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, |a, b| rank(snapshot, a, b));
        scored.truncate(k);
    }
    scored.sort_unstable_by(|a, b| rank(snapshot, a, b));
    Ok(scored)
}

/// The `k` closest concepts under euclidean distance.
pub fn knn(snapshot: &StoreSnapshot, query: &EmbeddingVector, k: usize) -> Result<Vec<RetrievalHit>> {
    knn_with_mode(snapshot, query, k, DistanceMode::Euclidean)
}

pub fn knn_with_mode(
    snapshot: &StoreSnapshot,
    query: &EmbeddingVector,
    k: usize,
    mode: DistanceMode,
) -> Result<Vec<RetrievalHit>> {
    Ok(knn_rows(snapshot, query, k, mode)?
        .into_iter()
        .map(|(distance, row)| RetrievalHit {
            concept_id: snapshot.record(row).id.clone(),
            distance,
            source_region: None,
        })
        .collect())
}

/// Per-region top-`per_region_k`, pooled by minimum distance per concept, then
/// the `global_k` best distinct concepts.
pub fn retrieve_for_regions(
    snapshot: &StoreSnapshot,
    regions: &[EmbeddingVector],
    config: &RetrievalConfig,
) -> Result<Vec<RetrievalHit>> {
    config.validate()?;
    for r in regions {
        r.check_dim(snapshot.dim())?;
    }
    // row -> (distance, region); first region wins on equal distance.
    let mut pooled: HashMap<usize, (f64, usize)> = HashMap::new();
    for (region, emb) in regions.iter().enumerate() {
        for (distance, row) in knn_rows(snapshot, emb, config.per_region_k, config.distance_mode)? {
            pooled
                .entry(row)
                .and_modify(|best| {
                    if distance < best.0 {
                        *best = (distance, region);
                    }
                })
                .or_insert((distance, region));
        }
    }
    let mut hits: Vec<(f64, usize, usize)> = pooled
        .into_iter()
        .filter(|(_, (d, _))| config.max_distance.is_none_or(|max| *d <= max))
        .map(|(row, (d, region))| (d, row, region))
        .collect();
    hits.sort_unstable_by(|a, b| rank(snapshot, &(a.0, a.1), &(b.0, b.1)));
    hits.truncate(config.global_k);
    Ok(hits
        .into_iter()
        .map(|(distance, row, region)| RetrievalHit {
            concept_id: snapshot.record(row).id.clone(),
            distance,
            source_region: Some(region),
        })
        .collect())
}

/// Concepts whose wrapped names appear in `text`, first mention first, no repeats.
pub fn retrieve_by_names<'s>(
    snapshot: &'s StoreSnapshot,
    text: &str,
    delimiters: &Delimiters,
) -> Vec<&'s ConceptRecord> {
    let mut out: Vec<&ConceptRecord> = Vec::new();
    for token in delimiters.scan(text) {
        if let Some(rec) = snapshot.get_by_name(token) {
            if !out.iter().any(|r| r.id == rec.id) {
                out.push(rec);
            }
        }
    }
    out
}
