//! Relative density of samples in embedding space.
//!
//! The raw ratio of a sample is the mean squared distance to its `K`
//! nearest other samples divided by the mean squared distance to every
//! sample in the corpus, itself included. Ratios are min-max normalized
//! over the corpus into `[0, 1]`.

pub mod embed;
pub mod engine;
pub mod vectors;

use std::collections::HashSet;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::SynthesizedSample;
pub use embed::EmbeddingSource;
pub use engine::{BlockedEngine, NeighborEngine, NeighborSums, ScanEngine};
pub use vectors::VectorTable;

pub const DEFAULT_K: usize = 10;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("no embedding for {} sample(s): {}", .0.len(), .0.join(", "))]
    Missing(Vec<String>),
    #[error("embedding for {id} has dimension {found}, expected {expected}")]
    Dimension {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("embedding for {0} has non-finite components")]
    NonFinite(String),
    #[error("sample {0} has more than one embedding")]
    Duplicate(String),
    #[error("embedding source: {0}")]
    Source(String),
    #[error("embedding service: {0}")]
    Service(String),
}

#[derive(Debug, Error, PartialEq)]
pub enum DensityError {
    #[error("density needs at least 2 samples, got {0}")]
    TooFew(usize),
    #[error("k must satisfy 1 <= k <= {max}, got {k}")]
    InvalidK { k: usize, max: usize },
    #[error("sample {0} is at distance zero from the whole corpus; all points coincide")]
    DegenerateGeometry(usize),
    #[error("target index {0} outside the corpus")]
    NoSuchTarget(usize),
}

/// A sample id with its embedding, borrowed from a [`VectorTable`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmbeddedSample<'a> {
    pub sample_id: &'a str,
    pub vector: &'a [f64],
}

impl VectorTable {
    pub fn embedded(&self) -> impl Iterator<Item = EmbeddedSample<'_>> {
        self.ids.iter().enumerate().map(|(i, id)| EmbeddedSample {
            sample_id: id,
            vector: self.row(i),
        })
    }
}

/// Resolves one vector per sample, in sample order. Vectors the source
/// returns for unknown ids are ignored with a warning.
pub fn ingest_embeddings(
    source: &dyn EmbeddingSource,
    samples: &[SynthesizedSample],
) -> Result<VectorTable, IngestError> {
    let raw = source.embed(samples)?;
    let mut seen = HashSet::new();
    for id in &raw.ids {
        if !seen.insert(id.as_str()) {
            return Err(IngestError::Duplicate(id.clone()));
        }
    }
    let index = embed::index_of(&raw);
    let missing: Vec<String> = samples
        .iter()
        .filter(|s| !index.contains_key(s.id.as_str()))
        .map(|s| s.id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(IngestError::Missing(missing));
    }
    let unused = raw.len().saturating_sub(samples.len());
    if unused > 0 {
        warn!("{unused} embedding(s) have no matching sample and are ignored");
    }
    let mut table = VectorTable::new(raw.dim);
    for s in samples {
        let row = raw.row(index[s.id.as_str()]);
        if row.iter().any(|v| !v.is_finite()) {
            return Err(IngestError::NonFinite(s.id.clone()));
        }
        table.push(s.id.clone(), row);
    }
    Ok(table)
}

fn ratio(sums: NeighborSums, k: usize, m: usize, index: usize) -> Result<f64, DensityError> {
    if sums.total <= 0.0 {
        return Err(DensityError::DegenerateGeometry(index));
    }
    Ok((sums.knn / k as f64) / (sums.total / m as f64))
}

/// Raw ratio of a single corpus member.
pub fn raw_ratio(corpus: &VectorTable, target: usize, k: usize) -> Result<f64, DensityError> {
    let m = corpus.len();
    if m < 2 {
        return Err(DensityError::TooFew(m));
    }
    if k == 0 || k > m - 1 {
        return Err(DensityError::InvalidK { k, max: m - 1 });
    }
    if target >= m {
        return Err(DensityError::NoSuchTarget(target));
    }
    ratio(ScanEngine.row(corpus, target, k), k, m, target)
}

/// Ratios closer than this, relative to the largest, count as equal.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Min-max normalization; all zeros when every ratio is equal up to
/// rounding. With `k = m - 1` every ratio is exactly `m / (m - 1)` in real
/// arithmetic, and stretching the rounding noise to `[0, 1]` would be
/// meaningless.
pub fn normalize(ratios: &[f64]) -> Vec<f64> {
    let (lo, hi) = ratios
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &r| {
            (lo.min(r), hi.max(r))
        });
    let span = hi - lo;
    // also catches NaN spans
    if span.partial_cmp(&(TIE_TOLERANCE * hi.abs())) != Some(std::cmp::Ordering::Greater) {
        return vec![0.0; ratios.len()];
    }
    ratios
        .iter()
        .map(|r| ((r - lo) / span).clamp(0.0, 1.0))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityScores {
    /// Neighbor count actually used.
    pub k: usize,
    /// Neighbor count asked for, before clamping to `m - 1`.
    pub k_requested: usize,
    pub m: usize,
    pub raw_ratios: Vec<f64>,
    pub densities: Vec<f64>,
}

pub fn compute_densities(
    corpus: &VectorTable,
    k: usize,
    engine: &dyn NeighborEngine,
) -> Result<DensityScores, DensityError> {
    let m = corpus.len();
    if m < 2 {
        return Err(DensityError::TooFew(m));
    }
    if k == 0 {
        return Err(DensityError::InvalidK { k, max: m - 1 });
    }
    let used = if k > m - 1 {
        warn!("k={k} exceeds corpus size {m} - 1; using k={}", m - 1);
        m - 1
    } else {
        k
    };
    let raw_ratios = engine
        .neighbor_sums(corpus, used)
        .into_iter()
        .enumerate()
        .map(|(i, sums)| ratio(sums, used, m, i))
        .collect::<Result<Vec<_>, _>>()?;
    let densities = normalize(&raw_ratios);
    Ok(DensityScores {
        k: used,
        k_requested: k,
        m,
        raw_ratios,
        densities,
    })
}
