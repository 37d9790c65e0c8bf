//! Cosine and scaled similarity kernels.
//!
//! All arithmetic is done in `f64` with a fixed left-to-right accumulation
//! order, so results do not depend on how rows are distributed over threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embstore::EmbeddingMatrix;

/// Default scale applied to cosine similarity.
pub const DEFAULT_GAMMA: f64 = 100.0;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("gamma must be positive and finite, got {0}")]
    BadGamma(f64),
    #[error("score table shape mismatch: {0}")]
    Shape(String),
    #[error("score table value {0} violates the {1:?} invariant")]
    Invariant(f64, ScoreKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityConfig {
    pub gamma: f64,
}

impl SimilarityConfig {
    pub fn new(gamma: f64) -> Result<Self, SimError> {
        if gamma > 0.0 && gamma.is_finite() {
            Ok(Self { gamma })
        } else {
            Err(SimError::BadGamma(gamma))
        }
    }
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    RawSimilarity,
    Balanced,
    Hybrid,
    Normalized,
}

/// Dense `n_texts x n_candidates` table of scores.
///
/// A table may carry tie-break keys, one per value. Balanced scores keep
/// their logits there: far into either tail distinct logits round to the same
/// probability, and ranking by `(value, key)` keeps the exact order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    n_texts: usize,
    n_candidates: usize,
    values: Vec<f64>,
    kind: ScoreKind,
    tie_break: Option<Vec<f64>>,
}

impl ScoreTable {
    /// Validates shape and finiteness. `Balanced` values must lie in `[0, 1]`
    /// (saturation at the rails is allowed); `Normalized` rows must sum to 1.
    pub fn new(
        n_texts: usize,
        n_candidates: usize,
        values: Vec<f64>,
        kind: ScoreKind,
    ) -> Result<Self, SimError> {
        if values.len() != n_texts * n_candidates {
            return Err(SimError::Shape(format!(
                "{} values for a {n_texts}x{n_candidates} table",
                values.len()
            )));
        }
        if let Some(&v) = values.iter().find(|v| !v.is_finite()) {
            return Err(SimError::Invariant(v, kind));
        }
        match kind {
            ScoreKind::Balanced => {
                if let Some(&v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                    return Err(SimError::Invariant(v, kind));
                }
            }
            ScoreKind::Normalized if n_candidates > 0 => {
                for row in values.chunks_exact(n_candidates) {
                    let s: f64 = row.iter().sum();
                    if (s - 1.0).abs() > 1e-9 {
                        return Err(SimError::Invariant(s, kind));
                    }
                }
            }
            _ => {}
        }
        Ok(Self {
            n_texts,
            n_candidates,
            values,
            kind,
            tie_break: None,
        })
    }

    pub fn with_tie_break(mut self, keys: Vec<f64>) -> Result<Self, SimError> {
        if keys.len() != self.values.len() {
            return Err(SimError::Shape(format!(
                "{} tie-break keys for {} values",
                keys.len(),
                self.values.len()
            )));
        }
        if let Some(&k) = keys.iter().find(|k| !k.is_finite()) {
            return Err(SimError::Invariant(k, self.kind));
        }
        self.tie_break = Some(keys);
        Ok(self)
    }

    pub fn tie_break(&self) -> Option<&[f64]> {
        self.tie_break.as_deref()
    }

    pub fn tie_break_row(&self, t: usize) -> Option<&[f64]> {
        let n = self.n_candidates;
        self.tie_break.as_ref().map(|k| &k[t * n..(t + 1) * n])
    }

    /// Best candidate in row `t`, by value and then tie-break key; remaining
    /// ties go to the lowest index.
    pub fn argmax_row(&self, t: usize) -> usize {
        let v = self.row(t);
        let k = self.tie_break_row(t);
        let mut best = 0;
        for i in 1..v.len() {
            let better = match k {
                Some(k) => v[i] > v[best] || (v[i] == v[best] && k[i] > k[best]),
                None => v[i] > v[best],
            };
            if better {
                best = i;
            }
        }
        best
    }

    pub fn from_rows(rows: &[Vec<f64>], kind: ScoreKind) -> Result<Self, SimError> {
        let n_candidates = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_candidates) {
            return Err(SimError::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), n_candidates, rows.concat(), kind)
    }

    pub fn n_texts(&self) -> usize {
        self.n_texts
    }

    pub fn n_candidates(&self) -> usize {
        self.n_candidates
    }

    pub fn kind(&self) -> ScoreKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.n_candidates..(t + 1) * self.n_candidates]
    }

    pub fn get(&self, t: usize, m: usize) -> f64 {
        self.values[t * self.n_candidates + m]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.n_candidates.max(1))
    }
}

fn dot_and_norms(a: &[f32], b: &[f32]) -> (f64, f64, f64) {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    (dot, na, nb)
}

/// Cosine similarity, clamped to `[-1, 1]`.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f64, SimError> {
    if a.len() != b.len() {
        return Err(SimError::DimMismatch(a.len(), b.len()));
    }
    let (dot, na, nb) = dot_and_norms(a, b);
    if na == 0.0 || nb == 0.0 {
        return Err(SimError::ZeroNorm);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// `gamma * cosine(a, b)`.
pub fn scaled_similarity(a: &[f32], b: &[f32], cfg: &SimilarityConfig) -> Result<f64, SimError> {
    Ok(cfg.gamma * cosine(a, b)?)
}

/// Scaled similarity of every text row against every image row.
///
/// Row norms are computed once per row; each entry uses the same reduction
/// order as [`cosine`], so this agrees with the pairwise loop to rounding.
pub fn similarity_matrix(
    texts: &EmbeddingMatrix,
    images: &EmbeddingMatrix,
    cfg: &SimilarityConfig,
) -> Result<ScoreTable, SimError> {
    if texts.dim() != images.dim() {
        return Err(SimError::DimMismatch(texts.dim(), images.dim()));
    }
    let image_norms = row_norms(images)?;
    let n_images = images.rows();
    let values: Vec<f64> = (0..texts.rows())
        .into_par_iter()
        .map(|t| {
            let a = texts.row(t);
            let na: f64 = a.iter().map(|&x| f64::from(x) * f64::from(x)).sum();
            if na == 0.0 {
                return Err(SimError::ZeroNorm);
            }
            let na = na.sqrt();
            Ok((0..n_images)
                .map(|m| {
                    let dot: f64 = a
                        .iter()
                        .zip(images.row(m))
                        .map(|(&x, &y)| f64::from(x) * f64::from(y))
                        .sum();
                    cfg.gamma * (dot / (na * image_norms[m])).clamp(-1.0, 1.0)
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>, _>>()?
        .concat();
    ScoreTable::new(texts.rows(), n_images, values, ScoreKind::RawSimilarity)
}

/// Scaled similarities of a subset of rows of `left` against a subset of rows
/// of `right`; output row `i` belongs to `left_rows[i]`.
pub fn similarity_subset(
    left: &EmbeddingMatrix,
    left_rows: &[usize],
    right: &EmbeddingMatrix,
    right_rows: &[usize],
    cfg: &SimilarityConfig,
) -> Result<ScoreTable, SimError> {
    if left.dim() != right.dim() {
        return Err(SimError::DimMismatch(left.dim(), right.dim()));
    }
    let mut values = Vec::with_capacity(left_rows.len() * right_rows.len());
    for &l in left_rows {
        for &r in right_rows {
            values.push(scaled_similarity(left.row(l), right.row(r), cfg)?);
        }
    }
    ScoreTable::new(
        left_rows.len(),
        right_rows.len(),
        values,
        ScoreKind::RawSimilarity,
    )
}

fn row_norms(m: &EmbeddingMatrix) -> Result<Vec<f64>, SimError> {
    m.iter_rows()
        .map(|r| {
            let n: f64 = r.iter().map(|&x| f64::from(x) * f64::from(x)).sum();
            if n == 0.0 {
                Err(SimError::ZeroNorm)
            } else {
                Ok(n.sqrt())
            }
        })
        .collect()
}
