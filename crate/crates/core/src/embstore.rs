//! Dense embedding matrices and their id manifests.
//!
//! Matrices are persisted in the `EMB1` layout:
//!
//! | bytes      | content                                   |
//! |------------|-------------------------------------------|
//! | 0..4       | ASCII magic `EMB1`                        |
//! | 4..8       | row count, `u32` little-endian            |
//! | 8..12      | dimensionality, `u32` little-endian       |
//! | 12..       | `rows * dim` `f32` little-endian, row-major |
//!
//! The manifest is a sidecar JSON array describing each row.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"EMB1";
pub const HEADER_LEN: usize = 12;

/// Tolerance on row norms when a matrix claims to be normalized.
pub const NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum EmbError {
    #[error("bad magic: expected EMB1, found {0:?}")]
    BadMagic([u8; 4]),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("non-finite value at row {row}, column {col}")]
    NonFiniteValue { row: usize, col: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("row {0} has zero norm")]
    ZeroNormRow(usize),
    #[error("row {row} is flagged normalized but has norm {norm}")]
    NotNormalized { row: usize, norm: f64 },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("manifest json error in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Row-major matrix of `f32` embeddings.
///
/// Immutable once constructed; every constructor validates the invariants.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
    normalized: bool,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self, EmbError> {
        Self::with_flag(rows, dim, data, false)
    }

    /// Builds a matrix whose rows are asserted to be unit length.
    pub fn new_normalized(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self, EmbError> {
        Self::with_flag(rows, dim, data, true)
    }

    fn with_flag(
        rows: usize,
        dim: usize,
        data: Vec<f32>,
        normalized: bool,
    ) -> Result<Self, EmbError> {
        if rows == 0 || dim == 0 {
            return Err(EmbError::DimensionMismatch(format!(
                "rows and dim must be positive, got {rows}x{dim}"
            )));
        }
        if data.len() != rows * dim {
            return Err(EmbError::DimensionMismatch(format!(
                "data length {} != {rows}x{dim}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(EmbError::NonFiniteValue {
                row: i / dim,
                col: i % dim,
            });
        }
        let m = Self {
            rows,
            dim,
            data,
            normalized,
        };
        if normalized {
            for r in 0..rows {
                let norm = m.row_norm(r);
                if (norm - 1.0).abs() > NORM_TOLERANCE {
                    return Err(EmbError::NotNormalized { row: r, norm });
                }
            }
        }
        Ok(m)
    }

    /// Builds a matrix from row vectors of equal length.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self, EmbError> {
        let dim = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(EmbError::DimensionMismatch(format!(
                    "row {i} has length {}, expected {dim}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), dim, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Panics if `r` is out of range.
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    fn row_norm(&self, r: usize) -> f64 {
        self.row(r)
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    /// Serialized size in bytes of this matrix in the EMB1 layout.
    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + 4 * self.data.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses an EMB1 byte buffer. Trailing bytes beyond the declared payload
    /// are rejected as a dimension mismatch.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EmbError> {
        if bytes.len() < 4 {
            let mut found = [0u8; 4];
            found[..bytes.len()].copy_from_slice(bytes);
            return Err(EmbError::BadMagic(found));
        }
        let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
        if &magic != MAGIC {
            return Err(EmbError::BadMagic(magic));
        }
        if bytes.len() < HEADER_LEN {
            return Err(EmbError::TruncatedPayload {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let rows = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let dim = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let expected = HEADER_LEN + 4 * rows * dim;
        if bytes.len() < expected {
            return Err(EmbError::TruncatedPayload {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(EmbError::DimensionMismatch(format!(
                "{} trailing bytes after {rows}x{dim} payload",
                bytes.len() - expected
            )));
        }
        let data = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Self::new(rows, dim, data)
    }

    /// Returns a copy with every row scaled to unit L2 norm.
    ///
    /// Norms are computed in `f64`; zero rows are an error rather than
    /// being silently mapped to zero.
    pub fn l2_normalize(&self) -> Result<Self, EmbError> {
        let mut data = Vec::with_capacity(self.data.len());
        for r in 0..self.rows {
            let norm = self.row_norm(r);
            if norm == 0.0 {
                return Err(EmbError::ZeroNormRow(r));
            }
            data.extend(self.row(r).iter().map(|&v| (f64::from(v) / norm) as f32));
        }
        Self::new_normalized(self.rows, self.dim, data)
    }
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<EmbeddingMatrix, EmbError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| EmbError::IoFailure {
        path: path.display().to_string(),
        source,
    })?;
    EmbeddingMatrix::from_bytes(&bytes)
}

pub fn save_matrix(matrix: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<(), EmbError> {
    let path = path.as_ref();
    fs::write(path, matrix.to_bytes()).map_err(|source| EmbError::IoFailure {
        path: path.display().to_string(),
        source,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Image,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub row: usize,
    pub id: String,
    pub kind: Modality,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

/// Ordered row descriptions for one matrix.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Validates that rows are exactly `0..n` (any order) and ids are unique.
    /// Entries are stored sorted by row.
    pub fn new(mut entries: Vec<ManifestEntry>) -> Result<Self, EmbError> {
        entries.sort_by_key(|e| e.row);
        for (i, e) in entries.iter().enumerate() {
            if e.row != i {
                return Err(EmbError::InvalidManifest(format!(
                    "row indices must be exactly 0..{}; found {} at position {i}",
                    entries.len(),
                    e.row
                )));
            }
        }
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.id.as_str()) {
                return Err(EmbError::InvalidManifest(format!(
                    "duplicate id {:?}",
                    e.id
                )));
            }
        }
        Ok(Self { entries })
    }

    /// Manifest with ids taken in row order and no metadata.
    pub fn from_ids<S: Into<String>>(
        ids: impl IntoIterator<Item = S>,
        kind: Modality,
    ) -> Result<Self, EmbError> {
        Self::new(
            ids.into_iter()
                .enumerate()
                .map(|(row, id)| ManifestEntry {
                    row,
                    id: id.into(),
                    kind,
                    meta: BTreeMap::new(),
                })
                .collect(),
        )
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, row: usize) -> Option<&str> {
        self.entries.get(row).map(|e| e.id.as_str())
    }

    pub fn row_of(&self, id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.id == id)
    }

    /// Checks that the manifest describes exactly the rows of `matrix`.
    pub fn check_matrix(&self, matrix: &EmbeddingMatrix) -> Result<(), EmbError> {
        if self.entries.len() != matrix.rows() {
            return Err(EmbError::DimensionMismatch(format!(
                "manifest has {} entries but matrix has {} rows",
                self.entries.len(),
                matrix.rows()
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.entries).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let entries: Vec<ManifestEntry> = serde_json::from_str(text)?;
        // Validation errors are surfaced by `load_manifest`.
        Ok(Self { entries })
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest, EmbError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| EmbError::IoFailure {
        path: path.display().to_string(),
        source,
    })?;
    let raw = Manifest::from_json(&text).map_err(|source| EmbError::Json {
        path: path.display().to_string(),
        source,
    })?;
    Manifest::new(raw.entries)
}

pub fn save_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<(), EmbError> {
    let path = path.as_ref();
    fs::write(path, manifest.to_json()).map_err(|source| EmbError::IoFailure {
        path: path.display().to_string(),
        source,
    })
}
