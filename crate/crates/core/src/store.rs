//! Feature matrices, label matrices, the on-disk cache format, and text
//! classifier assembly.
//!
//! Everything downstream consumes the types defined here. Matrices are
//! immutable once constructed and safe to share across threads; cache files
//! are written atomically (write to a temporary file, then rename).
//!
//! # Cache file layout
//!
//! A cache file is little-endian throughout:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "CAPS"
//! 4       2     version (u16, currently 1)
//! 6       1     dtype code (u8, 0 = f32)
//! 7       8     rows (u64)
//! 15      8     dim (u64)
//! 23      1     normalized flag (u8, 0 or 1)
//! 24      4*r*d payload, row-major f32
//! end     4     CRC-32 (IEEE 802.3) of the payload
//! ```
//!
//! A sidecar `<stem>.meta.json` file next to each cache records the dataset
//! tag, backbone tag, ordered class names, and the sample-to-class mapping.

use std::fmt;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Magic bytes opening every cache file.
pub const CACHE_MAGIC: [u8; 4] = *b"CAPS";
/// Current cache format version.
pub const CACHE_VERSION: u16 = 1;
/// dtype code for row-major little-endian f32 payloads.
pub const DTYPE_F32: u8 = 0;
/// A row counts as unit-norm when its Euclidean norm is within this of 1.
pub const NORM_TOLERANCE: f64 = 1e-5;

pub type Result<T> = std::result::Result<T, StoreError>;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("row {0} has zero norm")]
    ZeroNormRow(usize),
    #[error("data length {got} does not match rows x dim = {expected}")]
    BadDataLength { expected: usize, got: usize },
    #[error("non-finite entry in row {row}")]
    NonFinite { row: usize },
    #[error("row {row} has norm {norm} but the matrix is flagged normalized")]
    NotUnitNorm { row: usize, norm: f64 },
    #[error("class index {class} out of range for {n_classes} classes")]
    OutOfRangeClass { class: usize, n_classes: usize },
    #[error("class indices must form contiguous ascending blocks (violated at sample {at})")]
    NonContiguousClasses { at: usize },
    #[error("class {0} has no prompt embeddings")]
    EmptyClassPromptSet(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("expected {expected} per-class prompt sets, got {got}")]
    ClassCountMismatch { expected: usize, got: usize },
    #[error("bad cache file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad metadata file: {0}")]
    Meta(#[from] serde_json::Error),
}

/// Dense row-major matrix of 32-bit features; rows are embedding vectors.
///
/// The `normalized` flag asserts that every row is unit-norm (within
/// [`NORM_TOLERANCE`]); constructors verify it. Kernels require the flag on
/// their inputs so cosine similarities stay in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
    normalized: bool,
}

impl FeatureMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>, normalized: bool) -> Result<Self> {
        let expected = rows.checked_mul(dim).ok_or(StoreError::BadDataLength {
            expected: usize::MAX,
            got: data.len(),
        })?;
        if data.len() != expected {
            return Err(StoreError::BadDataLength {
                expected,
                got: data.len(),
            });
        }
        let m = Self {
            rows,
            dim,
            data,
            normalized,
        };
        for (i, row) in m.iter_rows().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(StoreError::NonFinite { row: i });
            }
            if normalized {
                let norm = row_norm(row);
                if (norm - 1.0).abs() > NORM_TOLERANCE {
                    return Err(StoreError::NotUnitNorm { row: i, norm });
                }
            }
        }
        Ok(m)
    }

    /// Build an unnormalized matrix from per-row slices of equal length.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(StoreError::DimMismatch {
                    expected: dim,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), dim, data, false)
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

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    /// Divide each row by its Euclidean norm and set the normalized flag.
    ///
    /// Norms are accumulated in f64. A matrix already flagged normalized is
    /// returned unchanged, which makes the operation exactly idempotent.
    pub fn normalize_rows(&self) -> Result<Self> {
        if self.normalized {
            return Ok(self.clone());
        }
        let mut data = Vec::with_capacity(self.data.len());
        for (i, row) in self.iter_rows().enumerate() {
            let norm = row_norm(row);
            if norm < 1e-12 {
                return Err(StoreError::ZeroNormRow(i));
            }
            data.extend(row.iter().map(|&v| (f64::from(v) / norm) as f32));
        }
        Ok(Self {
            rows: self.rows,
            dim: self.dim,
            data,
            normalized: true,
        })
    }
}

fn row_norm(row: &[f32]) -> f64 {
    row.iter()
        .map(|&v| {
            let v = f64::from(v);
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// One-hot support labels. Rows are grouped contiguously by class in
/// ascending class order, which lets the kernels reduce affinity rows with
/// one segmented pass per class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OneHotLabels {
    classes: usize,
    class_of_row: Vec<usize>,
}

impl OneHotLabels {
    pub fn rows(&self) -> usize {
        self.class_of_row.len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn class_of_row(&self, row: usize) -> usize {
        self.class_of_row[row]
    }

    pub fn sample_classes(&self) -> &[usize] {
        &self.class_of_row
    }

    /// Contiguous row range of each class, in ascending class order.
    /// Classes without samples yield empty ranges.
    pub fn class_blocks(&self) -> Vec<std::ops::Range<usize>> {
        let mut blocks = Vec::with_capacity(self.classes);
        let mut start = 0;
        for class in 0..self.classes {
            let mut end = start;
            while end < self.class_of_row.len() && self.class_of_row[end] == class {
                end += 1;
            }
            blocks.push(start..end);
            start = end;
        }
        blocks
    }

    /// Dense row-major indicator matrix (rows x classes).
    pub fn indicator(&self) -> Vec<f32> {
        let mut data = vec![0.0f32; self.rows() * self.classes];
        for (i, &c) in self.class_of_row.iter().enumerate() {
            data[i * self.classes + c] = 1.0;
        }
        data
    }
}

impl fmt::Display for OneHotLabels {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} samples over {} classes", self.rows(), self.classes)
    }
}

/// Build one-hot labels from per-sample class indices.
///
/// Indices must be nondecreasing so that class blocks are contiguous and
/// ordered; every index must be below `n_classes`.
pub fn build_onehot(class_of_sample: &[usize], n_classes: usize) -> Result<OneHotLabels> {
    let mut prev = 0usize;
    for (i, &c) in class_of_sample.iter().enumerate() {
        if c >= n_classes {
            return Err(StoreError::OutOfRangeClass {
                class: c,
                n_classes,
            });
        }
        if c < prev {
            return Err(StoreError::NonContiguousClasses { at: i });
        }
        prev = c;
    }
    Ok(OneHotLabels {
        classes: n_classes,
        class_of_row: class_of_sample.to_vec(),
    })
}

/// Build the text classifier `W` from per-class prompt embeddings.
///
/// Row `k` of the result is the unit-normalized mean of the unit-normalized
/// prompt embeddings of class `k` (the usual prompt-ensemble rule). All
/// arithmetic is f64; the result is stored as f32 with the normalized flag
/// set.
pub fn build_classifier(
    per_class_prompt_embeddings: &[FeatureMatrix],
    n_classes: usize,
) -> Result<FeatureMatrix> {
    if per_class_prompt_embeddings.len() != n_classes {
        return Err(StoreError::ClassCountMismatch {
            expected: n_classes,
            got: per_class_prompt_embeddings.len(),
        });
    }
    let dim = per_class_prompt_embeddings
        .first()
        .map_or(0, FeatureMatrix::dim);
    let mut data = Vec::with_capacity(n_classes * dim);
    for (k, prompts) in per_class_prompt_embeddings.iter().enumerate() {
        if prompts.rows() == 0 {
            return Err(StoreError::EmptyClassPromptSet(k));
        }
        if prompts.dim() != dim {
            return Err(StoreError::DimMismatch {
                expected: dim,
                got: prompts.dim(),
            });
        }
        let mut mean = vec![0.0f64; dim];
        for (r, row) in prompts.iter_rows().enumerate() {
            let norm = row_norm(row);
            if norm < 1e-12 {
                return Err(StoreError::ZeroNormRow(r));
            }
            for (acc, &v) in mean.iter_mut().zip(row) {
                *acc += f64::from(v) / norm;
            }
        }
        let inv = 1.0 / prompts.rows() as f64;
        for v in &mut mean {
            *v *= inv;
        }
        let mean_norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        if mean_norm < 1e-12 {
            return Err(StoreError::ZeroNormRow(k));
        }
        data.extend(mean.iter().map(|&v| (v / mean_norm) as f32));
    }
    FeatureMatrix::new(n_classes, dim, data, true)
}

// ---------------------------------------------------------------------------
// Cache file I/O
// ---------------------------------------------------------------------------

const HEADER_LEN: usize = 24;

/// Serialize a matrix into the cache file byte layout.
pub fn encode_cache(m: &FeatureMatrix) -> Vec<u8> {
    let payload_len = m.data().len() * 4;
    let mut buf = Vec::with_capacity(HEADER_LEN + payload_len + 4);
    buf.extend_from_slice(&CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.push(DTYPE_F32);
    buf.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    buf.extend_from_slice(&(m.dim() as u64).to_le_bytes());
    buf.push(u8::from(m.is_normalized()));
    for v in m.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf[HEADER_LEN..]);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

/// Parse cache file bytes back into a matrix.
pub fn decode_cache(bytes: &[u8]) -> Result<FeatureMatrix> {
    if bytes.len() < HEADER_LEN + 4 {
        return Err(StoreError::Format("file too short".into()));
    }
    if bytes[0..4] != CACHE_MAGIC {
        return Err(StoreError::Format("bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CACHE_VERSION {
        return Err(StoreError::Format(format!("unsupported version {version}")));
    }
    let dtype = bytes[6];
    if dtype != DTYPE_F32 {
        return Err(StoreError::Format(format!("unsupported dtype {dtype}")));
    }
    let rows = u64::from_le_bytes(bytes[7..15].try_into().unwrap()) as usize;
    let dim = u64::from_le_bytes(bytes[15..23].try_into().unwrap()) as usize;
    let normalized = match bytes[23] {
        0 => false,
        1 => true,
        other => return Err(StoreError::Format(format!("bad normalized flag {other}"))),
    };
    let payload_len = rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| StoreError::Format("rows x dim overflows".into()))?;
    if bytes.len() != HEADER_LEN + payload_len + 4 {
        return Err(StoreError::Format(format!(
            "payload length {} does not match rows x dim = {}",
            bytes.len() - HEADER_LEN - 4,
            payload_len / 4
        )));
    }
    let payload = &bytes[HEADER_LEN..HEADER_LEN + payload_len];
    let stored_crc = u32::from_le_bytes(bytes[HEADER_LEN + payload_len..].try_into().unwrap());
    let crc = crc32fast::hash(payload);
    if crc != stored_crc {
        return Err(StoreError::Format(format!(
            "crc mismatch: stored {stored_crc:#010x}, computed {crc:#010x}"
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    FeatureMatrix::new(rows, dim, data, normalized)
}

/// Write a matrix to `path` atomically (temp file + rename).
pub fn save_cache(m: &FeatureMatrix, path: &Path) -> Result<()> {
    let bytes = encode_cache(m);
    write_atomic(path, &bytes)
}

/// Read a matrix from `path`, rejecting wrong magic, wrong version, and
/// payload corruption.
pub fn load_cache(path: &Path) -> Result<FeatureMatrix> {
    let bytes = std::fs::read(path)?;
    decode_cache(&bytes)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| StoreError::Format(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Sidecar metadata
// ---------------------------------------------------------------------------

/// Sidecar metadata describing a cache file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheMeta {
    pub dataset: String,
    pub backbone: String,
    pub classes: Vec<String>,
    pub sample_classes: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support_size: Option<usize>,
}

/// Path of the sidecar metadata for a cache file: `foo.caps` -> `foo.meta.json`.
pub fn meta_path(cache_path: &Path) -> PathBuf {
    cache_path.with_extension("meta.json")
}

pub fn save_meta(meta: &CacheMeta, cache_path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(meta)?;
    bytes.push(b'\n');
    write_atomic(&meta_path(cache_path), &bytes)
}

/// Load the sidecar metadata for a cache file, if present.
pub fn load_meta(cache_path: &Path) -> Result<Option<CacheMeta>> {
    let p = meta_path(cache_path);
    if !p.exists() {
        return Ok(None);
    }
    let bytes = std::fs::read(p)?;
    Ok(Some(serde_json::from_slice(&bytes)?))
}

/// Label file consumed by the CLI (`--labels`): ordered class names plus the
/// per-sample class index mapping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelsFile {
    pub classes: Vec<String>,
    pub sample_classes: Vec<usize>,
}

impl LabelsFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn onehot(&self) -> Result<OneHotLabels> {
        build_onehot(&self.sample_classes, self.classes.len())
    }
}
