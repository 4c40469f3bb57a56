//! Embedding, label, logit and probability files, plus splitting helpers.
//!
//! Binary layouts (all little-endian):
//!
//! ```text
//! matrix (KEMB / KPRB / KLGT): magic[4] | version u32 = 1 | n u64 | cols u32 | n*cols f32, row-major
//! labels (KLAB):               magic[4] | version u32 = 1 | n u64 | K u32    | n u32
//! ```

use std::fs;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{KcalError, Result};

pub const FORMAT_VERSION: u32 = 1;
const MATRIX_HEADER_LEN: usize = 4 + 4 + 8 + 4;

/// Four-byte tag identifying the content of a matrix container.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixKind {
    Embeddings,
    Probabilities,
    Logits,
}

impl MatrixKind {
    pub fn magic(self) -> &'static [u8; 4] {
        match self {
            MatrixKind::Embeddings => b"KEMB",
            MatrixKind::Probabilities => b"KPRB",
            MatrixKind::Logits => b"KLGT",
        }
    }
}

/// Labelled embedding matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingDataset {
    pub embeddings: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl EmbeddingDataset {
    pub fn new(embeddings: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(KcalError::Validation(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if embeddings.nrows() != labels.len() {
            return Err(KcalError::Validation(format!(
                "{} embedding rows but {} labels",
                embeddings.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(KcalError::Validation(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(KcalError::Validation("non-finite embedding entry".into()));
        }
        Ok(Self {
            embeddings,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            embeddings: self.embeddings.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn partition(&self) -> ClassPartition {
        class_partition(&self.labels, self.num_classes)
    }
}

/// Row indices grouped by class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassPartition {
    pub per_class: Vec<Vec<usize>>,
    pub counts: Vec<usize>,
}

impl ClassPartition {
    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    /// Size of the rarest class.
    pub fn min_count(&self) -> usize {
        self.counts.iter().copied().min().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Groups indices by label. Order within a class follows input order.
pub fn class_partition(labels: &[usize], num_classes: usize) -> ClassPartition {
    let mut per_class = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        per_class[y].push(i);
    }
    let counts = per_class.iter().map(Vec::len).collect();
    ClassPartition { per_class, counts }
}

/// Seeded uniform shuffle split into `(calibration, test)`.
pub fn split_dataset(
    ds: &EmbeddingDataset,
    cal_fraction: f64,
    seed: u64,
) -> Result<(EmbeddingDataset, EmbeddingDataset)> {
    let (cal_idx, test_idx) = split_indices(ds.len(), cal_fraction, seed)?;
    if cal_idx.len() < ds.num_classes {
        log::warn!(
            "calibration split has {} rows for {} classes",
            cal_idx.len(),
            ds.num_classes
        );
    }
    Ok((ds.subset(&cal_idx), ds.subset(&test_idx)))
}

/// Index form of [`split_dataset`].
pub fn split_indices(n: usize, cal_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(cal_fraction > 0.0 && cal_fraction < 1.0) {
        return Err(KcalError::Argument(format!(
            "cal_fraction must lie in (0, 1), got {cal_fraction}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_cal = ((n as f64) * cal_fraction).round() as usize;
    let test = idx.split_off(n_cal.min(n));
    Ok((idx, test))
}

/// Draws up to `per_class` rows from every class without replacement.
pub fn stratified_subsample(ds: &EmbeddingDataset, per_class: usize, seed: u64) -> EmbeddingDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::new();
    for members in ds.partition().per_class {
        let take = per_class.min(members.len());
        chosen.extend(members.choose_multiple(&mut rng, take).copied());
    }
    chosen.sort_unstable();
    ds.subset(&chosen)
}

fn check_finite(data: &Array2<f64>) -> Result<()> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(KcalError::Validation("non-finite matrix entry".into()));
    }
    Ok(())
}

/// Serializes a matrix into the shared container layout. Values are narrowed to f32.
pub fn encode_matrix(kind: MatrixKind, data: &Array2<f64>) -> Result<Vec<u8>> {
    check_finite(data)?;
    let cols = u32::try_from(data.ncols())
        .map_err(|_| KcalError::Argument("column count exceeds u32".into()))?;
    let mut out = Vec::with_capacity(MATRIX_HEADER_LEN + data.len() * 4);
    out.extend_from_slice(kind.magic());
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(data.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    for v in data.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

fn read_header(bytes: &[u8], magic: &[u8; 4]) -> Result<(u64, u32)> {
    if bytes.len() < MATRIX_HEADER_LEN {
        return Err(KcalError::Format(format!(
            "file shorter than the {MATRIX_HEADER_LEN}-byte header"
        )));
    }
    if &bytes[0..4] != magic {
        return Err(KcalError::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&bytes[0..4]),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(KcalError::Format(format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let cols = u32::from_le_bytes(bytes[16..20].try_into().unwrap());
    Ok((n, cols))
}

pub fn decode_matrix(kind: MatrixKind, bytes: &[u8]) -> Result<Array2<f64>> {
    let (n, cols) = read_header(bytes, kind.magic())?;
    let payload = &bytes[MATRIX_HEADER_LEN..];
    let expected = n
        .checked_mul(cols as u64)
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| KcalError::Format("header dimensions overflow".into()))?;
    if payload.len() as u64 != expected {
        return Err(KcalError::SizeMismatch {
            expected,
            found: payload.len() as u64,
        });
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let data = Array2::from_shape_vec((n as usize, cols as usize), values)
        .map_err(|e| KcalError::Format(e.to_string()))?;
    check_finite(&data)?;
    Ok(data)
}

pub fn encode_labels(labels: &[usize], num_classes: usize) -> Result<Vec<u8>> {
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(KcalError::Validation(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    let k = u32::try_from(num_classes)
        .map_err(|_| KcalError::Argument("class count exceeds u32".into()))?;
    let mut out = Vec::with_capacity(MATRIX_HEADER_LEN + labels.len() * 4);
    out.extend_from_slice(b"KLAB");
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(labels.len() as u64).to_le_bytes());
    out.extend_from_slice(&k.to_le_bytes());
    for &y in labels {
        out.extend_from_slice(&(y as u32).to_le_bytes());
    }
    Ok(out)
}

/// Decodes a label container into `(labels, K)`.
///
/// A header K of 0 means "unspecified" and K becomes `1 + max(label)`.
pub fn decode_labels(bytes: &[u8]) -> Result<(Vec<usize>, usize)> {
    let (n, header_k) = read_header(bytes, b"KLAB")?;
    let payload = &bytes[MATRIX_HEADER_LEN..];
    let expected = n
        .checked_mul(4)
        .ok_or_else(|| KcalError::Format("header dimensions overflow".into()))?;
    if payload.len() as u64 != expected {
        return Err(KcalError::SizeMismatch {
            expected,
            found: payload.len() as u64,
        });
    }
    let labels: Vec<usize> = payload
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let header_k = header_k as usize;
    if header_k > 0 {
        if let Some(&bad) = labels.iter().find(|&&y| y >= header_k) {
            return Err(KcalError::Validation(format!(
                "label {bad} not below header class count {header_k}"
            )));
        }
    }
    let observed = labels.iter().max().map_or(0, |&m| m + 1);
    Ok((labels, header_k.max(observed)))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| KcalError::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| KcalError::io(path, e))
}

pub fn read_matrix_file(path: impl AsRef<Path>, kind: MatrixKind) -> Result<Array2<f64>> {
    decode_matrix(kind, &read_bytes(path.as_ref())?)
}

pub fn write_matrix_file(path: impl AsRef<Path>, kind: MatrixKind, data: &Array2<f64>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_matrix(kind, data)?)
}

pub fn read_embedding_file(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    read_matrix_file(path, MatrixKind::Embeddings)
}

pub fn write_embedding_file(path: impl AsRef<Path>, data: &Array2<f64>) -> Result<()> {
    write_matrix_file(path, MatrixKind::Embeddings, data)
}

/// Reads a KPRB file, renormalizing each row after the f32 round trip.
pub fn read_prob_file(path: impl AsRef<Path>) -> Result<crate::kde::ProbMatrix> {
    crate::kde::ProbMatrix::from_stored(read_matrix_file(path, MatrixKind::Probabilities)?)
}

pub fn write_prob_file(path: impl AsRef<Path>, probs: &crate::kde::ProbMatrix) -> Result<()> {
    write_matrix_file(path, MatrixKind::Probabilities, probs.as_array())
}

pub fn read_label_file(path: impl AsRef<Path>) -> Result<(Vec<usize>, usize)> {
    decode_labels(&read_bytes(path.as_ref())?)
}

pub fn write_label_file(path: impl AsRef<Path>, labels: &[usize], num_classes: usize) -> Result<()> {
    write_bytes(path.as_ref(), &encode_labels(labels, num_classes)?)
}

/// Reads a CSV fixture: one row per sample, optionally with the label in the last column.
///
/// Returns the matrix and, when `labelled`, the labels.
pub fn read_csv(path: impl AsRef<Path>, labelled: bool) -> Result<(Array2<f64>, Option<Vec<usize>>)> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| KcalError::Format(format!("{}: {e}", path.display())))?;

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut width = None;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| KcalError::Format(e.to_string()))?;
        let mut fields: Vec<&str> = record.iter().collect();
        if labelled {
            let raw = fields
                .pop()
                .ok_or_else(|| KcalError::Format(format!("row {row} is empty")))?;
            let y = raw
                .parse::<usize>()
                .map_err(|_| KcalError::Format(format!("row {row}: bad label {raw:?}")))?;
            labels.push(y);
        }
        match width {
            None => width = Some(fields.len()),
            Some(w) if w != fields.len() => {
                return Err(KcalError::Format(format!(
                    "row {row} has {} values, expected {w}",
                    fields.len()
                )))
            }
            _ => {}
        }
        for f in fields {
            let v = f
                .parse::<f64>()
                .map_err(|_| KcalError::Format(format!("row {row}: bad number {f:?}")))?;
            values.push(v);
        }
    }
    let n = if labelled { labels.len() } else { values.len() / width.unwrap_or(1).max(1) };
    let data = Array2::from_shape_vec((n, width.unwrap_or(0)), values)
        .map_err(|e| KcalError::Format(e.to_string()))?;
    check_finite(&data)?;
    Ok((data, labelled.then_some(labels)))
}
