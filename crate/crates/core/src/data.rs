//! Dataset ingestion: the IDX container used by MNIST and a synthetic
//! Gaussian-blob generator for fast runs.
//!
//! IDX layout: two zero bytes, a type byte, a rank byte, `rank` big-endian
//! `u32` dimensions, then the row-major payload. Only unsigned bytes (`0x08`)
//! are supported. Gzip-compressed input is detected by its `1f 8b` magic and
//! inflated transparently.

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use std::io::Read;
use std::path::Path;
use thiserror::Error;

pub const IDX_TYPE_U8: u8 = 0x08;
const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("truncated IDX data: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("bad IDX magic at offset {offset}: expected 0x00, found {found:#04x}")]
    BadMagic { offset: usize, found: u8 },
    #[error("unsupported IDX element type {code:#04x} at offset {offset}")]
    UnsupportedType { offset: usize, code: u8 },
    #[error("IDX rank 0 at offset 3 describes no data")]
    ZeroRank,
    #[error("IDX dimensions overflow the addressable size")]
    SizeOverflow,
    #[error("{extra} trailing bytes after the IDX payload at offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("expected an IDX tensor of rank {expected}, found rank {found}")]
    RankMismatch { expected: usize, found: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {label} at index {index} is outside 0..{class_count}")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        class_count: usize,
    },
    #[error("gzip stream: {0}")]
    Gzip(std::io::Error),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid dataset request: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxTensor {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxTensor, DataError> {
    if bytes.starts_with(&GZIP_MAGIC) {
        let mut inflated = Vec::new();
        GzDecoder::new(bytes)
            .read_to_end(&mut inflated)
            .map_err(DataError::Gzip)?;
        return parse_raw_idx(&inflated);
    }
    parse_raw_idx(bytes)
}

fn take(bytes: &[u8], offset: usize, needed: usize) -> Result<&[u8], DataError> {
    offset
        .checked_add(needed)
        .and_then(|end| bytes.get(offset..end))
        .ok_or(DataError::Truncated {
            offset,
            needed,
            available: bytes.len().saturating_sub(offset),
        })
}

fn parse_raw_idx(bytes: &[u8]) -> Result<IdxTensor, DataError> {
    let header = take(bytes, 0, 4)?;
    for (offset, &b) in header[..2].iter().enumerate() {
        if b != 0 {
            return Err(DataError::BadMagic { offset, found: b });
        }
    }
    if header[2] != IDX_TYPE_U8 {
        return Err(DataError::UnsupportedType {
            offset: 2,
            code: header[2],
        });
    }
    let rank = header[3] as usize;
    if rank == 0 {
        return Err(DataError::ZeroRank);
    }
    let mut dims = Vec::with_capacity(rank);
    let mut offset = 4;
    for _ in 0..rank {
        let raw = take(bytes, offset, 4)?;
        dims.push(u32::from_be_bytes([raw[0], raw[1], raw[2], raw[3]]) as usize);
        offset += 4;
    }
    let len = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or(DataError::SizeOverflow)?;
    let data = take(bytes, offset, len)?.to_vec();
    let end = offset + len;
    if end != bytes.len() {
        return Err(DataError::TrailingBytes {
            offset: end,
            extra: bytes.len() - end,
        });
    }
    Ok(IdxTensor { dims, data })
}

/// Serializes an unsigned-byte tensor in IDX layout.
pub fn write_idx(tensor: &IdxTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * tensor.dims.len() + tensor.data.len());
    out.extend_from_slice(&[0, 0, IDX_TYPE_U8, tensor.dims.len() as u8]);
    for &d in &tensor.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&tensor.data);
    out
}

pub fn read_idx_file(path: &Path) -> Result<IdxTensor, DataError> {
    let bytes = std::fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_idx(&bytes)
}

/// Features (without the bias coordinate) and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl LabeledDataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, class_count: usize) -> Result<Self, DataError> {
        if features.len() != labels.len() {
            return Err(DataError::CountMismatch {
                images: features.len(),
                labels: labels.len(),
            });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= class_count) {
            return Err(DataError::LabelOutOfRange {
                index,
                label,
                class_count,
            });
        }
        Ok(Self {
            features,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    /// Keeps the rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            features: indices.iter().map(|&i| self.features[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }

    /// Splits off the first `n` rows.
    pub fn split_at(&self, n: usize) -> (Self, Self) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.select(&head), self.select(&tail))
    }
}

/// Pairs an image tensor `(n, rows, cols)` with a label tensor `(n)`.
pub fn mnist_from_idx(
    images: &IdxTensor,
    labels: &IdxTensor,
    class_count: usize,
) -> Result<LabeledDataset, DataError> {
    if images.dims.len() != 3 {
        return Err(DataError::RankMismatch {
            expected: 3,
            found: images.dims.len(),
        });
    }
    if labels.dims.len() != 1 {
        return Err(DataError::RankMismatch {
            expected: 1,
            found: labels.dims.len(),
        });
    }
    let (n, pixels) = (images.dims[0], images.dims[1] * images.dims[2]);
    if labels.dims[0] != n {
        return Err(DataError::CountMismatch {
            images: n,
            labels: labels.dims[0],
        });
    }
    let features = if pixels == 0 {
        vec![Vec::new(); n]
    } else {
        images
            .data
            .chunks_exact(pixels)
            .map(|row| row.iter().map(|&p| p as f64 / 255.0).collect())
            .collect()
    };
    LabeledDataset::new(
        features,
        labels.data.iter().map(|&l| l as usize).collect(),
        class_count,
    )
}

pub fn load_mnist(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset, DataError> {
    mnist_from_idx(&read_idx_file(images_path)?, &read_idx_file(labels_path)?, 10)
}

/// Balanced Gaussian blobs: class `c` is centered at `separation * e_c` with
/// identity covariance.
pub fn synth_dataset<R: Rng + ?Sized>(
    class_count: usize,
    feature_dim: usize,
    n: usize,
    separation: f64,
    rng: &mut R,
) -> Result<LabeledDataset, DataError> {
    if class_count == 0 {
        return Err(DataError::Invalid("class_count must be positive".into()));
    }
    if feature_dim < class_count {
        return Err(DataError::Invalid(format!(
            "feature_dim {feature_dim} cannot hold {class_count} orthogonal class centers"
        )));
    }
    if n < class_count {
        return Err(DataError::Invalid(format!(
            "{n} points cannot cover {class_count} classes"
        )));
    }
    if !(separation.is_finite() && separation >= 0.0) {
        return Err(DataError::Invalid(format!("separation {separation}")));
    }
    let mut labels: Vec<usize> = (0..n).map(|i| i % class_count).collect();
    labels.shuffle(rng);
    let features = labels
        .iter()
        .map(|&c| {
            (0..feature_dim)
                .map(|j| {
                    let z: f64 = rng.sample(StandardNormal);
                    if j == c {
                        separation + z
                    } else {
                        z
                    }
                })
                .collect()
        })
        .collect();
    LabeledDataset::new(features, labels, class_count)
}
