//! Datasets, IDX ingestion and seeded minibatching.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::error::{Error, Result};
use crate::linalg::{gram_schmidt, norm, DenseMatrix};
use crate::model::prng;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Default fraction of each class held out for validation.
pub const DEFAULT_HOLDOUT: f64 = 0.2;

#[derive(Debug, Error)]
pub enum IdxError {
    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { path: String, found: u32, expected: u32 },
    #[error("{path}: truncated header")]
    TruncatedHeader { path: String },
    #[error("{path}: truncated payload, expected {expected} bytes, found {found}")]
    TruncatedPayload { path: String, expected: usize, found: usize },
    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// A set of labelled rows, with no constraint on class coverage.
#[derive(Debug, Clone, PartialEq)]
pub struct Examples {
    pub inputs: DenseMatrix,
    pub labels: Vec<usize>,
}

impl Examples {
    pub fn new(inputs: DenseMatrix, labels: Vec<usize>) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::DimensionMismatch { expected: inputs.rows(), actual: labels.len() });
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Rows selected by `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Examples {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.inputs.row(i));
        }
        Examples {
            inputs: DenseMatrix::from_row_major(indices.len(), d, data).expect("row sizes agree"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub class_count: usize,
    pub examples: Examples,
}

impl Dataset {
    pub fn new(name: impl Into<String>, class_count: usize, examples: Examples) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::InvalidArgument("dataset is empty".into()));
        }
        let mut seen = vec![false; class_count];
        for &y in &examples.labels {
            if y >= class_count {
                return Err(Error::ClassOutOfRange { class: y, classes: class_count });
            }
            seen[y] = true;
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidArgument(format!("class {k} has no examples")));
        }
        if !examples.inputs.all_finite() {
            return Err(Error::NonFinite("dataset inputs".into()));
        }
        Ok(Self { name: name.into(), class_count, examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.examples.dim()
    }

    pub fn gather(&self, batch: &Minibatch) -> Examples {
        self.examples.select(&batch.indices)
    }

    /// Indices of each class, in dataset order.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut cells = vec![Vec::new(); self.class_count];
        for (i, &y) in self.examples.labels.iter().enumerate() {
            cells[y].push(i);
        }
        cells
    }

    /// Stratified split: each class with at least two examples contributes
    /// `round(fraction * n_k)` examples (clamped to `1..n_k-1`) to the
    /// held-out set.
    pub fn split_holdout(&self, fraction: f64, seed: u64) -> Result<(Dataset, Examples)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::InvalidArgument(format!("holdout fraction must lie in [0,1), got {fraction}")));
        }
        let mut rng = prng(seed);
        let mut train = Vec::new();
        let mut held = Vec::new();
        for mut cell in self.class_indices() {
            cell.shuffle(&mut rng);
            let n = cell.len();
            let take = if fraction == 0.0 || n < 2 {
                0
            } else {
                ((fraction * n as f64).round() as usize).clamp(1, n - 1)
            };
            held.extend_from_slice(&cell[..take]);
            train.extend_from_slice(&cell[take..]);
        }
        train.sort_unstable();
        held.sort_unstable();
        let train_set = Dataset::new(format!("{}/train", self.name), self.class_count, self.examples.select(&train))?;
        Ok((train_set, self.examples.select(&held)))
    }
}

/// Indices into a dataset plus the per-class partition of batch positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Minibatch {
    pub indices: Vec<usize>,
    /// `partition[k]` lists positions `r` (into `indices`) with label `k`.
    pub partition: Vec<Vec<usize>>,
}

impl Minibatch {
    pub fn new(indices: Vec<usize>, labels: &[usize], class_count: usize) -> Self {
        let mut partition = vec![Vec::new(); class_count];
        for (r, &i) in indices.iter().enumerate() {
            partition[labels[i]].push(r);
        }
        Self { indices, partition }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn one_hot(&self, labels: &[usize], class_count: usize) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(self.len(), class_count);
        for (r, &i) in self.indices.iter().enumerate() {
            m[(r, labels[i])] = 1.0;
        }
        m
    }
}

/// One epoch of minibatches: a seeded permutation cut into contiguous
/// slices of `batch_size` (the last may be shorter). `batch_size >= |D|`
/// yields a single full batch.
pub fn minibatch_stream(dataset: &Dataset, batch_size: usize, epoch_seed: u64) -> Result<Vec<Minibatch>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut prng(epoch_seed));
    Ok(order
        .chunks(batch_size)
        .map(|chunk| Minibatch::new(chunk.to_vec(), &dataset.examples.labels, dataset.class_count))
        .collect())
}

/// Parameters of a synthetic Gaussian-blob dataset.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BlobSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub mean_scale: f64,
    pub sigma: f64,
    pub seed: u64,
}

/// `classes` Gaussian clusters. Class means are `mean_scale` times an
/// orthonormalized set of random directions (plain normalized directions
/// when `classes > dim`); samples add `sigma` times standard normal noise.
/// Examples are ordered class by class.
pub fn generate_blobs(spec: &BlobSpec) -> Result<Dataset> {
    if spec.classes < 2 || spec.dim < 2 {
        return Err(Error::InvalidArgument("blobs need at least 2 classes and 2 dimensions".into()));
    }
    if spec.per_class == 0 {
        return Err(Error::InvalidArgument("blobs need at least one example per class".into()));
    }
    let mut rng = prng(spec.seed);
    let raw: Vec<Vec<f64>> =
        (0..spec.classes).map(|_| (0..spec.dim).map(|_| rng.sample(StandardNormal)).collect()).collect();
    let mut directions = if spec.classes <= spec.dim { gram_schmidt(&raw, 1e-10)? } else { Vec::new() };
    if directions.len() != spec.classes {
        directions = raw
            .iter()
            .map(|v| {
                let n = norm(v);
                v.iter().map(|x| x / n).collect()
            })
            .collect();
    }
    let n = spec.classes * spec.per_class;
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for (k, dir) in directions.iter().enumerate() {
        for _ in 0..spec.per_class {
            for &m in dir {
                let z: f64 = rng.sample(StandardNormal);
                data.push(spec.mean_scale * m + spec.sigma * z);
            }
            labels.push(k);
        }
    }
    let examples = Examples::new(DenseMatrix::from_row_major(n, spec.dim, data)?, labels)?;
    let name = format!(
        "blobs-c{}-n{}-d{}-s{}-sigma{}-seed{}",
        spec.classes, spec.per_class, spec.dim, spec.mean_scale, spec.sigma, spec.seed
    );
    Dataset::new(name, spec.classes, examples)
}

fn read_u32_be(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

/// Parses an IDX image tensor (magic 0x803: count, rows, cols, then
/// unsigned bytes). Returns `(count, rows*cols, pixels / 255)`.
pub fn parse_idx_images(bytes: &[u8], path: &str) -> Result<(usize, usize, Vec<f64>), IdxError> {
    if bytes.len() < 16 {
        return Err(IdxError::TruncatedHeader { path: path.into() });
    }
    let magic = read_u32_be(bytes, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(IdxError::BadMagic { path: path.into(), found: magic, expected: IDX_IMAGES_MAGIC });
    }
    let count = read_u32_be(bytes, 4) as usize;
    let rows = read_u32_be(bytes, 8) as usize;
    let cols = read_u32_be(bytes, 12) as usize;
    let expected = count * rows * cols;
    let payload = &bytes[16..];
    if payload.len() < expected {
        return Err(IdxError::TruncatedPayload { path: path.into(), expected, found: payload.len() });
    }
    let pixels = payload[..expected].iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok((count, rows * cols, pixels))
}

/// Parses an IDX label vector (magic 0x801: count, then unsigned bytes).
pub fn parse_idx_labels(bytes: &[u8], path: &str) -> Result<Vec<u8>, IdxError> {
    if bytes.len() < 8 {
        return Err(IdxError::TruncatedHeader { path: path.into() });
    }
    let magic = read_u32_be(bytes, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(IdxError::BadMagic { path: path.into(), found: magic, expected: IDX_LABELS_MAGIC });
    }
    let count = read_u32_be(bytes, 4) as usize;
    let payload = &bytes[8..];
    if payload.len() < count {
        return Err(IdxError::TruncatedPayload { path: path.into(), expected: count, found: payload.len() });
    }
    Ok(payload[..count].to_vec())
}

/// Loads an IDX image/label pair. The class count is `max(label) + 1`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let read = |p: &Path| {
        std::fs::read(p).map_err(|source| IdxError::Io { path: p.display().to_string(), source })
    };
    let image_bytes = read(images_path)?;
    let label_bytes = read(labels_path)?;
    let (count, dim, pixels) = parse_idx_images(&image_bytes, &images_path.display().to_string())?;
    let labels = parse_idx_labels(&label_bytes, &labels_path.display().to_string())?;
    if labels.len() != count {
        return Err(IdxError::CountMismatch { images: count, labels: labels.len() }.into());
    }
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let examples = Examples::new(DenseMatrix::from_row_major(count, dim, pixels)?, labels)?;
    let name = images_path.file_name().map_or_else(|| "idx".to_string(), |n| n.to_string_lossy().into_owned());
    Dataset::new(name, classes, examples)
}

/// Serializes raw image bytes in the IDX layout read by [`parse_idx_images`].
pub fn encode_idx_images(count: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for v in [count, rows, cols] {
        out.extend_from_slice(&(v as u32).to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(classes: usize, per_class: usize, sigma: f64) -> Dataset {
        generate_blobs(&BlobSpec { classes, per_class, dim: 5, mean_scale: 3.0, sigma, seed: 9 }).unwrap()
    }

    #[test]
    fn blobs_shape_and_determinism() {
        let a = generate_blobs(&BlobSpec { classes: 2, per_class: 10, dim: 3, mean_scale: 2.0, sigma: 1.0, seed: 1 })
            .unwrap();
        assert_eq!(a.len(), 20);
        assert_eq!(a.class_count, 2);
        assert!(a.examples.labels.iter().all(|&y| y < 2));
        let b = generate_blobs(&BlobSpec { classes: 2, per_class: 10, dim: 3, mean_scale: 2.0, sigma: 1.0, seed: 1 })
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_sigma_blobs_are_identical_within_class() {
        let ds = blobs(3, 4, 0.0);
        for cell in ds.class_indices() {
            for &i in &cell {
                assert_eq!(ds.examples.inputs.row(i), ds.examples.inputs.row(cell[0]));
            }
        }
    }

    #[test]
    fn blob_validation() {
        assert!(generate_blobs(&BlobSpec { classes: 1, per_class: 3, dim: 3, mean_scale: 1.0, sigma: 1.0, seed: 0 })
            .is_err());
        assert!(generate_blobs(&BlobSpec { classes: 3, per_class: 3, dim: 1, mean_scale: 1.0, sigma: 1.0, seed: 0 })
            .is_err());
    }

    #[test]
    fn full_and_singleton_batches() {
        let ds = blobs(3, 5, 1.0);
        let full = minibatch_stream(&ds, ds.len(), 4).unwrap();
        assert_eq!(full.len(), 1);
        let mut idx = full[0].indices.clone();
        idx.sort_unstable();
        assert_eq!(idx, (0..ds.len()).collect::<Vec<_>>());
        for (k, cell) in full[0].partition.iter().enumerate() {
            assert_eq!(cell.len(), ds.class_indices()[k].len());
        }
        let singles = minibatch_stream(&ds, 1, 4).unwrap();
        assert_eq!(singles.len(), ds.len());
        for b in &singles {
            assert_eq!(b.partition.iter().filter(|c| !c.is_empty()).count(), 1);
        }
        assert!(minibatch_stream(&ds, 0, 4).is_err());
    }

    #[test]
    fn batches_cover_epoch_once_and_are_seeded() {
        let ds = blobs(4, 7, 1.0);
        let batches = minibatch_stream(&ds, 5, 11).unwrap();
        assert_eq!(batches.len(), 6);
        assert_eq!(batches.last().unwrap().len(), 3);
        let mut all: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..28).collect::<Vec<_>>());
        for b in &batches {
            let total: usize = b.partition.iter().map(Vec::len).sum();
            assert_eq!(total, b.len());
            for (k, cell) in b.partition.iter().enumerate() {
                for &r in cell {
                    assert_eq!(ds.examples.labels[b.indices[r]], k);
                }
            }
            let oh = b.one_hot(&ds.examples.labels, 4);
            for r in 0..b.len() {
                assert_eq!(oh.row(r).iter().sum::<f64>(), 1.0);
            }
        }
        assert_eq!(batches, minibatch_stream(&ds, 5, 11).unwrap());
        assert_ne!(batches, minibatch_stream(&ds, 5, 12).unwrap());
    }

    #[test]
    fn holdout_is_stratified() {
        let ds = blobs(3, 10, 1.0);
        let (train, held) = ds.split_holdout(0.2, 3).unwrap();
        assert_eq!(train.len(), 24);
        assert_eq!(held.len(), 6);
        for k in 0..3 {
            assert_eq!(held.labels.iter().filter(|&&y| y == k).count(), 2);
        }
    }

    #[test]
    fn idx_fixture_parses() {
        // two 2x2 images, bytes written out by hand
        let images: Vec<u8> = vec![
            0x00, 0x00, 0x08, 0x03, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2, //
            0, 1, 2, 3, 128, 254, 255, 7,
        ];
        let labels: Vec<u8> = vec![0x00, 0x00, 0x08, 0x01, 0, 0, 0, 2, 1, 0];
        assert_eq!(images, encode_idx_images(2, 2, 2, &[0, 1, 2, 3, 128, 254, 255, 7]));
        assert_eq!(labels, encode_idx_labels(&[1, 0]));
        let (count, dim, px) = parse_idx_images(&images, "fixture").unwrap();
        assert_eq!((count, dim), (2, 4));
        assert_eq!(px[1], 1.0 / 255.0);
        assert_eq!(px[6], 1.0);
        assert_eq!(parse_idx_labels(&labels, "fixture").unwrap(), vec![1, 0]);
    }

    #[test]
    fn idx_error_kinds() {
        assert!(matches!(parse_idx_images(&[], "e"), Err(IdxError::TruncatedHeader { .. })));
        assert!(matches!(parse_idx_labels(&[0, 0, 8], "e"), Err(IdxError::TruncatedHeader { .. })));
        let mut bad = encode_idx_images(1, 1, 1, &[5]);
        bad[3] = 0x01;
        assert!(matches!(parse_idx_images(&bad, "e"), Err(IdxError::BadMagic { found: 0x801, .. })));
        let short = encode_idx_images(2, 2, 2, &[1, 2, 3]);
        assert!(matches!(parse_idx_images(&short, "e"), Err(IdxError::TruncatedPayload { expected: 8, found: 3, .. })));
    }
}
