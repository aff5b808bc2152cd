//! MNIST IDX files, dataset splits, and seeded mini-batches.
//!
//! Pixels stay in the integer `[0, 255]` domain everywhere outside the model.

use std::collections::BTreeSet;
use std::path::Path;

use mter_nn::{Model, Tensor, IMAGE_PIXELS, IMAGE_SIDE};
use rand::seq::SliceRandom;

use crate::error::{MterError, Result};
use crate::report::write_atomic;
use crate::seed::derive_rng;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

pub const MNIST_CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IdxKind {
    Images,
    Labels,
}

impl IdxKind {
    pub fn magic(self) -> u32 {
        match self {
            IdxKind::Images => IMAGES_MAGIC,
            IdxKind::Labels => LABELS_MAGIC,
        }
    }

    fn ndims(self) -> usize {
        (self.magic() & 0xff) as usize
    }
}

/// Unsigned-byte IDX array: dimension sizes plus the row-major payload.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub kind: IdxKind,
    pub dims: Vec<u32>,
    pub data: Vec<u8>,
}

impl IdxArray {
    pub fn images(count: usize, pixels: Vec<u8>) -> Self {
        Self {
            kind: IdxKind::Images,
            dims: vec![count as u32, IMAGE_SIDE as u32, IMAGE_SIDE as u32],
            data: pixels,
        }
    }

    pub fn labels(labels: Vec<u8>) -> Self {
        Self {
            kind: IdxKind::Labels,
            dims: vec![labels.len() as u32],
            data: labels,
        }
    }

    pub fn count(&self) -> usize {
        self.dims.first().copied().unwrap_or(0) as usize
    }
}

/// Decodes an IDX byte stream. `origin` only labels error messages.
pub fn decode_idx(bytes: &[u8], kind: IdxKind, origin: &str) -> Result<IdxArray> {
    let truncated = |expected| MterError::TruncatedFile {
        path: origin.to_string(),
        expected,
        actual: bytes.len(),
    };
    if bytes.len() < 4 {
        return Err(truncated(4));
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    if magic != kind.magic() {
        return Err(MterError::WrongMagic {
            path: origin.to_string(),
            expected: kind.magic(),
            found: magic,
        });
    }
    let ndims = kind.ndims();
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(truncated(header));
    }
    let dims: Vec<u32> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let payload = dims.iter().map(|&d| d as usize).product::<usize>();
    let total = header + payload;
    if bytes.len() < total {
        return Err(truncated(total));
    }
    if bytes.len() > total {
        return Err(MterError::TrailingBytes {
            path: origin.to_string(),
            extra: bytes.len() - total,
        });
    }
    Ok(IdxArray {
        kind,
        dims,
        data: bytes[header..].to_vec(),
    })
}

pub fn encode_idx(arr: &IdxArray) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * arr.dims.len() + arr.data.len());
    out.extend_from_slice(&arr.kind.magic().to_be_bytes());
    for d in &arr.dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(&arr.data);
    out
}

pub fn load_idx(path: &Path, kind: IdxKind) -> Result<IdxArray> {
    let bytes = std::fs::read(path).map_err(|e| MterError::io(path, e))?;
    decode_idx(&bytes, kind, &path.display().to_string())
}

pub fn save_idx(path: &Path, arr: &IdxArray) -> Result<()> {
    write_atomic(path, &encode_idx(arr))
}

/// Labelled images held as contiguous `u8` pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pixels: Vec<u8>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(pixels: Vec<u8>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if pixels.len() != labels.len() * IMAGE_PIXELS {
            return Err(MterError::CountMismatch {
                images: pixels.len() / IMAGE_PIXELS,
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(MterError::ShapeMismatch(format!(
                "label {bad} outside {num_classes} classes"
            )));
        }
        Ok(Self {
            pixels,
            labels,
            num_classes,
        })
    }

    /// Pairs an images file with a labels file.
    pub fn from_idx(images: &IdxArray, labels: &IdxArray) -> Result<Self> {
        if images.kind != IdxKind::Images || labels.kind != IdxKind::Labels {
            return Err(MterError::ShapeMismatch("expected an images and a labels array".into()));
        }
        let (rows, cols) = (images.dims[1] as usize, images.dims[2] as usize);
        if rows != IMAGE_SIDE || cols != IMAGE_SIDE {
            return Err(MterError::WrongImageSize {
                path: "images".into(),
                rows,
                cols,
            });
        }
        if images.count() != labels.count() {
            return Err(MterError::CountMismatch {
                images: images.count(),
                labels: labels.count(),
            });
        }
        let labels: Vec<usize> = labels.data.iter().map(|&l| l as usize).collect();
        let num_classes = labels.iter().max().map_or(0, |m| m + 1).max(MNIST_CLASSES);
        Self::new(images.data.clone(), labels, num_classes)
    }

    pub fn load(images: &Path, labels: &Path) -> Result<Self> {
        Self::from_idx(&load_idx(images, IdxKind::Images)?, &load_idx(labels, IdxKind::Labels)?)
    }

    pub fn to_idx(&self) -> (IdxArray, IdxArray) {
        (
            IdxArray::images(self.len(), self.pixels.clone()),
            IdxArray::labels(self.labels.iter().map(|&l| l as u8).collect()),
        )
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.pixels[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn batch(&self, indices: &[usize]) -> ImageBatch {
        let mut pixels = Vec::with_capacity(indices.len() * IMAGE_PIXELS);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        ImageBatch { pixels, labels }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let b = self.batch(indices);
        Dataset {
            pixels: b.pixels,
            labels: b.labels,
            num_classes: self.num_classes,
        }
    }

    /// First `n` samples of a seed-determined permutation, or everything when `n >= len`.
    pub fn sample(&self, n: usize, seed: u64) -> Dataset {
        if n >= self.len() {
            return self.clone();
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut derive_rng(seed, "dataset-sample", 0));
        idx.truncate(n);
        idx.sort_unstable();
        self.subset(&idx)
    }

    pub fn all(&self) -> ImageBatch {
        ImageBatch {
            pixels: self.pixels.clone(),
            labels: self.labels.clone(),
        }
    }

    /// One epoch of shuffled batches; the last batch may be short.
    pub fn batches(&self, batch_size: usize, seed: u64) -> Batches<'_> {
        assert!(batch_size >= 1, "batch size must be positive");
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut derive_rng(seed, "batches", 0));
        Batches {
            data: self,
            order,
            batch_size,
            pos: 0,
        }
    }
}

pub struct Batches<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = ImageBatch;

    fn next(&mut self) -> Option<ImageBatch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.data.batch(&self.order[self.pos..end]);
        self.pos = end;
        Some(batch)
    }
}

/// Mini-batch of `K` images of `28 x 28` integer pixels with their labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageBatch {
    pub pixels: Vec<u8>,
    pub labels: Vec<usize>,
}

impl ImageBatch {
    pub fn new(pixels: Vec<u8>, labels: Vec<usize>) -> Result<Self> {
        if pixels.len() != labels.len() * IMAGE_PIXELS {
            return Err(MterError::CountMismatch {
                images: pixels.len() / IMAGE_PIXELS,
                labels: labels.len(),
            });
        }
        Ok(Self { pixels, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.pixels[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS]
    }

    /// `[0, 1]`-scaled model input.
    pub fn to_input(&self) -> Tensor {
        Model::input_from_pixels(&self.pixels, self.len()).expect("batch pixel count is consistent")
    }

    pub fn select(&self, indices: &[usize]) -> ImageBatch {
        let mut pixels = Vec::with_capacity(indices.len() * IMAGE_PIXELS);
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        ImageBatch {
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn concat(&self, other: &ImageBatch) -> ImageBatch {
        let mut pixels = self.pixels.clone();
        pixels.extend_from_slice(&other.pixels);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        ImageBatch { pixels, labels }
    }

    /// Splits into chunks of at most `size` images.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = ImageBatch> + '_ {
        self.pixels
            .chunks(size * IMAGE_PIXELS)
            .zip(self.labels.chunks(size))
            .map(|(p, l)| ImageBatch {
                pixels: p.to_vec(),
                labels: l.to_vec(),
            })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SplitKind {
    Standard,
    /// Training classes are remapped densely in ascending order; the test
    /// side holds probe-class images under their original labels.
    OpenSet {
        train_classes: Vec<usize>,
        probe_classes: Vec<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Dataset,
    pub test: Dataset,
    pub kind: SplitKind,
}

impl DatasetSplit {
    /// Reads the four standard MNIST files from `dir`.
    pub fn load_mnist(dir: &Path) -> Result<Self> {
        Ok(Self {
            train: Dataset::load(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS))?,
            test: Dataset::load(&dir.join(TEST_IMAGES), &dir.join(TEST_LABELS))?,
            kind: SplitKind::Standard,
        })
    }
}

fn keep_classes(data: &Dataset, classes: &BTreeSet<usize>) -> Vec<usize> {
    (0..data.len()).filter(|&i| classes.contains(&data.labels[i])).collect()
}

/// Restricts training to `train_classes` and turns the test side into a
/// probe pool of the disjoint `probe_classes`.
pub fn make_open_set_split(
    split: &DatasetSplit,
    train_classes: &[usize],
    probe_classes: &[usize],
) -> Result<DatasetSplit> {
    let train_set: BTreeSet<usize> = train_classes.iter().copied().collect();
    let probe_set: BTreeSet<usize> = probe_classes.iter().copied().collect();
    let overlap: Vec<usize> = train_set.intersection(&probe_set).copied().collect();
    if !overlap.is_empty() {
        return Err(MterError::OverlappingClasses(overlap));
    }
    let limit = split.train.num_classes().max(split.test.num_classes());
    if let Some(&c) = train_set.union(&probe_set).find(|&&c| c >= limit) {
        return Err(MterError::Config(format!("class {c} does not exist")));
    }
    if train_set.is_empty() || probe_set.is_empty() {
        return Err(MterError::EmptySplit("class set is empty".into()));
    }
    let remap: Vec<Option<usize>> = {
        let mut m = vec![None; limit];
        for (dense, &c) in train_set.iter().enumerate() {
            m[c] = Some(dense);
        }
        m
    };
    let train_idx = keep_classes(&split.train, &train_set);
    let probe_idx = keep_classes(&split.test, &probe_set);
    if train_idx.is_empty() {
        return Err(MterError::EmptySplit("no training images for the chosen classes".into()));
    }
    if probe_idx.is_empty() {
        return Err(MterError::EmptySplit("no probe images for the chosen classes".into()));
    }
    let tb = split.train.batch(&train_idx);
    let train = Dataset::new(
        tb.pixels,
        tb.labels.iter().map(|&l| remap[l].expect("kept classes are mapped")).collect(),
        train_set.len(),
    )?;
    let test = split.test.subset(&probe_idx);
    Ok(DatasetSplit {
        train,
        test,
        kind: SplitKind::OpenSet {
            train_classes: train_set.into_iter().collect(),
            probe_classes: probe_set.into_iter().collect(),
        },
    })
}
