//! Dataset ingestion and deterministic batching.
//!
//! Pixels stay in raw units (`[0, 255]` for IDX and CIFAR files) so that
//! perturbation budgets keep their pixel meaning; any normalization belongs
//! to the model.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::perturb::ValueRange;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, ..dims]`, every element inside `value_range`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub value_range: ValueRange,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, value_range: ValueRange, classes: usize, split: Split) -> Result<Self> {
        if images.batch() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} images but {} labels",
                images.batch(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        if let Some(v) = images.data().iter().find(|&&v| !value_range.contains(v)) {
            return Err(Error::InvalidArgument(format!(
                "pixel {v} outside [{}, {}]",
                value_range.lo, value_range.hi
            )));
        }
        Ok(Self {
            images,
            labels,
            value_range,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-example shape.
    pub fn example_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.gather_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            value_range: self.value_range,
            classes: self.classes,
            split: self.split,
        })
    }

    /// First `n` examples (or all, if fewer).
    pub fn take_first(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// First `n` examples of each class, in original order.
    pub fn take_per_class(&self, n: usize) -> Result<Self> {
        let mut seen = vec![0usize; self.classes];
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let c = &mut seen[self.labels[i]];
                *c += 1;
                *c <= n
            })
            .collect();
        self.subset(&idx)
    }

    /// SHA-256 over shape, pixel bits, labels, range and class count.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for &d in self.images.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in self.images.data() {
            h.update(v.to_le_bytes());
        }
        for &l in &self.labels {
            h.update((l as u32).to_le_bytes());
        }
        h.update(self.value_range.lo.to_le_bytes());
        h.update(self.value_range.hi.to_le_bytes());
        h.update((self.classes as u32).to_le_bytes());
        hex::encode(h.finalize())
    }
}

// ---------------------------------------------------------------------------
// IDX

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses an IDX header, returning dims and the payload.
fn parse_idx_header<'a>(bytes: &'a [u8], magic: u32, path: &Path) -> Result<(Vec<usize>, &'a [u8])> {
    if bytes.len() < 4 {
        return Err(format_err(path, format!("file too short for header: {} bytes", bytes.len())));
    }
    let found = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    if found != magic {
        return Err(format_err(path, format!("bad magic 0x{found:08x}, expected 0x{magic:08x}")));
    }
    let ndims = (magic & 0xff) as usize;
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(format_err(path, format!("truncated header: need {header} bytes, got {}", bytes.len())));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let expected: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() != expected {
        return Err(format_err(
            path,
            format!("payload length mismatch: expected {expected} bytes, got {}", payload.len()),
        ));
    }
    Ok((dims, payload))
}

/// Parses IDX image and label buffers into a `[N, 1, rows, cols]` dataset.
pub fn parse_idx(images: &[u8], labels: &[u8], images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (dims, pixels) = parse_idx_header(images, IDX_IMAGES_MAGIC, images_path)?;
    let (ldims, raw_labels) = parse_idx_header(labels, IDX_LABELS_MAGIC, labels_path)?;
    if dims[0] != ldims[0] {
        return Err(format_err(
            labels_path,
            format!("image/label count mismatch: {} images, {} labels", dims[0], ldims[0]),
        ));
    }
    if dims.contains(&0) {
        return Err(format_err(images_path, format!("empty dimension in {dims:?}")));
    }
    let labels: Vec<usize> = raw_labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().copied().max().unwrap_or(0).max(1) + 1;
    let images = Tensor::new(
        vec![dims[0], 1, dims[1], dims[2]],
        pixels.iter().map(|&p| p as f32).collect(),
    )?;
    Dataset::new(images, labels, ValueRange::PIXELS_255, classes, Split::Train)
}

/// Loads an IDX image/label file pair (MNIST layout).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = read_file(images_path)?;
    let labels = read_file(labels_path)?;
    parse_idx(&images, &labels, images_path, labels_path)
}

/// Encodes a `[N, 1, rows, cols]` (or `[N, rows, cols]`) dataset with
/// integral pixels in `[0, 255]` as IDX image and label buffers.
pub fn encode_idx(dataset: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let shape = dataset.images.shape();
    let (rows, cols) = match shape {
        [_, 1, r, c] | [_, r, c] => (*r, *c),
        _ => return Err(Error::InvalidArgument(format!("cannot encode shape {shape:?} as IDX images"))),
    };
    let n = dataset.len();
    let mut images = Vec::with_capacity(16 + dataset.images.numel());
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [n, rows, cols] {
        images.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for &v in dataset.images.data() {
        if !(0.0..=255.0).contains(&v) || v.fract() != 0.0 {
            return Err(Error::InvalidArgument(format!("pixel {v} is not a byte value")));
        }
        images.push(v as u8);
    }
    let mut labels = Vec::with_capacity(8 + n);
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(n as u32).to_be_bytes());
    for &l in &dataset.labels {
        labels.push(u8::try_from(l).map_err(|_| Error::InvalidArgument(format!("label {l} exceeds a byte")))?);
    }
    Ok((images, labels))
}

pub fn write_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (images, labels) = encode_idx(dataset)?;
    std::fs::write(images_path, images).map_err(|e| Error::io(images_path, e))?;
    std::fs::write(labels_path, labels).map_err(|e| Error::io(labels_path, e))
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary

/// Parses one CIFAR-10 binary batch: records of one label byte followed by
/// 3072 channel-major pixels.
pub fn parse_cifar_binary(bytes: &[u8], path: &Path) -> Result<(Vec<f32>, Vec<usize>)> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(format_err(
            path,
            format!("length {} is not a positive multiple of {CIFAR_RECORD}", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(format_err(path, format!("record {i} has label {} >= 10", rec[0])));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&p| p as f32));
    }
    Ok((pixels, labels))
}

/// Loads and concatenates CIFAR-10 binary batch files into `[N, 3, 32, 32]`.
pub fn load_cifar_binary<P: AsRef<Path>>(paths: &[P]) -> Result<Dataset> {
    if paths.is_empty() {
        return Err(Error::InvalidArgument("no CIFAR batch files given".into()));
    }
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let (px, lb) = parse_cifar_binary(&read_file(p)?, p)?;
        pixels.extend(px);
        labels.extend(lb);
    }
    let images = Tensor::new(vec![labels.len(), 3, 32, 32], pixels)?;
    Dataset::new(images, labels, ValueRange::PIXELS_255, 10, Split::Train)
}

// ---------------------------------------------------------------------------
// synthetic blobs

/// Gaussian clusters with unit variance around deterministic class centers
/// `separation` apart, mapped affinely into `[0, 1]` and clipped. Example `i`
/// belongs to class `i % classes`.
pub fn synth_blobs(classes: usize, per_class: usize, dims: usize, separation: f32, seed: u64) -> Result<Dataset> {
    if classes < 2 || per_class == 0 || dims == 0 || !(separation > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "blobs need classes >= 2, per_class >= 1, dims >= 1, separation > 0; got {classes}, {per_class}, {dims}, {separation}"
        )));
    }
    let radius = separation as f64 / std::f64::consts::SQRT_2;
    // class k sits on axis k % dims, alternating sign per wrap, growing for k >= 2*dims
    let center = |k: usize| -> (usize, f64) {
        let wrap = k / dims;
        let sign = if wrap % 2 == 0 { 1.0 } else { -1.0 };
        (k % dims, sign * radius * (1.0 + (wrap / 2) as f64))
    };
    let max_norm = (0..classes).map(|k| center(k).1.abs()).fold(0.0, f64::max);
    let scale = 1.0 / (2.0 * (max_norm + 4.0));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * dims);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        let (axis, offset) = center(k);
        for j in 0..dims {
            let noise: f64 = StandardNormal.sample(&mut rng);
            let z = noise + if j == axis { offset } else { 0.0 };
            data.push(((0.5 + z * scale) as f32).clamp(0.0, 1.0));
        }
        labels.push(k);
    }
    Dataset::new(Tensor::new(vec![n, dims], data)?, labels, ValueRange::UNIT, classes, Split::Train)
}

// ---------------------------------------------------------------------------
// batching

/// A minibatch as indices into its dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn gather(&self, dataset: &Dataset) -> Result<(Tensor, Vec<usize>)> {
        let x = dataset.images.gather_rows(&self.indices)?;
        let y = self.indices.iter().map(|&i| dataset.labels[i]).collect();
        Ok((x, y))
    }
}

/// Splits a dataset into batches, under a seeded permutation when `shuffle`
/// is set. The last batch may be short.
pub fn batches(dataset: &Dataset, batch_size: usize, seed: u64, shuffle: bool) -> Result<Vec<Batch>> {
    batch_indices(dataset.len(), batch_size, seed, shuffle)
}

pub fn batch_indices(n: usize, batch_size: usize, seed: u64, shuffle: bool) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order
        .chunks(batch_size)
        .map(|c| Batch { indices: c.to_vec() })
        .collect())
}

/// Seeded random horizontal flip and zero-padded random crop for
/// `[N, C, H, W]` images. Off by default everywhere.
pub fn augment_flip_crop(images: &Tensor, pad: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let [n, c, h, w] = match images.shape() {
        &[n, c, h, w] => [n, c, h, w],
        s => return Err(Error::shape("augment", "[N, C, H, W]", format!("{s:?}"))),
    };
    let mut out = vec![0.0f32; images.numel()];
    let src = images.data();
    for i in 0..n {
        let flip = rng.random_bool(0.5);
        let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
        for ch in 0..c {
            let base = (i * c + ch) * h * w;
            for y in 0..h {
                for x in 0..w {
                    let sy = y as isize + dy;
                    let sx0 = x as isize + dx;
                    let sx = if flip { w as isize - 1 - sx0 } else { sx0 };
                    if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                        out[base + y * w + x] = src[base + sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    Tensor::new(images.shape().to_vec(), out)
}
