//! Labeled image datasets: MNIST IDX files and seeded synthetic blobs.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images `[N, H, W, C]` plus one class index per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    images: Tensor,
    labels: Vec<usize>,
    class_count: usize,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Dataset(format!(
                "images must be [N, H, W, C], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Dataset(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= class_count) {
            return Err(Error::Dataset(format!(
                "label {l} of sample {i} is outside [0, {class_count})"
            )));
        }
        images.check_finite("images")?;
        Ok(LabeledDataset {
            images,
            labels,
            class_count,
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape `[H, W, C]`.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Images and labels of the given samples, in the given order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let images = self.images.gather_batch(indices)?;
        Ok((images, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    pub fn select(&self, indices: &[usize]) -> Result<LabeledDataset> {
        let (images, labels) = self.batch(indices)?;
        Ok(LabeledDataset {
            images,
            labels,
            class_count: self.class_count,
        })
    }

    /// Number of samples per class.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn idx_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Idx {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Parse an IDX file with the given magic; returns the dimensions and payload.
fn read_idx(path: &Path, magic: u32) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 4 {
        return Err(idx_error(path, "truncated header"));
    }
    let found = read_u32(&bytes, 0);
    if found != magic {
        return Err(idx_error(
            path,
            format!("bad magic {found:#010x}, expected {magic:#010x}"),
        ));
    }
    let ndims = (magic & 0xff) as usize;
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(idx_error(path, "truncated header"));
    }
    let dims: Vec<usize> = (0..ndims).map(|i| read_u32(&bytes, 4 + 4 * i) as usize).collect();
    let count: usize = dims.iter().product();
    if bytes.len() - header != count {
        return Err(idx_error(
            path,
            format!(
                "header declares {count} bytes of data, file has {}",
                bytes.len() - header
            ),
        ));
    }
    Ok((dims, bytes[header..].to_vec()))
}

/// Load an IDX image/label pair. Pixels are scaled by 1/255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let (idims, pixels) = read_idx(images_path, IDX_IMAGES_MAGIC)?;
    let (ldims, labels) = read_idx(labels_path, IDX_LABELS_MAGIC)?;
    if idims[0] != ldims[0] {
        return Err(Error::Dataset(format!(
            "{} has {} images but {} has {} labels",
            images_path.display(),
            idims[0],
            labels_path.display(),
            ldims[0]
        )));
    }
    if idims.contains(&0) {
        return Err(idx_error(images_path, "empty dataset"));
    }
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let class_count = labels.iter().max().map_or(0, |m| m + 1);
    let images = Tensor::new(
        vec![idims[0], idims[1], idims[2], 1],
        pixels.into_iter().map(|p| f64::from(p) / 255.0).collect(),
    )?;
    LabeledDataset::new(images, labels, class_count)
}

/// Write `ds` as an IDX pair. Requires a single channel and values in [0, 1];
/// pixels are stored as `round(v * 255)`.
pub fn write_idx(ds: &LabeledDataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let &[n, h, w, c] = ds.images.shape() else {
        unreachable!("dataset images are rank 4")
    };
    if c != 1 {
        return Err(Error::Dataset(format!("IDX images need one channel, got {c}")));
    }
    if ds.class_count > 256 {
        return Err(Error::Dataset("IDX labels are single bytes".into()));
    }
    if let Some(v) = ds.images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Dataset(format!("pixel value {v} outside [0, 1]")));
    }
    let mut out = Vec::with_capacity(16 + n * h * w);
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [n, h, w] {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend(ds.images.data().iter().map(|v| (v * 255.0).round() as u8));
    fs::write(images_path, out).map_err(|e| Error::io(images_path, e))?;

    let mut out = Vec::with_capacity(8 + n);
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(n as u32).to_be_bytes());
    out.extend(ds.labels.iter().map(|&l| l as u8));
    fs::write(labels_path, out).map_err(|e| Error::io(labels_path, e))
}

/// Standard MNIST file names inside `dir`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MnistSplit {
    Train,
    Test,
}

pub fn mnist_paths(dir: &Path, split: MnistSplit) -> (PathBuf, PathBuf) {
    let prefix = match split {
        MnistSplit::Train => "train",
        MnistSplit::Test => "t10k",
    };
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

pub fn load_mnist(dir: &Path, split: MnistSplit) -> Result<LabeledDataset> {
    let (images, labels) = mnist_paths(dir, split);
    load_idx(&images, &labels)
}

/// Seeded Gaussian clusters, shape `[N, 1, 1, dims]`, samples ordered by class.
///
/// Class centers sit on a circle of radius 0.35 around 0.5 in the first two
/// coordinates (on a line for `dims == 1`); the standard deviation is one
/// eighth of the distance between neighbouring centers. Values are clamped
/// to [0, 1].
pub fn synth_gaussian_blobs(
    classes: usize,
    samples_per_class: usize,
    dims: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    if classes < 2 {
        return Err(Error::Dataset(format!("need at least 2 classes, got {classes}")));
    }
    if samples_per_class == 0 || dims == 0 {
        return Err(Error::Dataset("samples_per_class and dims must be positive".into()));
    }
    let (centers, spacing): (Vec<Vec<f64>>, f64) = if dims == 1 {
        let step = 0.7 / (classes - 1) as f64;
        ((0..classes).map(|c| vec![0.15 + step * c as f64]).collect(), step)
    } else {
        let angle = std::f64::consts::TAU / classes as f64;
        let centers = (0..classes)
            .map(|c| {
                let mut v = vec![0.5; dims];
                v[0] += 0.35 * (angle * c as f64).cos();
                v[1] += 0.35 * (angle * c as f64).sin();
                v
            })
            .collect();
        (centers, 0.7 * (angle / 2.0).sin())
    };
    let noise = Normal::new(0.0, spacing / 8.0).expect("positive standard deviation");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = classes * samples_per_class;
    let mut data = Vec::with_capacity(n * dims);
    let mut labels = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..samples_per_class {
            data.extend(center.iter().map(|m| (m + noise.sample(&mut rng)).clamp(0.0, 1.0)));
            labels.push(c);
        }
    }
    LabeledDataset::new(Tensor::new(vec![n, 1, 1, dims], data)?, labels, classes)
}

/// Seeded sample of `round(N * fraction)` samples without replacement, kept
/// in ascending index order.
pub fn subset(ds: &LabeledDataset, fraction: f64, seed: u64) -> Result<LabeledDataset> {
    ds.select(&subset_indices(ds.len(), fraction, seed)?)
}

pub fn subset_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Dataset(format!("subset fraction {fraction} is outside (0, 1]")));
    }
    let k = (n as f64 * fraction).round() as usize;
    if k == 0 {
        return Err(Error::Dataset(format!(
            "subset fraction {fraction} of {n} samples selects nothing"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = index::sample(&mut rng, n, k).into_vec();
    picked.sort_unstable();
    Ok(picked)
}
