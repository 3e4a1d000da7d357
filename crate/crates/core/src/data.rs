//! MNIST (IDX) and CIFAR-10 (binary batch) loaders, normalization, seeded
//! splitting and mini-batch planning.
//!
//! Loaders keep the raw byte values (0..=255) as `f64`; [`Dataset::normalize`]
//! divides by 255 exactly once.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_CHANNELS: usize = 3;
/// One label byte followed by the R, G and B planes.
pub const CIFAR_RECORD_LEN: usize = 1 + CIFAR_CHANNELS * CIFAR_SIDE * CIFAR_SIDE;
pub const NUM_CLASSES: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// `[N, C, H, W]`.
    images: Tensor,
    labels: Vec<u8>,
    normalized: bool,
}

impl Dataset {
    pub fn new(name: impl Into<String>, images: Tensor, labels: Vec<u8>, normalized: bool) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Rank {
                op: "Dataset::new",
                expected: 4,
                shape: images.shape().to_vec(),
            });
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::dim("Dataset::new", images.shape(), &[labels.len()]));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Validation(format!("label {bad} outside [0, {NUM_CLASSES})")));
        }
        Ok(Dataset {
            name: name.into(),
            images,
            labels,
            normalized,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// `[C, H, W]` of one sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.sample_len();
        &self.images.data()[i * n..(i + 1) * n]
    }

    /// Rescales every pixel from `[0, 255]` to `[0, 1]`. Errors if already
    /// normalized.
    pub fn normalize(mut self) -> Result<Dataset> {
        if self.normalized {
            return Err(Error::Contract(format!("dataset '{}' is already normalized", self.name)));
        }
        for v in self.images.data_mut() {
            *v /= 255.0;
        }
        self.normalized = true;
        Ok(self)
    }

    /// The samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Dataset {
            name: self.name.clone(),
            images: Tensor::from_parts(shape, data),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            normalized: self.normalized,
        }
    }

    /// The first `n` samples (all of them if `n >= len`).
    pub fn take(&self, n: usize) -> Dataset {
        if n >= self.len() {
            return self.clone();
        }
        self.subset(&(0..n).collect::<Vec<_>>())
    }

    /// Seeded shuffle, then the first `floor(ratio * N)` samples go to the
    /// first part and the rest to the second.
    pub fn split(&self, ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(Error::Config(format!("split ratio must be in (0, 1), got {ratio}")));
        }
        let n_first = (ratio * self.len() as f64).floor() as usize;
        if n_first == 0 || n_first == self.len() {
            return Err(Error::Config(format!(
                "split of {} samples at {ratio} leaves one side empty",
                self.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng::stream(seed, rng::STREAM_SPLIT));
        Ok((self.subset(&order[..n_first]), self.subset(&order[n_first..])))
    }

    /// Index batches covering every sample once: `ceil(N / batch_size)`
    /// batches, the last possibly short. With `shuffle_seed` the order is a
    /// seeded permutation, otherwise the stored order.
    pub fn batches(&self, batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Vec<usize>> {
        batch_plan(self.len(), batch_size, shuffle_seed)
    }

    /// Stacks the samples at `indices` into a `[B, ..sample_shape]` input
    /// (reshaped when `sample_shape` has the same size, e.g. flat MLP
    /// inputs) and one-hot `[B, classes]` targets.
    pub fn gather(&self, indices: &[usize], sample_shape: &[usize], classes: usize) -> Result<(Tensor, Tensor)> {
        let n = self.sample_len();
        if sample_shape.iter().product::<usize>() != n {
            return Err(Error::dim("Dataset::gather", self.sample_shape(), sample_shape));
        }
        if classes < NUM_CLASSES && self.labels.iter().any(|&l| l as usize >= classes) {
            return Err(Error::Config(format!(
                "dataset labels exceed the {classes} network outputs"
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut targets = vec![0.0; indices.len() * classes];
        for (row, &i) in indices.iter().enumerate() {
            data.extend_from_slice(self.sample(i));
            targets[row * classes + self.labels[i] as usize] = 1.0;
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(sample_shape);
        Ok((
            Tensor::new(shape, data)?,
            Tensor::new(vec![indices.len(), classes], targets)?,
        ))
    }
}

pub fn batch_plan(n: usize, batch_size: usize, shuffle_seed: Option<u64>) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut rng::stream(seed, rng::STREAM_SHUFFLE));
    }
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn check_magic(path: &Path, bytes: &[u8], header: usize, magic: u32) -> Result<()> {
    if bytes.len() < header {
        return Err(Error::Truncated {
            path: path.into(),
            expected: header,
            found: bytes.len(),
        });
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(Error::Format {
            path: path.into(),
            expected: format!("magic {magic:#010x}"),
            found: format!("{found:#010x}"),
        });
    }
    Ok(())
}

fn check_len(path: &Path, bytes: &[u8], expected: usize) -> Result<()> {
    match bytes.len() {
        n if n < expected => Err(Error::Truncated {
            path: path.into(),
            expected,
            found: n,
        }),
        n if n > expected => Err(Error::Format {
            path: path.into(),
            expected: format!("{expected} bytes"),
            found: format!("{n} bytes (trailing data)"),
        }),
        _ => Ok(()),
    }
}

/// Parses a big-endian IDX image file (magic `0x00000803`, count, rows,
/// cols, pixels) and the matching label file (magic `0x00000801`, count,
/// labels).
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = read(images_path)?;
    check_magic(images_path, &img, 16, IDX_IMAGE_MAGIC)?;
    let (n, rows, cols) = (
        be_u32(&img, 4) as usize,
        be_u32(&img, 8) as usize,
        be_u32(&img, 12) as usize,
    );
    if n == 0 || rows == 0 || cols == 0 {
        return Err(Error::Format {
            path: images_path.into(),
            expected: "positive dimensions".into(),
            found: format!("{n}x{rows}x{cols}"),
        });
    }
    check_len(images_path, &img, 16 + n * rows * cols)?;

    let lab = read(labels_path)?;
    check_magic(labels_path, &lab, 8, IDX_LABEL_MAGIC)?;
    let n_labels = be_u32(&lab, 4) as usize;
    check_len(labels_path, &lab, 8 + n_labels)?;
    if n_labels != n {
        return Err(Error::Format {
            path: labels_path.into(),
            expected: format!("{n} labels to match the image file"),
            found: n_labels.to_string(),
        });
    }

    let pixels = img[16..].iter().map(|&b| f64::from(b)).collect();
    let images = Tensor::new(vec![n, 1, rows, cols], pixels)?;
    Dataset::new("mnist", images, lab[8..].to_vec(), false)
}

/// Concatenates CIFAR-10 binary batch files (3073-byte records).
pub fn load_cifar10<P: AsRef<Path>>(batch_files: &[P]) -> Result<Dataset> {
    if batch_files.is_empty() {
        return Err(Error::Config("no CIFAR-10 batch files given".into()));
    }
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in batch_files {
        let path = path.as_ref();
        let bytes = read(path)?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD_LEN != 0 {
            return Err(Error::Format {
                path: path.into(),
                expected: format!("a positive multiple of {CIFAR_RECORD_LEN} bytes"),
                found: format!("{} bytes", bytes.len()),
            });
        }
        for record in bytes.chunks(CIFAR_RECORD_LEN) {
            labels.push(record[0]);
            pixels.extend(record[1..].iter().map(|&b| f64::from(b)));
        }
    }
    let images = Tensor::new(
        vec![labels.len(), CIFAR_CHANNELS, CIFAR_SIDE, CIFAR_SIDE],
        pixels,
    )?;
    Dataset::new("cifar10", images, labels, false)
}

/// Environment variable naming the directory that holds `mnist/` and
/// `cifar-10-batches-bin/`.
pub const DATA_DIR_ENV: &str = "LAYERWISE_DATA_DIR";

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

pub const CIFAR_TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const CIFAR_TEST_FILE: &str = "test_batch.bin";

pub fn mnist_dir(data_dir: &Path) -> PathBuf {
    data_dir.join("mnist")
}

pub fn cifar_dir(data_dir: &Path) -> PathBuf {
    data_dir.join("cifar-10-batches-bin")
}

pub fn mnist_available(data_dir: &Path) -> bool {
    MNIST_FILES.iter().all(|f| mnist_dir(data_dir).join(f).is_file())
}

pub fn cifar_available(data_dir: &Path) -> bool {
    let dir = cifar_dir(data_dir);
    CIFAR_TRAIN_FILES.iter().chain([&CIFAR_TEST_FILE]).all(|f| dir.join(f).is_file())
}

/// The official `(train, test)` MNIST splits from `<data_dir>/mnist/`.
pub fn load_mnist_dir(data_dir: &Path) -> Result<(Dataset, Dataset)> {
    let dir = mnist_dir(data_dir);
    let [ti, tl, ei, el] = MNIST_FILES.map(|f| dir.join(f));
    Ok((load_mnist_idx(&ti, &tl)?, load_mnist_idx(&ei, &el)?))
}

/// The official `(train, test)` CIFAR-10 splits from
/// `<data_dir>/cifar-10-batches-bin/`.
pub fn load_cifar10_dir(data_dir: &Path) -> Result<(Dataset, Dataset)> {
    let dir = cifar_dir(data_dir);
    let train: Vec<PathBuf> = CIFAR_TRAIN_FILES.iter().map(|f| dir.join(f)).collect();
    Ok((load_cifar10(&train)?, load_cifar10(&[dir.join(CIFAR_TEST_FILE)])?))
}
