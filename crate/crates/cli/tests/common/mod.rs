//! Small learnable datasets written in the official on-disk formats.

#![allow(dead_code)]

use std::fs;
use std::path::Path;

use layerwise_core::data::{cifar_dir, mnist_dir, CIFAR_TEST_FILE, CIFAR_TRAIN_FILES, IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC};
use layerwise_core::rng;
use rand::Rng;

/// 28x28 images whose class sets which 6x6 patch is bright, over noise.
fn mnist_like(n: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut r = rng::stream(seed, 100);
    let mut pixels = Vec::with_capacity(n * 784);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = (i % 10) as u8;
        labels.push(c);
        let (y0, x0) = (4 + 12 * (c as usize / 5), 2 + 5 * (c as usize % 5));
        for y in 0..28 {
            for x in 0..28 {
                let on = (y0..y0 + 6).contains(&y) && (x0..x0 + 5).contains(&x);
                let base: u8 = if on { 180 } else { 0 };
                pixels.push(base.saturating_add(r.random_range(0..70)));
            }
        }
    }
    (pixels, labels)
}

fn idx_files(dir: &Path, prefix: &str, n: usize, seed: u64) {
    let (pixels, labels) = mnist_like(n, seed);
    let mut img = Vec::new();
    for v in [IDX_IMAGE_MAGIC, n as u32, 28, 28] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend_from_slice(&pixels);
    let mut lab = Vec::new();
    for v in [IDX_LABEL_MAGIC, n as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    lab.extend_from_slice(&labels);
    fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), img).unwrap();
    fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), lab).unwrap();
}

/// Writes `<data_dir>/mnist/` with `n_train` and `n_test` samples.
pub fn write_mnist(data_dir: &Path, n_train: usize, n_test: usize, seed: u64) {
    let dir = mnist_dir(data_dir);
    fs::create_dir_all(&dir).unwrap();
    idx_files(&dir, "train", n_train, seed);
    idx_files(&dir, "t10k", n_test, seed + 1);
}

/// 3x32x32 records whose class sets a per-channel colour offset and a
/// bright row band, over noise.
fn cifar_records(n: usize, seed: u64) -> Vec<u8> {
    let mut r = rng::stream(seed, 101);
    let mut out = Vec::with_capacity(n * 3073);
    for i in 0..n {
        let c = i % 10;
        out.push(c as u8);
        for ch in 0..3 {
            let tint = ((c * (ch + 3) * 37) % 120) as u8;
            for y in 0..32 {
                for _x in 0..32 {
                    let band = if y / 3 == c { 90 } else { 0 };
                    out.push(tint.saturating_add(band).saturating_add(r.random_range(0..60)));
                }
            }
        }
    }
    out
}

/// Writes `<data_dir>/cifar-10-batches-bin/` with five training files of
/// `per_file` records and a test file of `n_test` records.
pub fn write_cifar(data_dir: &Path, per_file: usize, n_test: usize, seed: u64) {
    let dir = cifar_dir(data_dir);
    fs::create_dir_all(&dir).unwrap();
    for (k, name) in CIFAR_TRAIN_FILES.iter().enumerate() {
        fs::write(dir.join(name), cifar_records(per_file, seed + k as u64)).unwrap();
    }
    fs::write(dir.join(CIFAR_TEST_FILE), cifar_records(n_test, seed + 99)).unwrap();
}
