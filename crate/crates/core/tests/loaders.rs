use std::fs;
use std::path::{Path, PathBuf};

use layerwise_core::data::{self, load_cifar10, load_mnist_idx, CIFAR_RECORD_LEN};
use layerwise_core::Error;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

// Fixture bytes follow closed-form formulas, written by a separate script.
fn idx_pixel(i: usize, y: usize, x: usize) -> f64 {
    ((i * 41 + y * 7 + x * 13) % 256) as f64
}

fn cifar_pixel(k: usize, j: usize) -> f64 {
    ((k * 97 + j * 31) % 256) as f64
}

#[test]
fn idx_fixture_round_trips() {
    let ds = load_mnist_idx(&fixture("tiny-images-idx3-ubyte"), &fixture("tiny-labels-idx1-ubyte")).unwrap();
    assert_eq!(ds.len(), 3);
    assert_eq!(ds.sample_shape(), &[1, 4, 5]);
    assert_eq!(ds.labels(), &[7, 0, 9]);
    assert!(!ds.is_normalized());
    for i in 0..3 {
        let want: Vec<f64> = (0..4).flat_map(|y| (0..5).map(move |x| idx_pixel(i, y, x))).collect();
        assert_eq!(ds.sample(i), want.as_slice());
    }
}

#[test]
fn cifar_fixture_round_trips() {
    let ds = load_cifar10(&[fixture("tiny_cifar_batch.bin")]).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.sample_shape(), &[3, 32, 32]);
    assert_eq!(ds.labels(), &[3, 8]);
    for k in 0..2 {
        let want: Vec<f64> = (0..3072).map(|j| cifar_pixel(k, j)).collect();
        assert_eq!(ds.sample(k), want.as_slice());
    }
    // Channel-major layout: red plane first, then green, then blue.
    assert_eq!(ds.sample(1)[1024], cifar_pixel(1, 1024));

    let twice = load_cifar10(&[fixture("tiny_cifar_batch.bin"), fixture("tiny_cifar_batch.bin")]).unwrap();
    assert_eq!(twice.labels(), &[3, 8, 3, 8]);
}

#[test]
fn normalized_fixture_values() {
    let ds = load_mnist_idx(&fixture("tiny-images-idx3-ubyte"), &fixture("tiny-labels-idx1-ubyte"))
        .unwrap()
        .normalize()
        .unwrap();
    assert_eq!(ds.sample(2)[7], idx_pixel(2, 1, 2) / 255.0);
    assert!(ds.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn corrupt_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let images = fs::read(fixture("tiny-images-idx3-ubyte")).unwrap();
    let labels = fixture("tiny-labels-idx1-ubyte");
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.path().join(name);
        fs::write(&p, bytes).unwrap();
        p
    };

    let mut bad_magic = images.clone();
    bad_magic[3] = 0x01;
    let p = write("magic", &bad_magic);
    assert!(matches!(load_mnist_idx(&p, &labels), Err(Error::Format { .. })));

    let p = write("short", &images[..images.len() - 1]);
    assert!(matches!(load_mnist_idx(&p, &labels), Err(Error::Truncated { .. })));

    let p = write("header", &images[..10]);
    assert!(matches!(load_mnist_idx(&p, &labels), Err(Error::Truncated { .. })));

    let mut long = images.clone();
    long.push(0);
    let p = write("long", &long);
    assert!(matches!(load_mnist_idx(&p, &labels), Err(Error::Format { .. })));

    let good = write("good", &images);
    let p = write("labels2", &[0, 0, 8, 1, 0, 0, 0, 2, 1, 1]);
    assert!(matches!(load_mnist_idx(&good, &p), Err(Error::Format { .. })));
    let p = write("label_range", &[0, 0, 8, 1, 0, 0, 0, 3, 1, 1, 10]);
    assert!(load_mnist_idx(&good, &p).is_err());

    let cifar = fs::read(fixture("tiny_cifar_batch.bin")).unwrap();
    let p = write("cifar_short", &cifar[..CIFAR_RECORD_LEN + 5]);
    assert!(matches!(load_cifar10(&[p]), Err(Error::Format { .. })));
    let p = write("cifar_empty", &[]);
    assert!(matches!(load_cifar10(&[p]), Err(Error::Format { .. })));
    assert!(matches!(load_cifar10(&[dir.path().join("missing")]), Err(Error::Io { .. })));
}

fn data_dir() -> PathBuf {
    std::env::var_os(data::DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

#[test]
fn official_files_have_official_counts() {
    let dir = data_dir();
    if data::mnist_available(&dir) {
        let (train, test) = data::load_mnist_dir(&dir).unwrap();
        assert_eq!((train.len(), test.len()), (60_000, 10_000));
        assert_eq!(train.sample_shape(), &[1, 28, 28]);
    } else {
        eprintln!("MNIST not found under {}; count check skipped", dir.display());
    }
    if data::cifar_available(&dir) {
        let (train, test) = data::load_cifar10_dir(&dir).unwrap();
        assert_eq!((train.len(), test.len()), (50_000, 10_000));
    } else {
        eprintln!("CIFAR-10 not found under {}; count check skipped", dir.display());
    }
}
