use std::io::Write;
use std::path::{Path, PathBuf};

use alphapool::data::{
    load_cifar10, load_idx, load_mnist, read_cifar_batch, write_cifar_batch, write_idx_images, write_idx_labels,
    Split,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("ALPHAPOOL_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    dir.join("train-labels-idx1-ubyte").exists().then_some(dir)
}

fn golden_counts(split: &str) -> Vec<usize> {
    let text = include_str!("golden/mnist_label_counts.txt");
    let line = text
        .lines()
        .find(|l| l.starts_with(split))
        .expect("split present in golden file");
    line.split_whitespace().skip(1).map(|v| v.parse().unwrap()).collect()
}

#[test]
fn idx_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pixels: Vec<u8> = (0..7 * 5 * 3).map(|_| rng.gen()).collect();
    let labels: Vec<u8> = (0..7).map(|_| rng.gen_range(0..10)).collect();
    let (img, lab) = (dir.path().join("img"), dir.path().join("lab"));
    write_idx_images(&img, 5, 3, &pixels).unwrap();
    write_idx_labels(&lab, &labels).unwrap();
    let ds = load_idx(&img, &lab, Split::Train).unwrap();
    assert_eq!(ds.images.dims(), &[7, 1, 5, 3]);
    for (v, &b) in ds.images.as_slice().iter().zip(&pixels) {
        assert_eq!(*v, f32::from(b) / 255.0);
    }
    assert_eq!(ds.labels, labels.iter().map(|&l| usize::from(l)).collect::<Vec<_>>());
}

#[test]
fn mnist_names_and_gzip_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    write_idx_images(&dir.path().join("t10k-images.idx3-ubyte"), 2, 2, &[0, 255, 51, 102]).unwrap();
    let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
    gz.write_all(&[0, 0, 8, 1, 0, 0, 0, 1, 4]).unwrap();
    std::fs::write(dir.path().join("t10k-labels-idx1-ubyte.gz"), gz.finish().unwrap()).unwrap();
    let ds = load_mnist(dir.path(), Split::Test).unwrap();
    assert_eq!(ds.labels, vec![4]);
    assert_eq!(ds.images.as_slice(), &[0.0, 1.0, 0.2, 0.4]);
}

#[test]
fn cifar_record_zero() {
    let dir = tempfile::tempdir().unwrap();
    let n = 10_000;
    let mut labels = vec![0u8; n];
    let mut pixels = vec![0u8; n * 3072];
    labels[0] = 7;
    pixels[..3072].fill(255);
    for (i, l) in labels.iter_mut().enumerate().skip(1) {
        *l = (i % 10) as u8;
    }
    let path = dir.path().join("test_batch.bin");
    write_cifar_batch(&path, &labels, &pixels).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len(), 10_000 * 3073);
    let (l, p) = read_cifar_batch(&path).unwrap();
    assert_eq!((l, p), (labels, pixels));

    let ds = load_cifar10(dir.path(), Split::Test).unwrap();
    assert_eq!(ds.len(), n);
    assert_eq!(ds.labels[0], 7);
    assert!(ds.images.as_slice()[..3072].iter().all(|&v| v == 1.0));
    assert!(ds.images.as_slice()[3072..].iter().all(|&v| v == 0.0));
}

#[test]
fn cifar_truncated_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data_batch_1.bin");
    std::fs::write(&path, vec![0u8; 3073 * 3]).unwrap();
    let err = read_cifar_batch(&path).unwrap_err().to_string();
    assert!(err.contains("10000 records"), "{err}");
}

#[test]
fn real_mnist_matches_golden_counts() {
    let Some(dir) = mnist_dir() else {
        eprintln!("MNIST not found; set ALPHAPOOL_DATA_DIR or run scripts/fetch_mnist.sh");
        return;
    };
    for (split, name, n) in [(Split::Train, "train", 60_000), (Split::Test, "test", 10_000)] {
        let ds = load_mnist(&dir, split).unwrap();
        assert_eq!(ds.len(), n);
        assert_eq!(ds.image_dims(), (1, 28, 28));
        let (lo, hi) = ds
            .images
            .as_slice()
            .iter()
            .fold((f32::MAX, f32::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        assert_eq!((lo, hi), (0.0, 1.0));
        assert_eq!(ds.label_histogram(10), golden_counts(name), "{name}");
    }
}
