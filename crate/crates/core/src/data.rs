//! MNIST (IDX) and CIFAR-10 (binary) loaders, batching, and pad-and-crop
//! augmentation.
//!
//! Pixels are scaled to `[0, 1]` by dividing the raw byte by 255; no other
//! normalization is applied. Gzip-compressed files are detected by their
//! magic bytes and decompressed transparently.

use std::fmt;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

pub const CIFAR_RECORD_LEN: usize = 1 + 3 * 32 * 32;
pub const CIFAR_RECORDS_PER_FILE: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}` (expected train or test)"))),
        }
    }
}

/// Images as an `N x C x H x W` tensor in `[0, 1]` plus class labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of one image.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let d = self.images.dims();
        (d[1], d[2], d[3])
    }

    /// Per-class counts over `classes` classes.
    pub fn label_histogram(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for &l in &self.labels {
            if l < classes {
                counts[l] += 1;
            }
        }
        counts
    }

    /// First `limit` samples (all of them when `limit` is 0 or too large).
    pub fn truncated(self, limit: usize) -> Result<Self> {
        if limit == 0 || limit >= self.len() {
            return Ok(self);
        }
        let (c, h, w) = self.image_dims();
        let mut data = self.images.into_vec();
        data.truncate(limit * c * h * w);
        Ok(Dataset {
            images: Tensor::from_vec(&[limit, c, h, w], data)?,
            labels: self.labels[..limit].to_vec(),
            split: self.split,
        })
    }

    fn gather(&self, indices: &[usize]) -> Batch {
        let (c, h, w) = self.image_dims();
        let per = c * h * w;
        let src = self.images.as_slice();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&src[i * per..(i + 1) * per]);
        }
        Batch {
            images: Tensor::from_vec(&[indices.len(), c, h, w], data).expect("batch dims"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

/// Reads a file, gunzipping it when it starts with the gzip magic.
pub fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::format(path, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Parses an IDX image file: `(count, rows, cols, pixel bytes)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0).ok_or_else(|| Error::format(path, "truncated IDX header"))?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(
            path,
            format!("bad IDX image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        ));
    }
    let (Some(n), Some(rows), Some(cols)) = (be_u32(bytes, 4), be_u32(bytes, 8), be_u32(bytes, 12))
    else {
        return Err(Error::format(path, "truncated IDX header"));
    };
    let (n, rows, cols) = (n as usize, rows as usize, cols as usize);
    let expected = 16 + n * rows * cols;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("expected {expected} bytes for {n} images of {rows}x{cols}, found {}", bytes.len()),
        ));
    }
    Ok((n, rows, cols, bytes[16..].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0).ok_or_else(|| Error::format(path, "truncated IDX header"))?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(
            path,
            format!("bad IDX label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        ));
    }
    let n = be_u32(bytes, 4).ok_or_else(|| Error::format(path, "truncated IDX header"))? as usize;
    if bytes.len() != 8 + n {
        return Err(Error::format(
            path,
            format!("expected {} bytes for {n} labels, found {}", 8 + n, bytes.len()),
        ));
    }
    Ok(bytes[8..].to_vec())
}

fn scale(bytes: &[u8]) -> Vec<f32> {
    bytes.iter().map(|&b| f32::from(b) / 255.0).collect()
}

/// Loads an IDX image/label file pair.
pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(&read_maybe_gz(images)?, images)?;
    let label_bytes = parse_idx_labels(&read_maybe_gz(labels)?, labels)?;
    if label_bytes.len() != n {
        return Err(Error::format(
            labels,
            format!("{} labels for {n} images in {}", label_bytes.len(), images.display()),
        ));
    }
    Ok(Dataset {
        images: Tensor::from_vec(&[n, 1, rows, cols], scale(&pixels))?,
        labels: label_bytes.into_iter().map(usize::from).collect(),
        split,
    })
}

fn find_file(dir: &Path, stems: &[&str]) -> Result<PathBuf> {
    for stem in stems {
        for candidate in [dir.join(stem), dir.join(format!("{stem}.gz"))] {
            if candidate.is_file() {
                return Ok(candidate);
            }
        }
    }
    Err(Error::io(
        dir.join(stems[0]),
        std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file not found"),
    ))
}

/// Loads one MNIST split from a directory holding the standard IDX files.
pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let images = find_file(
        dir,
        &[&format!("{prefix}-images-idx3-ubyte"), &format!("{prefix}-images.idx3-ubyte")],
    )?;
    let labels = find_file(
        dir,
        &[&format!("{prefix}-labels-idx1-ubyte"), &format!("{prefix}-labels.idx1-ubyte")],
    )?;
    load_idx(&images, &labels, split)
}

pub fn write_idx_images(path: &Path, rows: usize, cols: usize, pixels: &[u8]) -> Result<()> {
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parses CIFAR-10 records (label byte then R, G, B planes of 32x32).
pub fn parse_cifar_records(bytes: &[u8], path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    if bytes.len() % CIFAR_RECORD_LEN != 0 {
        return Err(Error::format(
            path,
            format!("length {} is not a multiple of {CIFAR_RECORD_LEN}", bytes.len()),
        ));
    }
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD_LEN);
    let mut pixels = Vec::with_capacity(bytes.len());
    for record in bytes.chunks_exact(CIFAR_RECORD_LEN) {
        if record[0] >= 10 {
            return Err(Error::format(path, format!("label {} out of range", record[0])));
        }
        labels.push(record[0]);
        pixels.extend_from_slice(&record[1..]);
    }
    Ok((labels, pixels))
}

/// Reads one CIFAR-10 batch file, which must hold exactly 10000 records.
pub fn read_cifar_batch(path: &Path) -> Result<(Vec<u8>, Vec<u8>)> {
    let bytes = read_maybe_gz(path)?;
    let expected = CIFAR_RECORDS_PER_FILE * CIFAR_RECORD_LEN;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("expected {expected} bytes (10000 records), found {}", bytes.len()),
        ));
    }
    parse_cifar_records(&bytes, path)
}

pub fn write_cifar_batch(path: &Path, labels: &[u8], pixels: &[u8]) -> Result<()> {
    let per = CIFAR_RECORD_LEN - 1;
    let mut out = Vec::with_capacity(labels.len() * CIFAR_RECORD_LEN);
    for (&label, image) in labels.iter().zip(pixels.chunks_exact(per)) {
        out.push(label);
        out.extend_from_slice(image);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads one CIFAR-10 split from the directory of `data_batch_{1..5}.bin`
/// and `test_batch.bin` (or its `cifar-10-batches-bin` subdirectory).
pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let nested = dir.join("cifar-10-batches-bin");
    let dir = if nested.is_dir() { nested.as_path() } else { dir };
    let files: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".to_string()],
    };
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for name in &files {
        let path = find_file(dir, &[name])?;
        let (l, p) = read_cifar_batch(&path)?;
        labels.extend(l);
        pixels.extend(p);
    }
    let n = labels.len();
    Ok(Dataset {
        images: Tensor::from_vec(&[n, 3, 32, 32], scale(&pixels))?,
        labels: labels.into_iter().map(usize::from).collect(),
        split,
    })
}

/// Zero-pads every image by `pad` on each side and crops a uniformly random
/// window of the original size.
pub fn augment_pad_crop<R: Rng + ?Sized>(batch: &Batch, pad: usize, rng: &mut R) -> Batch {
    if pad == 0 {
        return batch.clone();
    }
    let d = batch.images.dims();
    let (n, c, h, w) = (d[0], d[1], d[2], d[3]);
    let src = batch.images.as_slice();
    let mut out = vec![0.0f32; src.len()];
    for b in 0..n {
        // Offsets into the padded image, in [0, 2 * pad].
        let dy = rng.gen_range(0..=2 * pad) as isize - pad as isize;
        let dx = rng.gen_range(0..=2 * pad) as isize - pad as isize;
        for ch in 0..c {
            let plane = (b * c + ch) * h * w;
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let sx = x as isize + dx;
                    if sx >= 0 && sx < w as isize {
                        out[plane + y * w + x] = src[plane + sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    Batch {
        images: Tensor::from_vec(d, out).expect("same dims"),
        labels: batch.labels.clone(),
    }
}

/// One epoch of mini-batches over a dataset.
pub struct BatchIter<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    next: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.next >= self.order.len() {
            return None;
        }
        let end = (self.next + self.batch_size).min(self.order.len());
        let batch = self.dataset.gather(&self.order[self.next..end]);
        self.next = end;
        Some(batch)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.next).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for BatchIter<'_> {}

pub fn batch_iter<'a, R: Rng + ?Sized>(
    dataset: &'a Dataset,
    batch_size: usize,
    shuffle: bool,
    rng: &mut R,
) -> Result<BatchIter<'a>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if shuffle {
        order.shuffle(rng);
    }
    Ok(BatchIter {
        dataset,
        order,
        batch_size,
        next: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(n: usize) -> Dataset {
        let data: Vec<f32> = (0..n * 4).map(|i| i as f32).collect();
        Dataset {
            images: Tensor::from_vec(&[n, 1, 2, 2], data).unwrap(),
            labels: (0..n).collect(),
            split: Split::Train,
        }
    }

    #[test]
    fn idx_magic_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img");
        write_idx_images(&path, 2, 2, &[0, 1, 2, 3]).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        assert!(parse_idx_images(&bytes, &path).is_ok());
        let mut bad = bytes.clone();
        bad[3] = 0x04;
        let err = parse_idx_images(&bad, &path).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
        assert!(parse_idx_images(&bytes[..18], &path).is_err());
    }

    #[test]
    fn idx_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = (dir.path().join("i"), dir.path().join("l"));
        write_idx_images(&img, 1, 1, &[1, 2, 3]).unwrap();
        write_idx_labels(&lab, &[1, 2]).unwrap();
        let err = load_idx(&img, &lab, Split::Train).unwrap_err().to_string();
        assert!(err.contains("2 labels for 3 images"), "{err}");
    }

    #[test]
    fn gzip_is_transparent() {
        use flate2::{write::GzEncoder, Compression};
        use std::io::Write;
        let dir = tempfile::tempdir().unwrap();
        let plain = dir.path().join("l");
        write_idx_labels(&plain, &[3, 1, 4]).unwrap();
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&fs::read(&plain).unwrap()).unwrap();
        let gz = dir.path().join("l.gz");
        fs::write(&gz, enc.finish().unwrap()).unwrap();
        assert_eq!(parse_idx_labels(&read_maybe_gz(&gz).unwrap(), &gz).unwrap(), vec![3, 1, 4]);
    }

    #[test]
    fn cifar_length_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.bin");
        write_cifar_batch(&path, &[7, 2], &vec![255; 2 * 3072]).unwrap();
        assert!(read_cifar_batch(&path).is_err());
        let (labels, pixels) = parse_cifar_records(&fs::read(&path).unwrap(), &path).unwrap();
        assert_eq!(labels, vec![7, 2]);
        assert_eq!(pixels.len(), 2 * 3072);
        assert!(parse_cifar_records(&[0; 100], &path).is_err());
    }

    #[test]
    fn batches_cover_everything() {
        let ds = tiny(10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sizes: Vec<usize> = batch_iter(&ds, 3, false, &mut rng).unwrap().map(|b| b.labels.len()).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        let ordered: Vec<usize> = batch_iter(&ds, 3, false, &mut rng).unwrap().flat_map(|b| b.labels).collect();
        assert_eq!(ordered, (0..10).collect::<Vec<_>>());
        let shuffled = |seed| -> Vec<usize> {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            batch_iter(&ds, 4, true, &mut rng).unwrap().flat_map(|b| b.labels).collect()
        };
        let a = shuffled(5);
        assert_eq!(a, shuffled(5));
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert!(batch_iter(&ds, 0, false, &mut rng).is_err());
    }

    #[test]
    fn batch_images_follow_labels() {
        let ds = tiny(5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for batch in batch_iter(&ds, 2, true, &mut rng).unwrap() {
            for (i, &l) in batch.labels.iter().enumerate() {
                assert_eq!(batch.images.as_slice()[i * 4], (l * 4) as f32);
            }
        }
    }

    #[test]
    fn pad_crop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..2 * 3 * 32 * 32).map(|i| (i % 251) as f32 / 251.0 + 0.01).collect();
        let batch = Batch {
            images: Tensor::from_vec(&[2, 3, 32, 32], data).unwrap(),
            labels: vec![4, 9],
        };
        assert_eq!(augment_pad_crop(&batch, 0, &mut rng), batch);
        for _ in 0..20 {
            let out = augment_pad_crop(&batch, 4, &mut rng);
            assert_eq!(out.images.dims(), &[2, 3, 32, 32]);
            assert_eq!(out.labels, batch.labels);
            // Recover the offset from the first image and check it is in range.
            let src = batch.images.as_slice();
            let got = out.images.as_slice();
            let found = (-4isize..=4).flat_map(|dy| (-4isize..=4).map(move |dx| (dy, dx))).any(|(dy, dx)| {
                (0..32).all(|y| {
                    (0..32).all(|x| {
                        let (sy, sx) = (y as isize + dy, x as isize + dx);
                        let expected = if (0..32).contains(&sy) && (0..32).contains(&sx) {
                            src[sy as usize * 32 + sx as usize]
                        } else {
                            0.0
                        };
                        got[y * 32 + x] == expected
                    })
                })
            });
            assert!(found);
        }
        let a = augment_pad_crop(&batch, 4, &mut ChaCha8Rng::seed_from_u64(9));
        let b = augment_pad_crop(&batch, 4, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn truncation_and_histogram() {
        let ds = tiny(10).truncated(4).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.images.dims(), &[4, 1, 2, 2]);
        assert_eq!(ds.label_histogram(5), vec![1, 1, 1, 1, 0]);
    }
}
