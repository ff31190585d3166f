//! Dataset loading: MNIST IDX files and CIFAR-10 binary batches.
//!
//! Both loaders parse the canonical binary formats byte for byte and
//! standardize pixel values with statistics computed on the train split
//! only (global for MNIST, per-channel for CIFAR-10).

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fs::File;
use std::io::Read;
use std::path::Path;

/// Images plus labels, already normalized.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    /// `[N, C, H, W]`.
    pub images: Tensor<T>,
    /// One class id in `0..=9` per image.
    pub labels: Vec<u8>,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Image shape `(C, H, W)`.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// The `i`-th image as a standalone `[C, H, W]` tensor.
    pub fn image(&self, i: usize) -> Tensor<T> {
        let (c, h, w) = self.image_shape();
        let item = c * h * w;
        Tensor::new(vec![c, h, w], self.images.data()[i * item..(i + 1) * item].to_vec())
            .expect("slice length matches")
    }

    /// First `n` examples after a seeded shuffle (desk-scale subsets).
    pub fn subset(&self, n: usize, seed: u64) -> Dataset<T> {
        let n = n.min(self.len());
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0x5e1ec7);
        order.shuffle(&mut rng);
        order.truncate(n);
        self.gather(&order)
    }

    fn gather(&self, indices: &[usize]) -> Dataset<T> {
        let (c, h, w) = self.image_shape();
        let item = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * item);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * item..(i + 1) * item]);
            labels.push(self.labels[i]);
        }
        Dataset {
            images: Tensor::new(vec![indices.len(), c, h, w], data).expect("consistent"),
            labels,
            split: self.split,
        }
    }

    /// Minibatches as `(images, labels)`. With `shuffle` on, the order is a
    /// deterministic permutation of `(seed, epoch)`; the final partial batch
    /// is kept.
    pub fn batches(&self, batch_size: usize, shuffle: Shuffle) -> Batches<'_, T> {
        assert!(batch_size >= 1, "batch size must be >= 1");
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Shuffle::Seeded { seed, epoch } = shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(0x50_000 + epoch);
            order.shuffle(&mut rng);
        }
        Batches { ds: self, order, batch_size, next: 0 }
    }
}

/// Batch ordering policy.
#[derive(Debug, Clone, Copy)]
pub enum Shuffle {
    Off,
    Seeded { seed: u64, epoch: u64 },
}

pub struct Batches<'a, T> {
    ds: &'a Dataset<T>,
    order: Vec<usize>,
    batch_size: usize,
    next: usize,
}

impl<T: Scalar> Iterator for Batches<'_, T> {
    type Item = (Tensor<T>, Vec<u8>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.order.len() {
            return None;
        }
        let end = (self.next + self.batch_size).min(self.order.len());
        let idx = &self.order[self.next..end];
        self.next = end;
        let b = self.ds.gather(idx);
        Some((b.images, b.labels))
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    File::open(path)
        .map_err(|e| Error::Format(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut buf)?;
    Ok(buf)
}

fn read_u32_be(buf: &[u8], at: usize) -> Result<u32> {
    let bytes: [u8; 4] = buf
        .get(at..at + 4)
        .ok_or_else(|| Error::Format("truncated IDX header".into()))?
        .try_into()
        .expect("slice of 4");
    Ok(u32::from_be_bytes(bytes))
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn parse_idx_images<'a>(buf: &'a [u8], path: &Path) -> Result<(usize, usize, usize, &'a [u8])> {
    let magic = read_u32_be(buf, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}",
            path.display()
        )));
    }
    let n = read_u32_be(buf, 4)? as usize;
    let rows = read_u32_be(buf, 8)? as usize;
    let cols = read_u32_be(buf, 12)? as usize;
    let want = 16 + n * rows * cols;
    if buf.len() != want {
        return Err(Error::Format(format!(
            "{}: expected {want} bytes for {n} {rows}x{cols} images, got {}",
            path.display(),
            buf.len()
        )));
    }
    Ok((n, rows, cols, &buf[16..]))
}

fn parse_idx_labels<'a>(buf: &'a [u8], path: &Path) -> Result<&'a [u8]> {
    let magic = read_u32_be(buf, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}",
            path.display()
        )));
    }
    let n = read_u32_be(buf, 4)? as usize;
    if buf.len() != 8 + n {
        return Err(Error::Format(format!(
            "{}: expected {} bytes for {n} labels, got {}",
            path.display(),
            8 + n,
            buf.len()
        )));
    }
    Ok(&buf[8..])
}

/// Loads the four canonical MNIST IDX files from `dir`
/// (`train-images-idx3-ubyte`, `train-labels-idx1-ubyte`, `t10k-...`).
/// Pixels are scaled to `[0, 1]` and standardized by the train split's
/// global mean and standard deviation.
pub fn load_mnist<T: Scalar>(dir: &Path) -> Result<(Dataset<T>, Dataset<T>)> {
    let load_split = |img_name: &str, lbl_name: &str| -> Result<(Vec<f64>, Vec<u8>, usize, usize)> {
        let img_path = dir.join(img_name);
        let lbl_path = dir.join(lbl_name);
        let img_buf = read_file(&img_path)?;
        let lbl_buf = read_file(&lbl_path)?;
        let (n, rows, cols, pixels) = parse_idx_images(&img_buf, &img_path)?;
        let labels = parse_idx_labels(&lbl_buf, &lbl_path)?;
        if labels.len() != n {
            return Err(Error::Format(format!("{n} images but {} labels", labels.len())));
        }
        let scaled: Vec<f64> = pixels.iter().map(|&b| b as f64 / 255.0).collect();
        Ok((scaled, labels.to_vec(), rows, cols))
    };

    let (train_px, train_labels, rows, cols) =
        load_split("train-images-idx3-ubyte", "train-labels-idx1-ubyte")?;
    let (test_px, test_labels, trows, tcols) =
        load_split("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
    if (rows, cols) != (trows, tcols) {
        return Err(Error::Format("train/test image extents differ".into()));
    }

    // train-split statistics standardize both splits
    let n = train_px.len() as f64;
    let mean = train_px.iter().sum::<f64>() / n;
    let var = train_px.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(1e-12);

    let to_dataset = |px: Vec<f64>, labels: Vec<u8>, split: Split| -> Result<Dataset<T>> {
        let count = labels.len();
        let data: Vec<T> = px.iter().map(|&v| T::from_f64((v - mean) / std)).collect();
        Ok(Dataset { images: Tensor::new(vec![count, 1, rows, cols], data)?, labels, split })
    };
    Ok((
        to_dataset(train_px, train_labels, Split::Train)?,
        to_dataset(test_px, test_labels, Split::Test)?,
    ))
}

const CIFAR_RECORD: usize = 3073; // 1 label byte + 3 * 1024 pixel bytes
const CIFAR_TRAIN_FILES: [&str; 5] =
    ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];

fn parse_cifar_file(path: &Path, pixels: &mut Vec<f64>, labels: &mut Vec<u8>) -> Result<()> {
    let buf = read_file(path)?;
    if buf.is_empty() || buf.len() % CIFAR_RECORD != 0 {
        return Err(Error::Format(format!(
            "{}: size {} is not a multiple of the {CIFAR_RECORD}-byte record",
            path.display(),
            buf.len()
        )));
    }
    for record in buf.chunks_exact(CIFAR_RECORD) {
        let label = record[0];
        if label > 9 {
            return Err(Error::Format(format!("{}: label byte {label} > 9", path.display())));
        }
        labels.push(label);
        // R, G, B planes of 32x32 follow the label byte
        pixels.extend(record[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok(())
}

/// Loads the CIFAR-10 binary batches from `dir` (`data_batch_1.bin` ...
/// `data_batch_5.bin` plus `test_batch.bin`). Each 3073-byte record is one
/// label byte followed by 32x32 R, G, B planes. Standardization is
/// per-channel with train-split statistics.
pub fn load_cifar10<T: Scalar>(dir: &Path) -> Result<(Dataset<T>, Dataset<T>)> {
    let mut train_px = Vec::new();
    let mut train_labels = Vec::new();
    for name in CIFAR_TRAIN_FILES {
        parse_cifar_file(&dir.join(name), &mut train_px, &mut train_labels)?;
    }
    let mut test_px = Vec::new();
    let mut test_labels = Vec::new();
    parse_cifar_file(&dir.join("test_batch.bin"), &mut test_px, &mut test_labels)?;

    // per-channel train statistics
    let plane = 32 * 32;
    let mut mean = [0.0f64; 3];
    let mut std = [0.0f64; 3];
    let n_train = train_labels.len();
    for c in 0..3 {
        let mut sum = 0.0;
        for i in 0..n_train {
            sum += train_px[i * 3 * plane + c * plane..i * 3 * plane + (c + 1) * plane]
                .iter()
                .sum::<f64>();
        }
        mean[c] = sum / (n_train * plane) as f64;
        let mut var = 0.0;
        for i in 0..n_train {
            var += train_px[i * 3 * plane + c * plane..i * 3 * plane + (c + 1) * plane]
                .iter()
                .map(|&v| (v - mean[c]) * (v - mean[c]))
                .sum::<f64>();
        }
        std[c] = (var / (n_train * plane) as f64).sqrt().max(1e-12);
    }

    let to_dataset = |px: Vec<f64>, labels: Vec<u8>, split: Split| -> Result<Dataset<T>> {
        let count = labels.len();
        let mut data = Vec::with_capacity(px.len());
        for (i, &v) in px.iter().enumerate() {
            let c = (i % (3 * plane)) / plane;
            data.push(T::from_f64((v - mean[c]) / std[c]));
        }
        Ok(Dataset { images: Tensor::new(vec![count, 3, 32, 32], data)?, labels, split })
    };
    Ok((
        to_dataset(train_px, train_labels, Split::Train)?,
        to_dataset(test_px, test_labels, Split::Test)?,
    ))
}
