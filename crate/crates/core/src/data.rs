//! Labelled image datasets: MNIST (IDX), CIFAR-10 (binary) and seeded
//! Gaussian blobs.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{SeededRng, Tensor};

/// Environment variable naming the dataset root directory.
pub const DATA_ENV: &str = "FAULTLINE_DATA";

pub const MNIST_CLASSES: [&str; 10] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
];

pub const CIFAR10_CLASSES: [&str; 10] = [
    "airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck",
];

const MNIST_MEAN: f32 = 0.1307;
const MNIST_STD: f32 = 0.3081;
const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    name: String,
    images: Tensor,
    labels: Vec<usize>,
    class_names: Vec<String>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, images: Tensor, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        let n = *images
            .shape()
            .first()
            .ok_or_else(|| Error::Dimension("dataset images need a sample axis".into()))?;
        if labels.len() != n {
            return Err(Error::Dimension(format!("{} labels for {n} images", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::Index(format!(
                "label {bad} out of range for {} classes",
                class_names.len()
            )));
        }
        Ok(Self {
            name: name.into(),
            images,
            labels,
            class_names,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    /// Shape of a single sample (without the leading sample axis).
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Images and labels for the given sample indices, in order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.images.gather_outer(indices)?;
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }

    /// The single sample `i` as a batch of one.
    pub fn sample(&self, i: usize) -> Result<(Tensor, usize)> {
        let x = self.images.slice_outer(i, i + 1)?;
        Ok((x, self.labels[i]))
    }

    /// The first `n` samples (or all, if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            name: self.name.clone(),
            images: self.images.slice_outer(0, n).expect("in range"),
            labels: self.labels[..n].to_vec(),
            class_names: self.class_names.clone(),
        }
    }
}

/// `$FAULTLINE_DATA`, if set.
pub fn data_root() -> Option<PathBuf> {
    std::env::var_os(DATA_ENV).map(PathBuf::from)
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format("truncated IDX header".into()))
}

/// Parses an IDX3 image file into `N x 1 x rows x cols`, standardised with
/// the usual MNIST mean and standard deviation.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor> {
    let magic = be_u32(bytes, 0)?;
    if magic != 0x0000_0803 {
        return Err(Error::Format(format!("IDX image magic {magic:#010x}, expected 0x00000803")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(Error::Format(format!(
            "IDX image body has {} bytes, expected {}",
            body.len(),
            n * rows * cols
        )));
    }
    let data = body
        .iter()
        .map(|&p| (p as f32 / 255.0 - MNIST_MEAN) / MNIST_STD)
        .collect();
    Tensor::new(vec![n, 1, rows, cols], data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0)?;
    if magic != 0x0000_0801 {
        return Err(Error::Format(format!("IDX label magic {magic:#010x}, expected 0x00000801")));
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Format(format!("IDX label body has {} bytes, expected {n}", body.len())));
    }
    Ok(body.iter().map(|&b| b as usize).collect())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn first_existing(dir: &Path, names: &[&str]) -> Result<PathBuf> {
    names
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.exists())
        .ok_or_else(|| Error::io(dir.join(names[0]), std::io::ErrorKind::NotFound.into()))
}

/// Loads MNIST from a directory holding the four uncompressed IDX files.
pub fn load_mnist(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let dir = dir.as_ref();
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let images = first_existing(
        dir,
        &[&format!("{prefix}-images-idx3-ubyte"), &format!("{prefix}-images.idx3-ubyte")],
    )?;
    let labels = first_existing(
        dir,
        &[&format!("{prefix}-labels-idx1-ubyte"), &format!("{prefix}-labels.idx1-ubyte")],
    )?;
    let x = parse_idx_images(&read(&images)?)?;
    let y = parse_idx_labels(&read(&labels)?)?;
    Dataset::new(
        format!("mnist-{}", split_name(split)),
        x,
        y,
        MNIST_CLASSES.iter().map(|s| s.to_string()).collect(),
    )
}

const CIFAR_RECORD: usize = 1 + 3072;

/// Parses CIFAR-10 binary records (label byte + 3x32x32 pixels) into
/// `N x 3 x 32 x 32`, standardised per channel.
pub fn parse_cifar10(bytes: &[u8]) -> Result<(Tensor, Vec<usize>)> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format(format!(
            "CIFAR-10 file length {} is not a multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut data = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        if rec[0] > 9 {
            return Err(Error::Format(format!("CIFAR-10 label {} out of range", rec[0])));
        }
        labels.push(rec[0] as usize);
        for (i, &p) in rec[1..].iter().enumerate() {
            let c = i / 1024;
            data.push((p as f32 / 255.0 - CIFAR_MEAN[c]) / CIFAR_STD[c]);
        }
    }
    Ok((Tensor::new(vec![n, 3, 32, 32], data)?, labels))
}

/// Loads CIFAR-10 from the `cifar-10-batches-bin` directory.
pub fn load_cifar10(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let dir = dir.as_ref();
    let files: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".to_string()],
    };
    let mut bytes = Vec::new();
    for f in &files {
        bytes.extend(read(&dir.join(f))?);
    }
    let (x, y) = parse_cifar10(&bytes)?;
    Dataset::new(
        format!("cifar10-{}", split_name(split)),
        x,
        y,
        CIFAR10_CLASSES.iter().map(|s| s.to_string()).collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobConfig {
    pub classes: usize,
    pub samples: usize,
    pub dim: usize,
    pub std: f32,
    pub seed: u64,
}

/// Gaussian clusters in a flat `dim`-dimensional space. Centres are uniform
/// in `[-1, 1]^dim` and shared by both splits; labels cycle through the
/// classes so every split is balanced.
pub fn blobs(cfg: &BlobConfig, split: Split) -> Result<Dataset> {
    if cfg.classes < 2 || cfg.dim == 0 || cfg.samples == 0 {
        return Err(Error::Argument(format!(
            "blobs need classes >= 2, dim >= 1, samples >= 1; got {cfg:?}"
        )));
    }
    let mut centres_rng = SeededRng::new(cfg.seed, 0);
    let centres: Vec<f32> = (0..cfg.classes * cfg.dim)
        .map(|_| centres_rng.uniform(-1.0, 1.0))
        .collect();
    let mut rng = SeededRng::new(cfg.seed, 1 + split as u64);
    let mut data = Vec::with_capacity(cfg.samples * cfg.dim);
    let mut labels = Vec::with_capacity(cfg.samples);
    for i in 0..cfg.samples {
        let label = i % cfg.classes;
        labels.push(label);
        let centre = &centres[label * cfg.dim..(label + 1) * cfg.dim];
        for &c in centre {
            let z: f32 = rng.sample(StandardNormal);
            data.push(c + cfg.std * z);
        }
    }
    Dataset::new(
        format!("blobs-{}", split_name(split)),
        Tensor::new(vec![cfg.samples, cfg.dim], data)?,
        labels,
        (0..cfg.classes).map(|c| format!("blob{c}")).collect(),
    )
}

fn split_name(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Test => "test",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, rows: u32, cols: u32, body: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [0x0803u32, n, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(body);
        b
    }

    #[test]
    fn idx_images_parse() {
        let bytes = idx_images(2, 1, 2, &[0, 255, 128, 0]);
        let t = parse_idx_images(&bytes).unwrap();
        assert_eq!(t.shape(), &[2, 1, 1, 2]);
        assert!((t.data()[1] - (1.0 - MNIST_MEAN) / MNIST_STD).abs() < 1e-6);
    }

    #[test]
    fn idx_bad_magic_and_length() {
        let mut bytes = idx_images(2, 1, 2, &[0, 255, 128, 0]);
        assert!(matches!(parse_idx_images(&bytes[..18]), Err(Error::Format(_))));
        bytes[3] = 0x01;
        assert!(matches!(parse_idx_images(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn idx_labels_parse() {
        let mut b = Vec::new();
        b.extend_from_slice(&0x0801u32.to_be_bytes());
        b.extend_from_slice(&3u32.to_be_bytes());
        b.extend_from_slice(&[7, 0, 9]);
        assert_eq!(parse_idx_labels(&b).unwrap(), vec![7, 0, 9]);
        b[3] = 0x03;
        assert!(parse_idx_labels(&b).is_err());
    }

    #[test]
    fn cifar_records() {
        let mut bytes = vec![3u8];
        bytes.extend(std::iter::repeat_n(255u8, 3072));
        let (x, y) = parse_cifar10(&bytes).unwrap();
        assert_eq!(y, vec![3]);
        assert_eq!(x.shape(), &[1, 3, 32, 32]);
        assert!((x.data()[2048] - (1.0 - CIFAR_MEAN[2]) / CIFAR_STD[2]).abs() < 1e-6);
        assert!(parse_cifar10(&bytes[..100]).is_err());
    }

    #[test]
    fn blobs_are_seeded_and_balanced() {
        let cfg = BlobConfig {
            classes: 3,
            samples: 30,
            dim: 5,
            std: 0.1,
            seed: 4,
        };
        let a = blobs(&cfg, Split::Train).unwrap();
        let b = blobs(&cfg, Split::Train).unwrap();
        assert!(a.images().bits_eq(b.images()));
        let test = blobs(&cfg, Split::Test).unwrap();
        assert!(!a.images().bits_eq(test.images()));
        for c in 0..3 {
            assert_eq!(a.labels().iter().filter(|&&l| l == c).count(), 10);
        }
        assert_eq!(a.sample_shape(), &[5]);
    }

    #[test]
    fn dataset_rejects_bad_labels() {
        let x = Tensor::zeros(&[2, 3]);
        assert!(Dataset::new("x", x.clone(), vec![0], vec!["a".into(), "b".into()]).is_err());
        assert!(Dataset::new("x", x, vec![0, 2], vec!["a".into(), "b".into()]).is_err());
    }
}
