//! Image datasets: CIFAR binary files, the synthetic grating set, and the
//! stratified train/val split.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_RECORDS_PER_FILE: usize = 10_000;
pub const SYNTHETIC_SIDE: usize = 16;
pub const SYNTHETIC_CLASSES: usize = 4;
pub const DATA_ROOT_ENV: &str = "ICDARTS_DATA_ROOT";

/// Images stored as `u8` planes in (C, H, W) order, one after another.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub images: Vec<u8>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
}

impl Dataset {
    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            channels: self.channels,
            height: self.height,
            width: self.width,
            n_classes: self.n_classes,
        }
    }

    /// First `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Cifar10,
    Cifar100,
    Synthetic,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cifar10" => Ok(DatasetKind::Cifar10),
            "cifar100" => Ok(DatasetKind::Cifar100),
            "synthetic" => Ok(DatasetKind::Synthetic),
            _ => Err(Error::config(format!("unknown dataset `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// Directory holding the CIFAR `.bin` files; overridden by `ICDARTS_DATA_ROOT`.
    pub root: PathBuf,
    pub seed: u64,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self { kind: DatasetKind::Synthetic, root: PathBuf::from("data"), seed: 7, synthetic_train: 2048, synthetic_test: 512 }
    }
}

impl DatasetSpec {
    pub fn n_classes(&self) -> usize {
        match self.kind {
            DatasetKind::Cifar10 => 10,
            DatasetKind::Cifar100 => 100,
            DatasetKind::Synthetic => SYNTHETIC_CLASSES,
        }
    }

    pub fn resolved_root(&self) -> PathBuf {
        std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| self.root.clone())
    }
}

/// Returns (train, test).
pub fn load_dataset(spec: &DatasetSpec) -> Result<(Dataset, Dataset)> {
    match spec.kind {
        DatasetKind::Synthetic => Ok(synthetic(spec.seed, spec.synthetic_train, spec.synthetic_test)),
        DatasetKind::Cifar10 => {
            let dir = cifar_dir(&spec.resolved_root(), "cifar-10-batches-bin");
            let train = (1..=5)
                .map(|i| read_cifar_file(&dir.join(format!("data_batch_{i}.bin")), CifarFormat::Cifar10))
                .collect::<Result<Vec<_>>>()?;
            let test = read_cifar_file(&dir.join("test_batch.bin"), CifarFormat::Cifar10)?;
            Ok((concat(&train), test))
        }
        DatasetKind::Cifar100 => {
            let dir = cifar_dir(&spec.resolved_root(), "cifar-100-binary");
            let train = read_cifar_file(&dir.join("train.bin"), CifarFormat::Cifar100)?;
            let test = read_cifar_file(&dir.join("test.bin"), CifarFormat::Cifar100)?;
            Ok((train, test))
        }
    }
}

fn cifar_dir(root: &Path, sub: &str) -> PathBuf {
    let nested = root.join(sub);
    if nested.is_dir() {
        nested
    } else {
        root.to_path_buf()
    }
}

fn concat(parts: &[Dataset]) -> Dataset {
    let mut out = parts[0].clone();
    for p in &parts[1..] {
        out.images.extend_from_slice(&p.images);
        out.labels.extend_from_slice(&p.labels);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarFormat {
    /// One label byte per record.
    Cifar10,
    /// Coarse then fine label byte; the fine label is used.
    Cifar100,
}

impl CifarFormat {
    fn label_bytes(self) -> usize {
        match self {
            CifarFormat::Cifar10 => 1,
            CifarFormat::Cifar100 => 2,
        }
    }

    fn n_classes(self) -> usize {
        match self {
            CifarFormat::Cifar10 => 10,
            CifarFormat::Cifar100 => 100,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + CIFAR_PIXELS
    }
}

/// Parses any whole number of records.
pub fn parse_cifar(bytes: &[u8], format: CifarFormat) -> Result<Dataset> {
    let rec = format.record_len();
    if !bytes.len().is_multiple_of(rec) {
        return Err(Error::data(format!("truncated CIFAR data: {} bytes is not a multiple of {rec}", bytes.len())));
    }
    let n = bytes.len() / rec;
    let mut images = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        let label = r[format.label_bytes() - 1] as usize;
        if label >= format.n_classes() {
            return Err(Error::data(format!("record {i}: label {label} out of range")));
        }
        labels.push(label);
        images.extend_from_slice(&r[format.label_bytes()..]);
    }
    Ok(Dataset { images, labels, channels: 3, height: CIFAR_SIDE, width: CIFAR_SIDE, n_classes: format.n_classes() })
}

/// Serializes a 3×32×32 dataset in the binary record layout. CIFAR-100
/// records get a zero coarse label.
pub fn write_cifar(ds: &Dataset, format: CifarFormat) -> Result<Vec<u8>> {
    if ds.image_len() != CIFAR_PIXELS {
        return Err(Error::data("only 3x32x32 datasets fit the CIFAR layout"));
    }
    let mut out = Vec::with_capacity(ds.len() * format.record_len());
    for i in 0..ds.len() {
        if format == CifarFormat::Cifar100 {
            out.push(0);
        }
        out.push(u8::try_from(ds.labels[i]).map_err(|_| Error::data("label does not fit a byte"))?);
        out.extend_from_slice(ds.image(i));
    }
    Ok(out)
}

/// Reads one file that must hold exactly 10000 records (50000 for the
/// CIFAR-100 train file).
pub fn read_cifar_file(path: &Path, format: CifarFormat) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ds = parse_cifar(&bytes, format)?;
    let expected = if format == CifarFormat::Cifar100 && path.file_name().is_some_and(|n| n == "train.bin") {
        5 * CIFAR_RECORDS_PER_FILE
    } else {
        CIFAR_RECORDS_PER_FILE
    };
    if ds.len() != expected {
        return Err(Error::data(format!("{}: {} records, expected {expected}", path.display(), ds.len())));
    }
    Ok(ds)
}

/// Four classes of oriented sinusoidal gratings (horizontal or vertical, low
/// or high frequency) with random phase, tint and Gaussian pixel noise.
/// Every class is closed under horizontal flips and small shifts.
pub fn synthetic(seed: u64, n_train: usize, n_test: usize) -> (Dataset, Dataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = synthetic_split(&mut rng, n_train);
    let test = synthetic_split(&mut rng, n_test);
    (train, test)
}

fn synthetic_split(rng: &mut ChaCha8Rng, n: usize) -> Dataset {
    let s = SYNTHETIC_SIDE;
    let noise = Normal::new(0.0, 40.0).expect("valid std");
    let mut images = Vec::with_capacity(n * 3 * s * s);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % SYNTHETIC_CLASSES;
        let vertical = label >= 2;
        let period = if label.is_multiple_of(2) { 8.0 } else { 4.0 } * rng.random_range(0.9..1.1);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let amp = rng.random_range(40.0..80.0);
        let base = rng.random_range(100.0..156.0);
        let tint: [f64; 3] = [rng.random_range(0.5..1.0), rng.random_range(0.5..1.0), rng.random_range(0.5..1.0)];
        for t in tint {
            for y in 0..s {
                for x in 0..s {
                    let coord = if vertical { x } else { y } as f64;
                    let v = base + amp * t * (std::f64::consts::TAU * coord / period + phase).sin() + noise.sample(rng);
                    images.push(v.round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        labels.push(label);
    }
    Dataset { images, labels, channels: 3, height: s, width: s, n_classes: SYNTHETIC_CLASSES }
}

/// Seeded, class-stratified halves of equal size (an odd trailing sample is
/// dropped).
pub fn split_train_val(ds: &Dataset, seed: u64) -> (Dataset, Dataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = ds.len() - ds.len() % 2;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.n_classes];
    for i in 0..n {
        by_class[ds.labels[i]].push(i);
    }
    let mut a = Vec::with_capacity(n / 2);
    let mut b = Vec::with_capacity(n / 2);
    let mut flip = false;
    for class in &mut by_class {
        class.shuffle(&mut rng);
        for &i in class.iter() {
            if flip {
                b.push(i)
            } else {
                a.push(i)
            }
            flip = !flip;
        }
    }
    a.sort_unstable();
    b.sort_unstable();
    (ds.subset(&a), ds.subset(&b))
}
