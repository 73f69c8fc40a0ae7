//! Labeled image sets: CIFAR-10 binary batches and synthetic class templates.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use thiserror::Error;

use crate::config::{DataSource, DatasetSpec, SyntheticSpec};
use crate::mixing::resize_bilinear;
use crate::tensor::Tensor;

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const CIFAR_RECORDS_PER_FILE: usize = 10_000;
pub const CIFAR_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: truncated record at byte offset {offset} (file length {len} is not a multiple of {CIFAR_RECORD})")]
    Truncated { path: PathBuf, offset: usize, len: usize },
    #[error("{path}: label {label} at byte offset {offset} is not in 0..10")]
    BadLabel { path: PathBuf, offset: usize, label: u8 },
    #[error("{path}: expected {CIFAR_RECORDS_PER_FILE} records, found {found}")]
    RecordCount { path: PathBuf, found: usize },
    #[error("invalid synthetic spec: {0}")]
    Synthetic(String),
    #[error("labels {labels} vs images {images}")]
    Mismatch { labels: usize, images: usize },
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Images `[N, C, H, W]` with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl LabeledSet {
    pub fn new(images: Tensor, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        let n = images.shape().first().copied().unwrap_or(0);
        if n != labels.len() || images.ndim() != 4 {
            return Err(DataError::Mismatch { labels: labels.len(), images: n });
        }
        Ok(Self { images, labels, n_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Gather rows into a new batch tensor.
    pub fn gather(&self, idx: &[usize]) -> Tensor {
        self.images.select_rows(idx)
    }

    pub fn select(&self, idx: &[usize]) -> LabeledSet {
        LabeledSet {
            images: self.gather(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
        }
    }

    /// First `n` samples; `0` keeps everything.
    pub fn truncate(self, n: usize) -> LabeledSet {
        if n == 0 || n >= self.len() {
            return self;
        }
        self.select(&(0..n).collect::<Vec<_>>())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

/// Parse CIFAR-10 binary records: one label byte then 3072 pixel bytes
/// (R, G, B planes, row-major). Pixels are scaled to `[0, 1]`.
pub fn parse_cifar10(path: &Path, bytes: &[u8]) -> Result<LabeledSet> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            offset: bytes.len() / CIFAR_RECORD * CIFAR_RECORD,
            len: bytes.len(),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(DataError::BadLabel {
                path: path.to_path_buf(),
                offset: r * CIFAR_RECORD,
                label: rec[0],
            });
        }
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    let images = Tensor::new(vec![n, 3, 32, 32], data).expect("record size");
    LabeledSet::new(images, labels, 10)
}

pub fn load_cifar10_file(path: &Path) -> Result<LabeledSet> {
    let bytes = std::fs::read(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    parse_cifar10(path, &bytes)
}

/// Subtract the CIFAR-10 channel means and divide by the channel stds.
pub fn normalize_cifar(set: &mut LabeledSet) {
    let [c, h, w] = set.image_shape();
    let plane = h * w;
    for (k, v) in set.images.data_mut().iter_mut().enumerate() {
        let ch = (k / plane) % c;
        *v = (*v - CIFAR_MEAN[ch]) / CIFAR_STD[ch];
    }
}

fn concat(sets: Vec<LabeledSet>) -> LabeledSet {
    let shape = sets[0].images.shape().to_vec();
    let n: usize = sets.iter().map(LabeledSet::len).sum();
    let mut data = Vec::with_capacity(n * shape[1..].iter().product::<usize>());
    let mut labels = Vec::with_capacity(n);
    for s in sets {
        labels.extend(s.labels);
        data.extend(s.images.into_data());
    }
    let images = Tensor::new(vec![n, shape[1], shape[2], shape[3]], data).expect("shape");
    LabeledSet { images, labels, n_classes: 10 }
}

/// Standard CIFAR-10 directory: `data_batch_1..5.bin` and `test_batch.bin`,
/// 10000 records each.
pub fn load_cifar10(dir: &Path, normalize: bool) -> Result<(LabeledSet, LabeledSet)> {
    let read = |name: &str| -> Result<LabeledSet> {
        let path = dir.join(name);
        let set = load_cifar10_file(&path)?;
        if set.len() != CIFAR_RECORDS_PER_FILE {
            return Err(DataError::RecordCount { path, found: set.len() });
        }
        Ok(set)
    };
    let train = (1..=5).map(|k| read(&format!("data_batch_{k}.bin"))).collect::<Result<Vec<_>>>()?;
    let mut train = concat(train);
    let mut test = read("test_batch.bin")?;
    if normalize {
        normalize_cifar(&mut train);
        normalize_cifar(&mut test);
    }
    Ok((train, test))
}

/// Class templates are smooth random images (bilinear upsampling of a coarse
/// random grid); samples add clipped Gaussian pixel noise. Templates, train
/// noise and test noise come from separate streams of the seed.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(LabeledSet, LabeledSet)> {
    if spec.n_classes < 2 {
        return Err(DataError::Synthetic(format!("need at least 2 classes, got {}", spec.n_classes)));
    }
    if !(spec.sigma >= 0.0) {
        return Err(DataError::Synthetic(format!("sigma must be >= 0, got {}", spec.sigma)));
    }
    if spec.image_size < 4 || spec.channels == 0 {
        return Err(DataError::Synthetic("images must be at least 4×4 with a channel".into()));
    }
    let s = spec.image_size;
    let coarse = (s / 4).max(2);
    let mut trng = ChaCha8Rng::seed_from_u64(spec.seed);
    let unit = Uniform::new(0.0, 1.0).expect("range");
    let templates: Vec<Vec<f64>> = (0..spec.n_classes)
        .map(|_| {
            (0..spec.channels)
                .flat_map(|_| {
                    let grid: Vec<f64> = (0..coarse * coarse).map(|_| unit.sample(&mut trng)).collect();
                    resize_bilinear(&grid, coarse, coarse, s, s)
                })
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, spec.sigma.max(f64::MIN_POSITIVE)).expect("sigma");
    let draw = |per_class: usize, stream: u64| -> LabeledSet {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..per_class {
            for (c, t) in templates.iter().enumerate() {
                labels.push(c);
                data.extend(t.iter().map(|&v| {
                    if spec.sigma == 0.0 {
                        v
                    } else {
                        (v + noise.sample(&mut rng)).clamp(0.0, 1.0)
                    }
                }));
            }
        }
        let n = labels.len();
        let images = Tensor::new(vec![n, spec.channels, s, s], data).expect("shape");
        LabeledSet { images, labels, n_classes: spec.n_classes }
    };
    Ok((draw(spec.train_per_class, 1), draw(spec.test_per_class, 2)))
}

/// Load train and test sets described by `spec`.
pub fn load_dataset(spec: &DatasetSpec) -> Result<(LabeledSet, LabeledSet)> {
    let (train, test) = match &spec.source {
        DataSource::Synthetic(s) => generate_synthetic(s)?,
        DataSource::Cifar10 { dir, normalize } => load_cifar10(dir, *normalize)?,
    };
    Ok((train.truncate(spec.train_subset), test.truncate(spec.test_subset)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(sigma: f64) -> SyntheticSpec {
        SyntheticSpec {
            n_classes: 3,
            train_per_class: 4,
            test_per_class: 2,
            image_size: 8,
            channels: 3,
            sigma,
            seed: 5,
        }
    }

    #[test]
    fn crafted_record_parses() {
        let mut bytes = vec![7u8];
        bytes.extend(std::iter::repeat_n(255u8, 3072));
        bytes.push(2);
        bytes.extend((0..3072).map(|k| (k % 256) as u8));
        let set = parse_cifar10(Path::new("mem"), &bytes).unwrap();
        assert_eq!(set.labels, vec![7, 2]);
        assert!(set.images.row(0).iter().all(|&v| v == 1.0));
        assert_eq!(set.images.row(1)[1], 1.0 / 255.0);
        assert_eq!(set.images.row(1)[1024], 0.0);
    }

    #[test]
    fn truncated_file_reports_offset() {
        let bytes = vec![0u8; CIFAR_RECORD * 2 + 100];
        match parse_cifar10(Path::new("t.bin"), &bytes) {
            Err(DataError::Truncated { offset, .. }) => assert_eq!(offset, 2 * CIFAR_RECORD),
            other => panic!("{other:?}"),
        }
        let mut bad = vec![0u8; CIFAR_RECORD];
        bad[0] = 10;
        assert!(matches!(parse_cifar10(Path::new("b.bin"), &bad), Err(DataError::BadLabel { .. })));
    }

    #[test]
    fn directory_loader_requires_full_batches() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin", "test_batch.bin"] {
            std::fs::write(dir.path().join(name), vec![0u8; CIFAR_RECORD]).unwrap();
        }
        assert!(matches!(load_cifar10(dir.path(), false), Err(DataError::RecordCount { found: 1, .. })));
        assert!(matches!(load_cifar10(&dir.path().join("missing"), false), Err(DataError::Io { .. })));
    }

    #[test]
    fn zero_sigma_samples_equal_templates() {
        let (train, test) = generate_synthetic(&spec(0.0)).unwrap();
        for i in 0..train.len() {
            assert_eq!(train.images.row(i), train.images.row(i % 3));
        }
        assert_eq!(test.images.row(0), train.images.row(0));
    }

    #[test]
    fn synthetic_is_seeded_and_clipped() {
        let a = generate_synthetic(&spec(0.5)).unwrap();
        assert_eq!(a, generate_synthetic(&spec(0.5)).unwrap());
        assert!(a.0.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(a.0.images.row(0), a.1.images.row(0));
        assert_eq!(a.0.class_counts(), vec![4, 4, 4]);
        assert!(generate_synthetic(&spec(-1.0)).is_err());
    }

    #[test]
    fn normalization_uses_channel_statistics() {
        let mut set = LabeledSet::new(Tensor::full(&[1, 3, 2, 2], 0.5), vec![0], 10).unwrap();
        normalize_cifar(&mut set);
        assert!((set.images.data()[0] - (0.5 - CIFAR_MEAN[0]) / CIFAR_STD[0]).abs() < 1e-15);
        assert!((set.images.data()[11] - (0.5 - CIFAR_MEAN[2]) / CIFAR_STD[2]).abs() < 1e-15);
    }
}
