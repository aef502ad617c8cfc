//! Datasets: MNIST IDX files and deterministic synthetic generators.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::nn::{Architecture, Model};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const MNIST_CLASSES: usize = 10;

/// IDX parse failures. Every variant carries the byte offset it refers to.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("{file}: truncated at byte offset {offset} ({needed} more bytes needed)")]
    Truncated {
        file: &'static str,
        offset: usize,
        needed: usize,
    },
    #[error("{file}: bad magic 0x{found:08x} at byte offset 0, expected 0x{expected:08x}")]
    BadMagic {
        file: &'static str,
        expected: u32,
        found: u32,
    },
    #[error("{file}: zero extent at byte offset {offset}")]
    ZeroExtent { file: &'static str, offset: usize },
    #[error("{file}: {extra} trailing bytes after declared payload at byte offset {offset}")]
    TrailingBytes {
        file: &'static str,
        offset: usize,
        extra: usize,
    },
    #[error("count mismatch at byte offset 4: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("labels: value {value} at byte offset {offset} is outside [0, {classes})")]
    LabelOutOfRange { offset: usize, value: u8, classes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n x features`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Per-sample shape, e.g. `[1, 28, 28]`.
    pub sample_shape: Vec<usize>,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.images.row_len()
    }

    /// Gathers the given samples into a `batch x features` tensor.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let f = self.features();
        let mut data = Vec::with_capacity(indices.len() * f);
        for &i in indices {
            data.extend_from_slice(self.images.row(i));
        }
        (
            Tensor::from_parts(vec![indices.len(), f], data),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// The first `n` samples.
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        let (images, labels) = self.batch(&idx);
        Dataset {
            images,
            labels,
            num_classes: self.num_classes,
            sample_shape: self.sample_shape.clone(),
            split: self.split,
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    file: &'static str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], IdxError> {
        let available = self.bytes.len() - self.pos;
        if available < n {
            return Err(IdxError::Truncated {
                file: self.file,
                offset: self.bytes.len(),
                needed: n - available,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32_be(&mut self) -> std::result::Result<u32, IdxError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn extent(&mut self) -> std::result::Result<usize, IdxError> {
        let offset = self.pos;
        let v = self.u32_be()? as usize;
        if v == 0 {
            return Err(IdxError::ZeroExtent {
                file: self.file,
                offset,
            });
        }
        Ok(v)
    }

    fn finish(&self) -> std::result::Result<(), IdxError> {
        if self.pos < self.bytes.len() {
            return Err(IdxError::TrailingBytes {
                file: self.file,
                offset: self.pos,
                extra: self.bytes.len() - self.pos,
            });
        }
        Ok(())
    }
}

/// Parses an IDX3 unsigned-byte image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> std::result::Result<(usize, usize, usize, &[u8]), IdxError> {
    let mut r = Reader {
        bytes,
        pos: 0,
        file: "images",
    };
    let magic = r.u32_be()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(IdxError::BadMagic {
            file: "images",
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let n = r.extent()?;
    let rows = r.extent()?;
    let cols = r.extent()?;
    let pixels = r.take(n * rows * cols)?;
    r.finish()?;
    Ok((n, rows, cols, pixels))
}

/// Parses an IDX1 unsigned-byte label file.
pub fn parse_idx_labels(bytes: &[u8]) -> std::result::Result<&[u8], IdxError> {
    let mut r = Reader {
        bytes,
        pos: 0,
        file: "labels",
    };
    let magic = r.u32_be()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(IdxError::BadMagic {
            file: "labels",
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n = r.extent()?;
    let labels = r.take(n)?;
    r.finish()?;
    Ok(labels)
}

/// Builds a dataset from in-memory IDX image and label files.
pub fn dataset_from_idx(images: &[u8], labels: &[u8], split: Split) -> std::result::Result<Dataset, IdxError> {
    let (n, rows, cols, pixels) = parse_idx_images(images)?;
    let raw_labels = parse_idx_labels(labels)?;
    if raw_labels.len() != n {
        return Err(IdxError::CountMismatch {
            images: n,
            labels: raw_labels.len(),
        });
    }
    if let Some(pos) = raw_labels.iter().position(|&y| y as usize >= MNIST_CLASSES) {
        return Err(IdxError::LabelOutOfRange {
            offset: 8 + pos,
            value: raw_labels[pos],
            classes: MNIST_CLASSES,
        });
    }
    let data = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    Ok(Dataset {
        images: Tensor::from_parts(vec![n, rows * cols], data),
        labels: raw_labels.iter().map(|&y| y as usize).collect(),
        num_classes: MNIST_CLASSES,
        sample_shape: vec![1, rows, cols],
        split,
    })
}

/// Loads an IDX image/label file pair. Files whose name starts with `t10k`
/// are tagged as the test split.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let (images, labels) = (images.as_ref(), labels.as_ref());
    let img = std::fs::read(images).map_err(|e| Error::io(images, e))?;
    let lab = std::fs::read(labels).map_err(|e| Error::io(labels, e))?;
    let split = match images.file_name().and_then(|f| f.to_str()) {
        Some(name) if name.starts_with("t10k") => Split::Test,
        _ => Split::Train,
    };
    Ok(dataset_from_idx(&img, &lab, split)?)
}

/// Loads `train-*` and `t10k-*` files from an MNIST directory.
pub fn load_mnist_dir(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let train = load_idx(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte"))?;
    let test = load_idx(dir.join("t10k-images-idx3-ubyte"), dir.join("t10k-labels-idx1-ubyte"))?;
    Ok((train, test))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SynthMode {
    /// One isotropic unit-variance cluster per class; class centers are
    /// `separation` standard deviations apart.
    GaussianClusters { separation: f64 },
    /// Uniform inputs labelled by the argmax of a random frozen network.
    TeacherNet { hidden: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub n: usize,
    pub features: usize,
    pub classes: usize,
    pub mode: SynthMode,
}

/// Deterministic synthetic dataset.
pub fn synth_dataset(seed: u64, spec: SynthSpec) -> Result<Dataset> {
    synth_with_teacher(seed, spec).map(|(d, _)| d)
}

/// As [`synth_dataset`], also returning the teacher network in teacher mode.
pub fn synth_with_teacher(seed: u64, spec: SynthSpec) -> Result<(Dataset, Option<Model>)> {
    let SynthSpec {
        n,
        features,
        classes,
        mode,
    } = spec;
    if n == 0 || features == 0 || classes == 0 {
        return Err(Error::InvalidArgument(
            "synthetic n, features and classes must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match mode {
        SynthMode::GaussianClusters { separation } => {
            let centers = cluster_centers(classes, features, separation, &mut rng);
            let mut x = Vec::with_capacity(n * features);
            let mut labels = Vec::with_capacity(n);
            for s in 0..n {
                let y = s % classes;
                for c in &centers[y] {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    x.push(c + z);
                }
                labels.push(y);
            }
            // One global affine map keeps clusters isotropic inside [0, 1].
            let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let span = if hi > lo { hi - lo } else { 1.0 };
            for v in &mut x {
                *v = (*v - lo) / span;
            }
            Ok((
                Dataset {
                    images: Tensor::from_parts(vec![n, features], x),
                    labels,
                    num_classes: classes,
                    sample_shape: vec![features],
                    split: Split::Train,
                },
                None,
            ))
        }
        SynthMode::TeacherNet { hidden } => {
            let arch = Architecture::parse(&format!(
                "input {features}; dense {features} {hidden}; relu; dense {hidden} {classes}"
            ))?;
            let teacher = Model::new(arch, rng.random())?;
            let x: Vec<f64> = (0..n * features).map(|_| rng.random::<f64>()).collect();
            let images = Tensor::from_parts(vec![n, features], x);
            let logits = teacher.infer(&images)?;
            let labels = (0..n).map(|r| argmax(logits.row(r))).collect();
            Ok((
                Dataset {
                    images,
                    labels,
                    num_classes: classes,
                    sample_shape: vec![features],
                    split: Split::Train,
                },
                Some(teacher),
            ))
        }
    }
}

fn cluster_centers(classes: usize, features: usize, separation: f64, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    if classes <= features {
        // Scaled basis vectors are pairwise `separation` apart.
        let s = separation / std::f64::consts::SQRT_2;
        (0..classes)
            .map(|k| (0..features).map(|d| if d == k { s } else { 0.0 }).collect())
            .collect()
    } else {
        (0..classes)
            .map(|_| {
                (0..features)
                    .map(|_| separation * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                    .collect()
            })
            .collect()
    }
}

pub fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (k, &v)| if v > best.1 { (k, v) } else { best },
        )
        .0
}

/// Fraction of samples whose argmax prediction matches the label.
pub fn accuracy(model: &Model, data: &Dataset) -> Result<f64> {
    let mut correct = 0usize;
    let chunk = 1000;
    let idx: Vec<usize> = (0..data.len()).collect();
    for part in idx.chunks(chunk) {
        let (x, y) = data.batch(part);
        let logits = model.infer(&x)?;
        correct += (0..part.len()).filter(|&r| argmax(logits.row(r)) == y[r]).count();
    }
    Ok(correct as f64 / data.len().max(1) as f64)
}

/// Mean cross-entropy over a whole dataset.
pub fn dataset_loss(model: &Model, data: &Dataset) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    for part in idx.chunks(1000) {
        let (x, y) = data.batch(part);
        total += model.loss(&x, &y)? * part.len() as f64;
    }
    Ok(total / data.len().max(1) as f64)
}
