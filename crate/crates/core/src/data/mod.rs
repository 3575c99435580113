//! Labelled image datasets: a synthetic blob generator, IDX and CSV loaders,
//! and stratified splitting.

mod blobs;
mod csv;
mod idx;
mod split;

use thiserror::Error;

use crate::tensor::Tensor;

pub use blobs::{generate_blobs, BlobParams};
pub use csv::{load_csv, parse_csv};
pub use idx::{load_idx, parse_idx};
pub use split::split;

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{file}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { file: &'static str, expected: u32, found: u32 },
    #[error("{file}: truncated at byte {offset}, needed {needed} more bytes")]
    Truncated { file: &'static str, offset: usize, needed: usize },
    #[error("{file}: {extra} trailing bytes after byte {offset}")]
    TrailingBytes { file: &'static str, offset: usize, extra: usize },
    #[error("{file} is empty")]
    Empty { file: &'static str },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("row {row}: {detail}")]
    Row { row: usize, detail: String },
    #[error("sample {index}: label {label} outside 0..{num_classes}")]
    LabelOutOfRange { index: usize, label: usize, num_classes: usize },
    #[error("sample {index}: shape {found:?} differs from {expected:?}")]
    ShapeMismatch { index: usize, expected: Vec<usize>, found: Vec<usize> },
    #[error("class {class} has no samples")]
    MissingClass { class: usize },
    #[error("class {class} has {count} samples, too few for both splits")]
    ClassTooSmall { class: usize, count: usize },
    #[error("invalid parameter: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    /// `channels×H×W`.
    pub input: Tensor,
    pub label: usize,
    pub aux: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<LabeledSample>,
    num_classes: usize,
    num_aux_classes: Option<usize>,
    pub split: SplitTag,
    pub provenance: String,
}

impl Dataset {
    /// Validates labels, auxiliary labels and a common sample shape. The
    /// dataset is tagged as a training split.
    pub fn new(
        samples: Vec<LabeledSample>,
        num_classes: usize,
        num_aux_classes: Option<usize>,
        provenance: impl Into<String>,
    ) -> Result<Self, DataError> {
        if num_classes == 0 {
            return Err(DataError::Invalid("num_classes must be positive".into()));
        }
        let first = samples
            .first()
            .ok_or_else(|| DataError::Invalid("dataset has no samples".into()))?;
        if first.input.rank() != 3 {
            return Err(DataError::Invalid(format!(
                "samples must be channels×H×W, got {:?}",
                first.input.shape()
            )));
        }
        let expected = first.input.shape().to_vec();
        for (index, s) in samples.iter().enumerate() {
            if s.input.shape() != expected {
                return Err(DataError::ShapeMismatch {
                    index,
                    expected,
                    found: s.input.shape().to_vec(),
                });
            }
            if s.label >= num_classes {
                return Err(DataError::LabelOutOfRange { index, label: s.label, num_classes });
            }
            match (s.aux, num_aux_classes) {
                (Some(z), Some(ca)) if z >= ca => {
                    return Err(DataError::LabelOutOfRange { index, label: z, num_classes: ca })
                }
                (Some(_), None) => {
                    return Err(DataError::Invalid(format!(
                        "sample {index} has an auxiliary label but the dataset declares none"
                    )))
                }
                _ => {}
            }
        }
        Ok(Dataset {
            samples,
            num_classes,
            num_aux_classes,
            split: SplitTag::Train,
            provenance: provenance.into(),
        })
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_aux_classes(&self) -> Option<usize> {
        self.num_aux_classes
    }

    /// `(channels, H, W)` shared by every sample.
    pub fn sample_shape(&self) -> (usize, usize, usize) {
        let s = self.samples[0].input.shape();
        (s[0], s[1], s[2])
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// `None` unless every sample carries an auxiliary label.
    pub fn aux_labels(&self) -> Option<Vec<usize>> {
        self.samples.iter().map(|s| s.aux).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Sample indices grouped by class, in dataset order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut by = vec![Vec::new(); self.num_classes];
        for (i, s) in self.samples.iter().enumerate() {
            by[s.label].push(i);
        }
        by
    }

    /// Same grouping keyed by auxiliary label.
    pub fn indices_by_aux(&self) -> Option<Vec<Vec<usize>>> {
        let ca = self.num_aux_classes?;
        let mut by = vec![Vec::new(); ca];
        for (i, s) in self.samples.iter().enumerate() {
            by[s.aux?].push(i);
        }
        Some(by)
    }

    pub fn require_all_classes(&self) -> Result<(), DataError> {
        match self.class_counts().iter().position(|&c| c == 0) {
            Some(class) => Err(DataError::MissingClass { class }),
            None => Ok(()),
        }
    }

    /// Stacks the selected samples into an `N×channels×H×W` batch.
    pub fn stack(&self, indices: &[usize]) -> Tensor {
        let (c, h, w) = self.sample_shape();
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        for &i in indices {
            data.extend_from_slice(self.samples[i].input.data());
        }
        Tensor::from_parts(vec![indices.len(), c, h, w], data)
    }

    pub fn stack_all(&self) -> Tensor {
        self.stack(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            ..self.metadata_only()
        }
    }

    /// Up to `per_class` samples of each class, taken in dataset order and
    /// kept in dataset order.
    pub fn balanced_subset(&self, per_class: usize) -> Dataset {
        let mut keep: Vec<usize> = self
            .indices_by_class()
            .into_iter()
            .flat_map(|idx| idx.into_iter().take(per_class))
            .collect();
        keep.sort_unstable();
        self.subset(&keep)
    }

    pub fn with_split(mut self, tag: SplitTag) -> Self {
        self.split = tag;
        self
    }

    fn metadata_only(&self) -> Dataset {
        Dataset {
            samples: Vec::new(),
            num_classes: self.num_classes,
            num_aux_classes: self.num_aux_classes,
            split: self.split,
            provenance: self.provenance.clone(),
        }
    }
}

fn read_file(path: &std::path::Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(|e| DataError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}
