//! Datasets, deterministic batching, manifest I/O and the synthetic glyph
//! benchmark.

mod glyph;
mod manifest;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::GrayImage;
use crate::rng::SeededRng;

pub use glyph::{generate_glyph_benchmark, render_glyph, Corruption, GlyphCounts, GlyphSpec, Style};
pub use manifest::{
    load_benchmark, load_dataset, read_image, write_benchmark, write_dataset, write_image, MANIFEST_NAME,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: cannot decode image: {message}")]
    Decode { path: String, message: String },
    #[error("{path}:{line}: {message}")]
    Manifest { path: String, line: usize, message: String },
    #[error("{path}: label {label} is outside 0..{classes}")]
    LabelOutOfRange { path: String, label: usize, classes: usize },
    #[error("batch size {batch} exceeds dataset size {len}")]
    BatchTooLarge { batch: usize, len: usize },
    #[error("batch size must be positive")]
    EmptyBatch,
    #[error("invalid glyph spec: {0}")]
    Spec(String),
    #[error("dataset has no labels")]
    Unlabeled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Images with optional labels. For target-train data the labels are kept
/// for evaluation only; the training loop reads nothing but the images.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<GrayImage>,
    pub labels: Option<Vec<usize>>,
    pub domain: Domain,
    pub split: Split,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn labels(&self) -> Result<&[usize], DataError> {
        self.labels.as_deref().ok_or(DataError::Unlabeled)
    }

    /// Whether labels may feed a training loss.
    pub fn labels_trainable(&self) -> bool {
        self.domain == Domain::Source && self.split == Split::Train
    }

    pub fn dims(&self) -> Option<(usize, usize)> {
        self.images.first().map(|i| (i.height(), i.width()))
    }
}

/// The four splits of a two-domain experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub source_train: Dataset,
    pub source_test: Dataset,
    pub target_train: Dataset,
    pub target_test: Dataset,
}

impl Benchmark {
    pub fn splits(&self) -> [(&'static str, &Dataset); 4] {
        [
            ("source_train", &self.source_train),
            ("source_test", &self.source_test),
            ("target_train", &self.target_train),
            ("target_test", &self.target_test),
        ]
    }
}

/// Endless stream of index batches over `0..len`. Each epoch is a fresh
/// shuffle keyed by `(seed, epoch)`; the trailing partial batch is dropped.
#[derive(Clone, Debug)]
pub struct BatchIterator {
    len: usize,
    batch: usize,
    rng: SeededRng,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchIterator {
    pub fn new(len: usize, batch: usize, seed: u64) -> Result<Self, DataError> {
        if batch == 0 {
            return Err(DataError::EmptyBatch);
        }
        if batch > len {
            return Err(DataError::BatchTooLarge { batch, len });
        }
        let rng = SeededRng::new(seed);
        let order = Self::shuffled(&rng, len, 0);
        Ok(Self {
            len,
            batch,
            rng,
            epoch: 0,
            order,
            pos: 0,
        })
    }

    fn shuffled(rng: &SeededRng, len: usize, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..len).collect();
        rng.fork(epoch).shuffle(&mut order);
        order
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.len / self.batch
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// The shuffled order used for `epoch`.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        Self::shuffled(&self.rng, self.len, epoch)
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.len {
            self.epoch += 1;
            self.order = Self::shuffled(&self.rng, self.len, self.epoch);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        out
    }
}

impl Iterator for BatchIterator {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        Some(self.next_batch())
    }
}
