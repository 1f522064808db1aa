//! Datasets, the synthetic stand-in for CIFAR-10, the CIFAR-10 binary
//! reader, and per-device shard assignment.

mod cifar;
mod partition;
mod synth;

use std::path::PathBuf;

use crate::nn::{Batch, Tensor};

pub use cifar::{
    encode_record, load_cifar10_binary, load_cifar10_file, parse_record, Normalization, RECORD_LEN,
};
pub use partition::{partition, PartitionPlan, Shard};
pub use synth::{synth_dataset, SynthConfig};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
}

/// Images `[C, H, W]` stored contiguously, one label per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    shape: [usize; 3],
    num_classes: usize,
    pixels: Vec<f32>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        shape: [usize; 3],
        num_classes: usize,
        pixels: Vec<f32>,
        labels: Vec<usize>,
    ) -> Result<Self, DataError> {
        let per = shape.iter().product::<usize>();
        if per == 0 || num_classes == 0 {
            return Err(DataError::Config(
                "dataset shape and class count must be positive".into(),
            ));
        }
        if pixels.len() != per * labels.len() {
            return Err(DataError::Config(format!(
                "{} pixel values for {} samples of {per}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::Config(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            shape,
            num_classes,
            pixels,
            labels,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn pixels(&self, index: usize) -> &[f32] {
        let n = self.sample_len();
        &self.pixels[index * n..(index + 1) * n]
    }

    pub fn label(&self, index: usize) -> usize {
        self.labels[index]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Gathers the given samples, in order, into one batch.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.pixels(i));
        }
        let [c, h, w] = self.shape;
        let inputs = Tensor::new(vec![indices.len(), c, h, w], data).expect("sizes agree");
        Batch {
            inputs,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Consecutive batches of at most `batch_size` over the whole dataset.
    pub fn batches(&self, batch_size: usize) -> Vec<Batch> {
        let all: Vec<usize> = (0..self.len()).collect();
        all.chunks(batch_size.max(1))
            .map(|c| self.batch(c))
            .collect()
    }
}
