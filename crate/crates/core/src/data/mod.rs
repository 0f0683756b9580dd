//! Labeled image datasets: IDX and CIFAR-10 binary loaders, a seeded
//! synthetic generator, per-channel normalization and deterministic batching.

mod formats;
mod synthetic;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

pub use formats::{encode_cifar_record, encode_idx_images, encode_idx_labels, load_cifar_binary, load_idx, CIFAR_RECORD};
pub use synthetic::{make_synthetic, SyntheticSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Per-channel statistics, always taken from a training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    /// N×C×H×W, row-major.
    pub images: Vec<f32>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub split: Split,
    /// Statistics applied to `images`, if any.
    pub normalization: Option<Normalization>,
}

impl LabeledDataset {
    pub fn new(
        images: Vec<f32>,
        (channels, height, width): (usize, usize, usize),
        labels: Vec<usize>,
        class_count: usize,
        split: Split,
    ) -> Result<Self> {
        let per = channels * height * width;
        if per == 0 {
            return Err(Error::Dataset(format!("image dims {channels}×{height}×{width} must be positive")));
        }
        if images.len() != per * labels.len() {
            return Err(Error::CountMismatch {
                images: images.len() / per,
                labels: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Dataset(format!("label {bad} outside [0, {class_count})")));
        }
        Ok(Self {
            images,
            channels,
            height,
            width,
            labels,
            class_count,
            split,
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.image_len();
        &self.images[i * per..(i + 1) * per]
    }

    /// The first `n` samples (all of them if `n` exceeds the length).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        Self {
            images: self.images[..n * self.image_len()].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> Self {
        Self {
            images: Vec::new(),
            channels: self.channels,
            height: self.height,
            width: self.width,
            labels: Vec::new(),
            class_count: self.class_count,
            split: self.split,
            normalization: self.normalization.clone(),
        }
    }

    /// Per-channel mean and standard deviation of this split.
    pub fn channel_stats(&self) -> Normalization {
        let hw = self.height * self.width;
        let mut mean = Vec::with_capacity(self.channels);
        let mut std = Vec::with_capacity(self.channels);
        for c in 0..self.channels {
            let (mut s, mut s2, mut n) = (0.0f64, 0.0f64, 0usize);
            for img in self.images.chunks_exact(self.image_len()) {
                for &v in &img[c * hw..(c + 1) * hw] {
                    s += v as f64;
                    s2 += (v as f64) * (v as f64);
                }
                n += hw;
            }
            let m = if n > 0 { s / n as f64 } else { 0.0 };
            let var = if n > 0 { (s2 / n as f64 - m * m).max(0.0) } else { 0.0 };
            mean.push(m as f32);
            std.push(if var > 1e-12 { var.sqrt() as f32 } else { 1.0 });
        }
        Normalization { mean, std }
    }

    /// Applies `(x - mean) / std` per channel and records the statistics.
    pub fn normalize(&mut self, norm: &Normalization) -> Result<()> {
        if self.normalization.is_some() {
            return Err(Error::Dataset("dataset is already normalized".into()));
        }
        if norm.mean.len() != self.channels || norm.std.len() != self.channels {
            return Err(Error::Dataset(format!(
                "normalization has {} channels, images have {}",
                norm.mean.len(),
                self.channels
            )));
        }
        let hw = self.height * self.width;
        let per = self.image_len();
        for img in self.images.chunks_exact_mut(per) {
            for (c, plane) in img.chunks_exact_mut(hw).enumerate() {
                let (m, s) = (norm.mean[c], norm.std[c]);
                plane.iter_mut().for_each(|v| *v = (*v - m) / s);
            }
        }
        self.normalization = Some(norm.clone());
        Ok(())
    }

    /// Stacks the given samples into an N×C×H×W tensor plus labels.
    pub fn gather(&self, indices: &[usize]) -> Batch {
        let per = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Batch {
            images: Tensor::new(&[indices.len(), self.channels, self.height, self.width], data)
                .expect("gathered data matches its shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            indices: indices.to_vec(),
        }
    }

    /// Sample order for one epoch: identity without a seed, otherwise a
    /// permutation determined by `(seed, epoch)`.
    pub fn order(&self, shuffle_seed: Option<u64>, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        if let Some(seed) = shuffle_seed {
            idx.shuffle(&mut stream_rng(seed, Stream::Shuffle, &[epoch as u64]));
        }
        idx
    }

    /// `⌈N / batch_size⌉` batches covering every sample once; the last may
    /// be short.
    pub fn batches(&self, batch_size: usize, shuffle_seed: Option<u64>, epoch: usize) -> Result<Batches<'_>> {
        if batch_size == 0 {
            return Err(Error::invalid("batches", "batch_size must be at least 1"));
        }
        Ok(Batches {
            ds: self,
            order: self.order(shuffle_seed, epoch),
            batch_size,
            pos: 0,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    /// Dataset indices of the samples, in batch order.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub struct Batches<'a> {
    ds: &'a LabeledDataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let batch = self.ds.gather(&self.order[self.pos..end]);
        self.pos = end;
        Some(batch)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = (self.order.len() - self.pos).div_ceil(self.batch_size);
        (n, Some(n))
    }
}

impl ExactSizeIterator for Batches<'_> {}

/// Mirrors each image of an N×C×H×W batch left-right with probability 1/2.
pub fn random_hflip<R: Rng + ?Sized>(batch: &Tensor<f32>, rng: &mut R) -> Result<()> {
    let (n, c, h, w) = crate::tensor::dims4(batch, "random_hflip")?;
    let mut data = batch.data_mut();
    for img in data.chunks_exact_mut(c * h * w).take(n) {
        if rng.random_bool(0.5) {
            img.chunks_exact_mut(w).for_each(|row| row.reverse());
        }
    }
    Ok(())
}
