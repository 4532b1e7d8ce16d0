//! Labeled image datasets: IDX files, a synthetic scale-variance generator,
//! normalization and seed-deterministic batching.

mod batch;
mod idx;
mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

pub use batch::{batches, subset, Batch};
pub use idx::{load_idx, read_idx_images, read_idx_labels, write_idx, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use synthetic::{gen_synthetic, rasterize, ShapeKind, SyntheticSpec, SUPERSAMPLE};

/// Per-channel affine normalization `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Channel statistics of an `[N, C, H, W]` tensor. Constant channels get std 1.
    pub fn fit(images: &Tensor<f32>) -> Self {
        let s = images.shape();
        let (n, ch, hw) = (s[0], s[1], s[2] * s[3]);
        let mut mean = vec![0.0; ch];
        let mut std = vec![1.0; ch];
        if n == 0 || hw == 0 {
            return Normalization { mean, std };
        }
        let count = (n * hw) as f64;
        for c in 0..ch {
            let plane = |i: usize| &images.data()[(i * ch + c) * hw..(i * ch + c + 1) * hw];
            let m = (0..n).flat_map(plane).map(|&v| v as f64).sum::<f64>() / count;
            let var = (0..n)
                .flat_map(plane)
                .map(|&v| (v as f64 - m).powi(2))
                .sum::<f64>()
                / count;
            mean[c] = m;
            if var.sqrt() > 1e-8 {
                std[c] = var.sqrt();
            }
        }
        Normalization { mean, std }
    }

    pub fn normalize<T: Float>(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.map(images, |v, m, s| (v - m) / s)
    }

    pub fn denormalize<T: Float>(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.map(images, |v, m, s| v * s + m)
    }

    fn map<T: Float>(&self, images: &Tensor<T>, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor<T>> {
        let s = images.shape();
        if s.len() != 4 || s[1] != self.mean.len() {
            return Err(Error::Dimension(format!(
                "normalization for {} channels applied to {:?}",
                self.mean.len(),
                s
            )));
        }
        let (ch, hw) = (s[1], s[2] * s[3]);
        let mut out = images.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = (i / hw) % ch;
            *v = T::from_f64(f(v.as_f64(), self.mean[c], self.std[c]));
        }
        Ok(out)
    }
}

/// Images in `[0, 1]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, C, H, W]`, not yet normalized.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub normalization: Normalization,
}

impl Dataset {
    /// Checks the dataset invariants and fits the normalization to `images`.
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::Data(format!(
                "images must be [N, C, H, W], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {} classes",
                class_names.len()
            )));
        }
        let normalization = Normalization::fit(&images);
        Ok(Dataset {
            images,
            labels,
            class_names,
            normalization,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// `(C, H, W)` of every sample.
    pub fn sample_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Gathers `indices` into one batch normalized with `norm`.
    pub fn gather<T: Float>(&self, indices: &[usize], norm: &Normalization) -> Result<(Tensor<T>, Vec<usize>)> {
        let (c, h, w) = self.sample_shape();
        let per = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Data(format!("sample {i} out of range for {} samples", self.len())));
            }
            data.extend(self.images.data()[i * per..(i + 1) * per].iter().map(|&v| T::from_f64(v as f64)));
            labels.push(self.labels[i]);
        }
        let raw = Tensor::new(&[indices.len(), c, h, w], data)?;
        Ok((norm.normalize(&raw)?, labels))
    }

    /// Number of samples per class.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.num_classes()];
        for &l in &self.labels {
            hist[l] += 1;
        }
        hist
    }
}
