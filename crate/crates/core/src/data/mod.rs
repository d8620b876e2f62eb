//! Datasets: raw splits, normalization, HR/LR pairs and batching.

mod augment;
pub mod cifar;
mod synthetic;

pub use augment::{augment, crop, hflip};
pub use synthetic::{generate_synthetic, load_synthetic, save_synthetic, SyntheticSpec, SIGNATURES};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::downsample;
use crate::nn::Tensor;
use crate::rng::Rng;

/// Unnormalized images `[N, C, H, W]` with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSplit {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl RawSplit {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.shape().len() != 4 || images.rows() != labels.len() {
            return Err(Error::Dataset(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        Ok(RawSplit { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub train: RawSplit,
    pub val: RawSplit,
    pub test: RawSplit,
    pub num_classes: usize,
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn from_images(images: &Tensor) -> Self {
        let (n, c) = (images.shape()[0], images.shape()[1]);
        let plane: usize = images.shape()[2..].iter().product();
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for i in 0..n {
            let row = images.row_slice(i);
            for ch in 0..c {
                for &v in &row[ch * plane..(ch + 1) * plane] {
                    mean[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let count = (n * plane) as f64;
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= count;
                (s / count - *m * *m).max(0.0).sqrt().max(1e-8)
            })
            .collect();
        NormStats { mean, std }
    }

    pub fn apply(&self, images: &Tensor) -> Tensor {
        let c = images.shape()[1];
        let plane: usize = images.shape()[2..].iter().product();
        let mut out = images.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = i / plane % c;
            *v = (*v - self.mean[ch]) / self.std[ch];
        }
        out
    }
}

/// One sample's normalized HR image, its LR image and label.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub hr: Tensor,
    pub lr: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub hr: Tensor,
    pub lr: Tensor,
    pub labels: Vec<usize>,
}

/// A normalized split with precomputed LR images.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetHandle {
    pub name: String,
    hr: Tensor,
    lr: Tensor,
    labels: Vec<usize>,
    pub norm: NormStats,
    pub ds: usize,
}

impl DatasetHandle {
    pub fn new(name: &str, raw: &RawSplit, norm: &NormStats, ds: usize) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::Dataset(format!("split {name} is empty")));
        }
        let hr = norm.apply(&raw.images);
        let lr_rows = (0..hr.rows())
            .map(|i| downsample(&hr.row(i), ds))
            .collect::<Result<Vec<_>>>()?;
        let lr = Tensor::stack(&lr_rows.iter().collect::<Vec<_>>())?;
        Ok(DatasetHandle {
            name: name.to_string(),
            hr,
            lr,
            labels: raw.labels.clone(),
            norm: norm.clone(),
            ds,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn hr_shape(&self) -> &[usize] {
        &self.hr.shape()[1..]
    }

    pub fn lr_shape(&self) -> &[usize] {
        &self.lr.shape()[1..]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn pair(&self, i: usize) -> ImagePair {
        ImagePair {
            hr: self.hr.row(i),
            lr: self.lr.row(i),
            label: self.labels[i],
        }
    }

    pub fn gather(&self, indices: &[usize]) -> Batch {
        let pick = |t: &Tensor| {
            let mut shape = t.shape().to_vec();
            shape[0] = indices.len();
            let mut data = Vec::with_capacity(indices.len() * t.row_slice(0).len());
            for &i in indices {
                data.extend_from_slice(t.row_slice(i));
            }
            Tensor::new(shape, data).expect("gathered rows match shape")
        };
        Batch {
            hr: pick(&self.hr),
            lr: pick(&self.lr),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Shuffled mini-batches of indices; the last batch may be short.
    pub fn batches(&self, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
    }

    /// In-order mini-batches for evaluation.
    pub fn sequential_batches(&self, batch_size: usize) -> Vec<Vec<usize>> {
        (0..self.len())
            .collect::<Vec<_>>()
            .chunks(batch_size.max(1))
            .map(|c| c.to_vec())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: DatasetHandle,
    pub val: DatasetHandle,
    pub test: DatasetHandle,
    pub num_classes: usize,
    pub ds: usize,
}

impl Dataset {
    /// Normalizes with train-split statistics and builds LR images at ratio `ds`.
    pub fn prepare(raw: &RawDataset, ds: usize) -> Result<Self> {
        let norm = NormStats::from_images(&raw.train.images);
        Ok(Dataset {
            train: DatasetHandle::new("train", &raw.train, &norm, ds)?,
            val: DatasetHandle::new("val", &raw.val, &norm, ds)?,
            test: DatasetHandle::new("test", &raw.test, &norm, ds)?,
            num_classes: raw.num_classes,
            ds,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn small() -> RawDataset {
        generate_synthetic(&SyntheticSpec {
            train: 40,
            val: 10,
            test: 10,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn lr_is_downsampled_hr() {
        let data = Dataset::prepare(&small(), 4).unwrap();
        for i in 0..data.train.len() {
            let p = data.train.pair(i);
            assert_eq!(p.lr, downsample(&p.hr, 4).unwrap());
        }
        assert_eq!(data.train.lr_shape(), &[1, 8, 8]);
    }

    #[test]
    fn train_split_is_standardized() {
        let data = Dataset::prepare(&small(), 4).unwrap();
        let stats = NormStats::from_images(&data.train.gather(&(0..40).collect::<Vec<_>>()).hr);
        assert!(stats.mean[0].abs() < 1e-9);
        assert!((stats.std[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn batches_cover_every_index_once() {
        let data = Dataset::prepare(&small(), 4).unwrap();
        let mut seen: Vec<usize> = data.train.batches(7, &mut stream(1, Stream::Shuffle)).concat();
        seen.sort();
        assert_eq!(seen, (0..40).collect::<Vec<_>>());
        let a = data.train.batches(7, &mut stream(1, Stream::Shuffle));
        assert_eq!(a, data.train.batches(7, &mut stream(1, Stream::Shuffle)));
        assert_eq!(a.len(), 6);
    }

    #[test]
    fn gather_matches_pairs() {
        let data = Dataset::prepare(&small(), 4).unwrap();
        let b = data.val.gather(&[3, 1]);
        assert_eq!(b.hr.row(0), data.val.pair(3).hr);
        assert_eq!(b.lr.row(1), data.val.pair(1).lr);
        assert_eq!(b.labels, vec![data.val.labels()[3], data.val.labels()[1]]);
    }
}
