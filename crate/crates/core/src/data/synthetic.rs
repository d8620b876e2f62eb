//! Planted-patch synthetic task: the label is written into one class-specific
//! patch on top of Gaussian background noise.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{RawDataset, RawSplit};
use crate::error::{Error, Result};
use crate::grid::{PatchGrid, NUM_PATCHES};
use crate::nn::Tensor;
use crate::rng::{stream, Rng, Stream};

/// Zero-mean 2x2 sign patterns (top-left, top-right, bottom-left, bottom-right)
/// over the quadrants of the informative patch, one per class.
pub const SIGNATURES: [[f64; 4]; 6] = [
    [1.0, -1.0, 1.0, -1.0],
    [1.0, 1.0, -1.0, -1.0],
    [1.0, -1.0, -1.0, 1.0],
    [-1.0, 1.0, -1.0, 1.0],
    [-1.0, -1.0, 1.0, 1.0],
    [-1.0, 1.0, 1.0, -1.0],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Patch ID carrying the signature of each class.
    pub informative: Vec<usize>,
    pub amplitude: f64,
    pub noise: f64,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Fraction of training labels replaced by a different random class.
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            channels: 1,
            height: 32,
            width: 32,
            num_classes: 4,
            informative: vec![0, 3, 12, 15],
            amplitude: 1.0,
            noise: 0.1,
            train: 2000,
            val: 500,
            test: 1000,
            label_noise: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.channels == 0 {
            errs.push("synthetic.channels must be >= 1".to_string());
        }
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(8) || !self.width.is_multiple_of(8) {
            errs.push(format!(
                "synthetic image size {}x{} must be a positive multiple of 8",
                self.height, self.width
            ));
        }
        if !(2..=SIGNATURES.len()).contains(&self.num_classes) {
            errs.push(format!(
                "synthetic.num_classes must be in 2..={}, got {}",
                SIGNATURES.len(),
                self.num_classes
            ));
        }
        if self.informative.len() != self.num_classes {
            errs.push(format!(
                "synthetic.informative lists {} patches for {} classes",
                self.informative.len(),
                self.num_classes
            ));
        }
        if let Some(id) = self.informative.iter().find(|&&id| id >= NUM_PATCHES) {
            errs.push(format!("synthetic.informative patch {id} outside 0..{NUM_PATCHES}"));
        }
        if !(self.amplitude.is_finite() && self.amplitude >= 0.0) {
            errs.push(format!("synthetic.amplitude must be >= 0, got {}", self.amplitude));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            errs.push(format!("synthetic.noise must be >= 0, got {}", self.noise));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            errs.push(format!("synthetic.label_noise must be in [0, 1], got {}", self.label_noise));
        }
        for (name, n) in [("train", self.train), ("val", self.val), ("test", self.test)] {
            if n == 0 {
                errs.push(format!("synthetic.{name} must be >= 1"));
            }
        }
        errs
    }
}

fn plant(image: &mut [f64], spec: &SyntheticSpec, grid: &PatchGrid, class: usize) -> Result<()> {
    let (r0, c0) = grid.patch_origin(spec.informative[class])?;
    let (ph, pw) = (grid.patch_height(), grid.patch_width());
    let sig = &SIGNATURES[class];
    let plane = spec.height * spec.width;
    for ch in 0..spec.channels {
        for y in 0..ph {
            for x in 0..pw {
                let q = 2 * (2 * y / ph) + 2 * x / pw;
                image[ch * plane + (r0 + y) * spec.width + c0 + x] += spec.amplitude * sig[q];
            }
        }
    }
    Ok(())
}

fn split(spec: &SyntheticSpec, grid: &PatchGrid, n: usize, rng: &mut Rng) -> Result<RawSplit> {
    let per = spec.channels * spec.height * spec.width;
    let normal = Normal::new(0.0, spec.noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut data = Vec::with_capacity(n * per);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.random_range(0..spec.num_classes);
        let mut image: Vec<f64> = (0..per).map(|_| normal.sample(rng)).collect();
        plant(&mut image, spec, grid, label)?;
        // Stored at f32 precision so a saved dataset reloads bit-identically.
        data.extend(image.into_iter().map(|v| v as f32 as f64));
        labels.push(label);
    }
    RawSplit::new(Tensor::new(vec![n, spec.channels, spec.height, spec.width], data)?, labels)
}

/// Deterministic in `spec.seed`; splits are generated in train, val, test order.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<RawDataset> {
    let errs = spec.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let grid = PatchGrid::new(spec.height, spec.width)?;
    let mut rng = stream(spec.seed, Stream::Data);
    let mut train = split(spec, &grid, spec.train, &mut rng)?;
    let val = split(spec, &grid, spec.val, &mut rng)?;
    let test = split(spec, &grid, spec.test, &mut rng)?;
    if spec.label_noise > 0.0 {
        let mut noise_rng = stream(spec.seed, Stream::LabelNoise);
        for label in &mut train.labels {
            if noise_rng.random::<f64>() < spec.label_noise {
                let shift = noise_rng.random_range(1..spec.num_classes);
                *label = (*label + shift) % spec.num_classes;
            }
        }
    }
    Ok(RawDataset {
        train,
        val,
        test,
        num_classes: spec.num_classes,
    })
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    spec: SyntheticSpec,
    train_labels: Vec<usize>,
    val_labels: Vec<usize>,
    test_labels: Vec<usize>,
}

const HEADER_FILE: &str = "synthetic.json";
const IMAGES_FILE: &str = "images.f32";

/// Writes `synthetic.json` (spec and labels) and `images.f32` (train, val and
/// test images in order, little-endian f32).
pub fn save_synthetic(raw: &RawDataset, spec: &SyntheticSpec, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let header = Header {
        format: "patchdrop-synthetic-v1".to_string(),
        spec: spec.clone(),
        train_labels: raw.train.labels.clone(),
        val_labels: raw.val.labels.clone(),
        test_labels: raw.test.labels.clone(),
    };
    fs::write(dir.join(HEADER_FILE), serde_json::to_string_pretty(&header)?)?;
    let mut bytes = Vec::new();
    for s in [&raw.train, &raw.val, &raw.test] {
        for &v in s.images.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(dir.join(IMAGES_FILE), bytes)?;
    Ok(())
}

pub fn load_synthetic(dir: &Path) -> Result<(RawDataset, SyntheticSpec)> {
    let text = fs::read_to_string(dir.join(HEADER_FILE))
        .map_err(|e| Error::Dataset(format!("{}: {e}", dir.join(HEADER_FILE).display())))?;
    let header: Header = serde_json::from_str(&text)?;
    if header.format != "patchdrop-synthetic-v1" {
        return Err(Error::Dataset(format!("unknown synthetic format {}", header.format)));
    }
    let spec = header.spec;
    let bytes = fs::read(dir.join(IMAGES_FILE))?;
    let per = spec.channels * spec.height * spec.width;
    let counts = [header.train_labels.len(), header.val_labels.len(), header.test_labels.len()];
    let total: usize = counts.iter().sum();
    if bytes.len() != total * per * 4 {
        return Err(Error::Dataset(format!(
            "{} holds {} bytes, expected {}",
            IMAGES_FILE,
            bytes.len(),
            total * per * 4
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let mut offset = 0;
    let mut splits = Vec::new();
    for (n, labels) in counts.iter().zip([header.train_labels, header.val_labels, header.test_labels]) {
        if labels.iter().any(|&l| l >= spec.num_classes) {
            return Err(Error::Dataset("label outside class range".into()));
        }
        let images = Tensor::new(
            vec![*n, spec.channels, spec.height, spec.width],
            values[offset..offset + n * per].to_vec(),
        )?;
        offset += n * per;
        splits.push(RawSplit::new(images, labels)?);
    }
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    let num_classes = spec.num_classes;
    Ok((RawDataset { train, val, test, num_classes }, spec))
}
