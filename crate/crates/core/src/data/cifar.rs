//! CIFAR-10 binary batches: records of one label byte followed by 3072 pixel
//! bytes (R, G and B planes of 32x32, row-major).

use std::fs;
use std::path::Path;

use super::{RawDataset, RawSplit};
use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const IMAGE_BYTES: usize = 3 * 32 * 32;
pub const RECORD_BYTES: usize = IMAGE_BYTES + 1;
pub const NUM_CLASSES: usize = 10;
pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CifarRecord {
    pub label: u8,
    pub pixels: Vec<u8>,
}

impl CifarRecord {
    /// `[3, 32, 32]` with pixel values scaled into `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn(&[3, 32, 32], |i| self.pixels[i] as f64 / 255.0)
    }
}

pub fn parse_batch(bytes: &[u8]) -> Result<Vec<CifarRecord>> {
    if !bytes.len().is_multiple_of(RECORD_BYTES) {
        return Err(Error::Dataset(format!(
            "{} bytes is not a multiple of the {RECORD_BYTES}-byte record size",
            bytes.len()
        )));
    }
    bytes
        .chunks_exact(RECORD_BYTES)
        .enumerate()
        .map(|(i, rec)| {
            if rec[0] as usize >= NUM_CLASSES {
                return Err(Error::Dataset(format!("record {i} has label {}", rec[0])));
            }
            Ok(CifarRecord {
                label: rec[0],
                pixels: rec[1..].to_vec(),
            })
        })
        .collect()
}

pub fn serialize_batch(records: &[CifarRecord]) -> Vec<u8> {
    let mut out = Vec::with_capacity(records.len() * RECORD_BYTES);
    for r in records {
        out.push(r.label);
        out.extend_from_slice(&r.pixels);
    }
    out
}

pub fn read_batch_file(path: &Path) -> Result<Vec<CifarRecord>> {
    let bytes = fs::read(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    parse_batch(&bytes).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))
}

fn to_split(records: &[CifarRecord]) -> Result<RawSplit> {
    let mut data = Vec::with_capacity(records.len() * IMAGE_BYTES);
    for r in records {
        data.extend(r.pixels.iter().map(|&p| p as f64 / 255.0));
    }
    RawSplit::new(
        Tensor::new(vec![records.len(), 3, 32, 32], data)?,
        records.iter().map(|r| r.label as usize).collect(),
    )
}

/// Loads the five training batches and the test batch from `dir`. The last
/// `val_count` training records are held out as the validation split.
pub fn load_cifar10(dir: &Path, val_count: usize) -> Result<RawDataset> {
    let mut train = Vec::new();
    for f in TRAIN_FILES {
        train.extend(read_batch_file(&dir.join(f))?);
    }
    let test = read_batch_file(&dir.join(TEST_FILE))?;
    if val_count == 0 || val_count >= train.len() {
        return Err(Error::Dataset(format!(
            "validation holdout {val_count} must be in 1..{}",
            train.len()
        )));
    }
    let val = train.split_off(train.len() - val_count);
    Ok(RawDataset {
        train: to_split(&train)?,
        val: to_split(&val)?,
        test: to_split(&test)?,
        num_classes: NUM_CLASSES,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake(n: usize) -> Vec<u8> {
        (0..n * RECORD_BYTES)
            .map(|i| if i % RECORD_BYTES == 0 { (i / RECORD_BYTES % 10) as u8 } else { (i * 31 % 256) as u8 })
            .collect()
    }

    #[test]
    fn record_count_from_size() {
        assert_eq!(30_730_000 / RECORD_BYTES, 10_000);
        assert_eq!(parse_batch(&fake(7)).unwrap().len(), 7);
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let bytes = fake(12);
        assert_eq!(serialize_batch(&parse_batch(&bytes).unwrap()), bytes);
    }

    #[test]
    fn bad_size_and_label_rejected() {
        assert!(parse_batch(&fake(2)[..RECORD_BYTES + 5]).is_err());
        let mut bytes = fake(3);
        bytes[RECORD_BYTES] = 10;
        assert!(parse_batch(&bytes).is_err());
    }

    #[test]
    fn pixels_scale_into_unit_interval() {
        let mut bytes = fake(1);
        bytes[1] = 255;
        bytes[2] = 0;
        let t = parse_batch(&bytes).unwrap()[0].to_tensor();
        assert_eq!(t.data()[0], 1.0);
        assert_eq!(t.data()[1], 0.0);
        assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn loads_directory_of_batches() {
        let dir = tempfile::tempdir().unwrap();
        for f in TRAIN_FILES.iter().chain([&TEST_FILE]) {
            fs::write(dir.path().join(f), fake(4)).unwrap();
        }
        let raw = load_cifar10(dir.path(), 5).unwrap();
        assert_eq!((raw.train.len(), raw.val.len(), raw.test.len()), (15, 5, 4));
        assert_eq!(raw.train.images.shape(), &[15, 3, 32, 32]);
        assert!(load_cifar10(&dir.path().join("missing"), 5).is_err());
    }
}
