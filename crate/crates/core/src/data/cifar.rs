//! CIFAR-10 binary batches: 3073-byte records, one label byte followed by
//! the red, green and blue 32x32 planes, each row-major.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const SIDE: usize = 32;
pub const PIXELS: usize = 3 * SIDE * SIDE;
pub const RECORD_BYTES: usize = 1 + PIXELS;
pub const NUM_CLASSES: usize = 10;

pub const TRAIN_FILES: [&str; 5] = ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
pub const TEST_FILE: &str = "test_batch.bin";

/// Per-channel standardization applied after scaling bytes to [0, 1].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Standardize {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Standardize {
    fn default() -> Self {
        Standardize { mean: [0.4914, 0.4822, 0.4465], std: [0.2470, 0.2435, 0.2616] }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CifarRecord {
    pub label: u8,
    /// Channel planes, `PIXELS` bytes.
    pub pixels: Vec<u8>,
}

/// Image `[3, 32, 32]` with its class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassSample<T> {
    pub image: Tensor<T>,
    pub label: usize,
}

pub fn parse_records(bytes: &[u8], source: &str) -> Result<Vec<CifarRecord>> {
    if bytes.len() % RECORD_BYTES != 0 {
        let complete = bytes.len() / RECORD_BYTES;
        return Err(Error::Format(format!(
            "{source}: length {} is not a multiple of {RECORD_BYTES}; record {complete} starting at byte offset {} is truncated (expected {} bytes, found {})",
            bytes.len(),
            complete * RECORD_BYTES,
            (complete + 1) * RECORD_BYTES,
            bytes.len()
        )));
    }
    bytes
        .chunks_exact(RECORD_BYTES)
        .enumerate()
        .map(|(i, rec)| {
            if rec[0] as usize >= NUM_CLASSES {
                return Err(Error::Format(format!(
                    "{source}: label {} at byte offset {} outside [0, {NUM_CLASSES})",
                    rec[0],
                    i * RECORD_BYTES
                )));
            }
            Ok(CifarRecord { label: rec[0], pixels: rec[1..].to_vec() })
        })
        .collect()
}

pub fn encode_records(records: &[CifarRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(records.len() * RECORD_BYTES);
    for (i, r) in records.iter().enumerate() {
        if r.pixels.len() != PIXELS || r.label as usize >= NUM_CLASSES {
            return Err(Error::Format(format!("record {i}: label {} with {} pixel bytes", r.label, r.pixels.len())));
        }
        out.push(r.label);
        out.extend_from_slice(&r.pixels);
    }
    Ok(out)
}

pub fn read_records(path: &Path) -> Result<Vec<CifarRecord>> {
    let bytes = std::fs::read(path)?;
    parse_records(&bytes, &path.display().to_string())
}

pub fn write_records(path: &Path, records: &[CifarRecord]) -> Result<()> {
    std::fs::write(path, encode_records(records)?)?;
    Ok(())
}

impl CifarRecord {
    pub fn to_sample<T: Real>(&self, norm: &Standardize) -> ClassSample<T> {
        let plane = SIDE * SIDE;
        let image = Tensor::from_fn(&[3, SIDE, SIDE], |i| {
            let c = i / plane;
            T::lit((self.pixels[i] as f64 / 255.0 - norm.mean[c]) / norm.std[c])
        });
        ClassSample { image, label: self.label as usize }
    }
}

/// Train and test records from a directory holding the standard batch files.
pub fn ingest_cifar10(dir: &Path) -> Result<(Vec<CifarRecord>, Vec<CifarRecord>)> {
    let mut train = Vec::new();
    for f in TRAIN_FILES {
        train.extend(read_records(&dir.join(f))?);
    }
    let test = read_records(&dir.join(TEST_FILE))?;
    Ok((train, test))
}
