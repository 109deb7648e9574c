//! CIFAR-10/100 binary batches.
//!
//! CIFAR-10 records are `label | 3072 pixel bytes`; CIFAR-100 records are
//! `coarse | fine | 3072 pixel bytes`. Pixels are stored planar (all red,
//! then green, then blue) and are converted to interleaved RGB here.

use std::fs;
use std::path::{Path, PathBuf};

use paca_core::data::{Dataset, Split};

use crate::error::{io_err, IoError, Result};

pub const SIDE: usize = 32;
const PLANE: usize = SIDE * SIDE;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    C10,
    C100,
}

impl Variant {
    pub fn classes(self) -> usize {
        match self {
            Variant::C10 => 10,
            Variant::C100 => 100,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + 3 * PLANE
    }

    fn label_bytes(self) -> usize {
        match self {
            Variant::C10 => 1,
            Variant::C100 => 2,
        }
    }

    pub fn files(self, split: Split) -> Vec<&'static str> {
        match (self, split) {
            (Variant::C10, Split::Train) => vec![
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            (Variant::C10, Split::Test) => vec!["test_batch.bin"],
            (Variant::C100, Split::Train) => vec!["train.bin"],
            (Variant::C100, Split::Test) => vec!["test.bin"],
        }
    }
}

/// Appends the records of one batch file; `path` is used in errors.
pub fn decode_records(
    bytes: &[u8],
    variant: Variant,
    path: &Path,
    pixels: &mut Vec<u8>,
    labels: &mut Vec<usize>,
) -> Result<()> {
    let len = variant.record_len();
    let whole = bytes.len() / len * len;
    if whole != bytes.len() {
        return Err(IoError::TruncatedRecord {
            path: path.to_path_buf(),
            offset: whole,
        });
    }
    for (record, rec) in bytes.chunks_exact(len).enumerate() {
        // fine label for CIFAR-100
        let label = rec[variant.label_bytes() - 1] as usize;
        if label >= variant.classes() {
            return Err(IoError::BadLabel {
                path: path.to_path_buf(),
                record,
                label,
                classes: variant.classes(),
            });
        }
        labels.push(label);
        let planes = &rec[variant.label_bytes()..];
        for i in 0..PLANE {
            pixels.extend_from_slice(&[planes[i], planes[PLANE + i], planes[2 * PLANE + i]]);
        }
    }
    Ok(())
}

/// Loads every batch file of `split` from `dir`.
pub fn load(dir: &Path, variant: Variant, split: Split) -> Result<Dataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for name in variant.files(split) {
        let path: PathBuf = dir.join(name);
        if !path.is_file() {
            return Err(IoError::MissingFile(path));
        }
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        decode_records(&bytes, variant, &path, &mut pixels, &mut labels)?;
    }
    Ok(Dataset::new(
        pixels,
        labels,
        variant.classes(),
        (SIDE, SIDE),
        split,
    )?)
}
