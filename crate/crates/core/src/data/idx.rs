//! IDX (MNIST) image and label files.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::DataSet3D;
use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Preprocessing applied to every kept image.
///
/// With `noise` on, `Uniform(0, 1)` noise is added to every pixel (so constant
/// margins get some variability); with `shift_nonzero` on, 50 is added to every
/// originally nonzero pixel.
#[derive(Debug, Clone, Copy)]
pub struct IdxOptions {
    pub noise: bool,
    pub shift_nonzero: bool,
    pub seed: u64,
}

impl Default for IdxOptions {
    fn default() -> Self {
        Self {
            noise: true,
            shift_nonzero: true,
            seed: 0,
        }
    }
}

impl IdxOptions {
    pub fn raw() -> Self {
        Self {
            noise: false,
            shift_nonzero: false,
            seed: 0,
        }
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

/// Returns `(rows, cols, pixels)` with pixels laid out image by image, row-major.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<&[u8]>)> {
    let magic = be_u32(bytes, 0, "images")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "images: bad magic number {magic:#010x}, expected {IMAGES_MAGIC:#010x}"
        )));
    }
    let count = be_u32(bytes, 4, "images")? as usize;
    let rows = be_u32(bytes, 8, "images")? as usize;
    let cols = be_u32(bytes, 12, "images")? as usize;
    let size = rows * cols;
    let body = &bytes[16..];
    if size == 0 || body.len() < count * size {
        return Err(Error::Format(format!(
            "images: expected {count} images of {rows}x{cols}, file holds {} bytes of pixels",
            body.len()
        )));
    }
    Ok((rows, cols, body[..count * size].chunks(size).collect()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    let magic = be_u32(bytes, 0, "labels")?;
    if magic != LABELS_MAGIC {
        return Err(Error::Format(format!(
            "labels: bad magic number {magic:#010x}, expected {LABELS_MAGIC:#010x}"
        )));
    }
    let count = be_u32(bytes, 4, "labels")? as usize;
    bytes
        .get(8..8 + count)
        .ok_or_else(|| Error::Format(format!("labels: expected {count} labels, file truncated")))
}

/// Reads the images whose label is in `keep`; returned labels are the 1-based rank
/// of the digit within `keep` (for `{1, 7}`: digit 1 → 1, digit 7 → 2).
pub fn read_idx_images(
    images_path: &Path,
    labels_path: &Path,
    keep: &BTreeSet<u8>,
    options: IdxOptions,
) -> Result<DataSet3D> {
    let images = fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    idx_to_dataset(&images, &labels, keep, options)
}

pub(crate) fn idx_to_dataset(
    images: &[u8],
    labels: &[u8],
    keep: &BTreeSet<u8>,
    options: IdxOptions,
) -> Result<DataSet3D> {
    if keep.is_empty() {
        return Err(Error::Input("no digit labels selected".into()));
    }
    let (rows, cols, pixels) = parse_idx_images(images)?;
    let digits = parse_idx_labels(labels)?;
    if digits.len() != pixels.len() {
        return Err(Error::Format(format!(
            "{} images but {} labels",
            pixels.len(),
            digits.len()
        )));
    }
    let class_of = |d: u8| keep.iter().position(|&k| k == d).map(|p| p + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut obs = Vec::new();
    let mut classes = Vec::new();
    for (img, &digit) in pixels.iter().zip(digits) {
        let Some(class) = class_of(digit) else {
            continue;
        };
        let mut x = DMatrix::<f64>::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                let raw = img[i * cols + j];
                let mut v = raw as f64;
                if options.noise {
                    v += rng.random::<f64>();
                }
                if options.shift_nonzero && raw != 0 {
                    v += 50.0;
                }
                x[(i, j)] = v;
            }
        }
        obs.push(x);
        classes.push(class);
    }
    if obs.is_empty() {
        return Err(Error::Input(format!("no images carry a label in {keep:?}")));
    }
    DataSet3D::with_labels(obs, classes)
}
