use std::path::Path;

use nalgebra::DMatrix;

use super::atomic_write;
use crate::error::{Error, Result};

/// Binary PGM (P5), `ncols` wide by `nrows` tall, min-max scaled to 0..=255.
/// A constant matrix maps to mid-gray 128.
pub fn encode_pgm(m: &DMatrix<f64>) -> Result<Vec<u8>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("heatmap matrix has non-finite entries".into()));
    }
    let (lo, hi) = m
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let mut out = format!("P5\n{} {}\n255\n", m.ncols(), m.nrows()).into_bytes();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let px = if hi > lo {
                ((m[(i, j)] - lo) / (hi - lo) * 255.0).round() as u8
            } else {
                128
            };
            out.push(px);
        }
    }
    Ok(out)
}

pub fn write_heatmap_pgm(m: &DMatrix<f64>, path: &Path) -> Result<()> {
    atomic_write(path, &encode_pgm(m)?)
}
