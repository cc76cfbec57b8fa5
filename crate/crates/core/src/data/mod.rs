//! Datasets of equally-sized matrices plus the file formats they travel in.

mod idx;
mod pgm;
mod synthetic;
mod t3;

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use idx::{parse_idx_images, parse_idx_labels, read_idx_images, IdxOptions};
pub use pgm::{encode_pgm, write_heatmap_pgm};
pub use synthetic::{generate, preset, replicate_seed, Preset, SyntheticData, SyntheticSpec};
pub use t3::{format_t3, parse_t3, read_t3, write_t3};

/// `N` observations, each an `n × p` matrix, with optional per-observation labels.
///
/// A label of `0` marks an unlabeled observation; `1..=G` name a class.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSet3D {
    obs: Vec<DMatrix<f64>>,
    labels: Option<Vec<usize>>,
}

impl DataSet3D {
    pub fn new(obs: Vec<DMatrix<f64>>) -> Result<Self> {
        let first = obs
            .first()
            .ok_or_else(|| Error::Input("dataset has no observations".into()))?;
        let shape = first.shape();
        if shape.0 == 0 || shape.1 == 0 {
            return Err(Error::Input("observations must be at least 1x1".into()));
        }
        for (i, x) in obs.iter().enumerate() {
            if x.shape() != shape {
                return Err(Error::Dimension(format!(
                    "observation {} is {}x{}, expected {}x{}",
                    i + 1,
                    x.nrows(),
                    x.ncols(),
                    shape.0,
                    shape.1
                )));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Input(format!(
                    "observation {} has non-finite entries",
                    i + 1
                )));
            }
        }
        Ok(Self { obs, labels: None })
    }

    pub fn with_labels(obs: Vec<DMatrix<f64>>, labels: Vec<usize>) -> Result<Self> {
        Self::new(obs)?.set_labels(Some(labels))
    }

    /// Replaces the label vector; `None` drops all labels.
    pub fn set_labels(mut self, labels: Option<Vec<usize>>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.len() != self.obs.len() {
                return Err(Error::Dimension(format!(
                    "{} labels for {} observations",
                    l.len(),
                    self.obs.len()
                )));
            }
        }
        self.labels = labels;
        Ok(self)
    }

    pub fn without_labels(&self) -> Self {
        Self {
            obs: self.obs.clone(),
            labels: None,
        }
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    /// `(n, p)`.
    pub fn dims(&self) -> (usize, usize) {
        self.obs[0].shape()
    }

    pub fn obs(&self) -> &[DMatrix<f64>] {
        &self.obs
    }

    pub fn iter(&self) -> std::slice::Iter<'_, DMatrix<f64>> {
        self.obs.iter()
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    /// Label of observation `i`, `0` when unlabeled.
    pub fn label(&self, i: usize) -> usize {
        self.labels.as_ref().map_or(0, |l| l[i])
    }

    pub fn labeled_count(&self) -> usize {
        self.labels
            .as_ref()
            .map_or(0, |l| l.iter().filter(|&&v| v > 0).count())
    }

    pub fn labeled_fraction(&self) -> f64 {
        self.labeled_count() as f64 / self.len() as f64
    }

    pub fn max_label(&self) -> usize {
        self.labels
            .as_ref()
            .and_then(|l| l.iter().copied().max())
            .unwrap_or(0)
    }

    /// Every observation transposed; labels carried over.
    pub fn transpose(&self) -> Self {
        Self {
            obs: self.obs.iter().map(|x| x.transpose()).collect(),
            labels: self.labels.clone(),
        }
    }

    /// Keeps the observations at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let obs = indices.iter().map(|&i| self.obs[i].clone()).collect();
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Self::new(obs)?.set_labels(labels)
    }
}

/// Reveals `round(fraction·N)` of `truth`, chosen uniformly at random; the rest become `0`.
pub fn mask_labels(truth: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Input(format!(
            "supervision fraction {fraction} is outside [0, 1]"
        )));
    }
    let keep = (fraction * truth.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..truth.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut out = vec![0; truth.len()];
    for &i in &order[..keep] {
        out[i] = truth[i];
    }
    Ok(out)
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}
