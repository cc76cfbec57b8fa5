//! Draws observations from the bilinear factor model itself, latent terms and all.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::{mask_labels, DataSet3D};
use crate::error::{Error, Result};
use crate::model::{ComponentParams, MixtureParams};

/// Ground truth plus sample size, seed and an optional supervision fraction.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub params: MixtureParams,
    pub n_obs: usize,
    pub seed: u64,
    pub supervision: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    /// Observations; labels present only where supervision revealed them.
    pub data: DataSet3D,
    /// True 1-based component of every observation.
    pub truth: Vec<usize>,
}

impl SyntheticData {
    /// The observations with every true label attached.
    pub fn labeled(&self) -> DataSet3D {
        self.data
            .clone()
            .set_labels(Some(self.truth.clone()))
            .expect("truth has one label per observation")
    }
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// `M + A·U·Bᵀ + A·E_B + E_A·Bᵀ + E` with `U ~ N(0, I, I)`, `E_B ~ N(0, I_q, Ψ)`,
/// `E_A ~ N(0, Σ, I_r)` and `E ~ N(0, Σ, Ψ)`.
fn draw_observation(comp: &ComponentParams, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let (n, p, q, r) = (comp.nrows(), comp.ncols(), comp.q(), comp.r());
    let a = comp.col_loading();
    let b = comp.row_loading();
    let sd_row: DVector<f64> = comp.row_noise().map(f64::sqrt);
    let sd_col: DVector<f64> = comp.col_noise().map(f64::sqrt);

    let u = normal_matrix(rng, q, r);
    let mut e_b = normal_matrix(rng, q, p);
    for (j, mut c) in e_b.column_iter_mut().enumerate() {
        c *= sd_col[j];
    }
    let mut e_a = normal_matrix(rng, n, r);
    for (i, mut row) in e_a.row_iter_mut().enumerate() {
        row *= sd_row[i];
    }
    let mut e = normal_matrix(rng, n, p);
    for j in 0..p {
        for i in 0..n {
            e[(i, j)] *= sd_row[i] * sd_col[j];
        }
    }
    comp.location() + a * (u * b.transpose() + e_b) + e_a * b.transpose() + e
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    if spec.n_obs == 0 {
        return Err(Error::Input("cannot generate an empty dataset".into()));
    }
    let weights = spec.params.weights();
    let draws: Vec<(usize, DMatrix<f64>)> = (0..spec.n_obs)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut g = weights.len() - 1;
            for (h, w) in weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    g = h;
                    break;
                }
            }
            (g + 1, draw_observation(spec.params.component(g), &mut rng))
        })
        .collect();
    let (truth, obs): (Vec<usize>, Vec<DMatrix<f64>>) = draws.into_iter().unzip();
    let mut data = DataSet3D::new(obs)?;
    if let Some(f) = spec.supervision {
        data = data.set_labels(Some(mask_labels(&truth, f, spec.seed ^ 0x5eed_1abe1)?))?;
    }
    Ok(SyntheticData { data, truth })
}

/// Bundled simulation designs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Two components, 10 × 7 matrices, q = 2, r = 3, equal weights.
    Sim1,
    /// Three components, 28 × 17 matrices, q = 2, r = 3, weights (0.4, 0.2, 0.4).
    Sim2,
}

impl Preset {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "sim1" => Ok(Preset::Sim1),
            "sim2" => Ok(Preset::Sim2),
            other => Err(Error::Input(format!(
                "unknown preset {other:?} (expected sim1 or sim2)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Sim1 => "sim1",
            Preset::Sim2 => "sim2",
        }
    }

    /// `(G, n, p, q, r, weights)`.
    pub fn design(self) -> (usize, usize, usize, usize, usize, Vec<f64>) {
        match self {
            Preset::Sim1 => (2, 10, 7, 2, 3, vec![0.5, 0.5]),
            Preset::Sim2 => (3, 28, 17, 2, 3, vec![0.4, 0.2, 0.4]),
        }
    }
}

/// Seed of replicate `rep` in a series of simulated datasets started from `seed`.
pub fn replicate_seed(seed: u64, rep: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64 + 1);
    rng.random()
}

const PRESET_SEED: u64 = 20_180_103;
const BLOCK_LEVEL: f64 = 5.0;

/// Fixed ground truth for a preset. Component `g` has level 5 on its own block of
/// rows and 0 elsewhere, loadings have i.i.d. standard normal entries and both
/// noise diagonals are 1.
pub fn preset(which: Preset) -> MixtureParams {
    let (groups, n, p, q, r, weights) = which.design();
    let mut rng = ChaCha8Rng::seed_from_u64(PRESET_SEED);
    let block = n / groups;
    let components = (0..groups)
        .map(|g| {
            let lo = g * block;
            let hi = if g + 1 == groups { n } else { lo + block };
            let location = DMatrix::from_fn(n, p, |i, _| {
                if (lo..hi).contains(&i) {
                    BLOCK_LEVEL
                } else {
                    0.0
                }
            });
            let a = normal_matrix(&mut rng, n, q);
            let b = normal_matrix(&mut rng, p, r);
            ComponentParams::new(
                weights[g],
                location,
                a,
                b,
                DVector::from_element(n, 1.0),
                DVector::from_element(p, 1.0),
            )
            .expect("preset parameters are valid")
        })
        .collect();
    MixtureParams::new(components).expect("preset weights sum to one")
}
