//! Mixtures of matrix variate bilinear factor analyzers.
//!
//! Each observation is an `n × p` matrix. Component `g` is a matrix normal with
//! location `M_g`, row scale `Σ_g + A_g A_gᵀ` (`A_g` is `n × q`) and column scale
//! `Ψ_g + B_g B_gᵀ` (`B_g` is `p × r`). Fitting uses a three-stage AECM algorithm with
//! emEM starts; `(G, q, r)` is chosen by BIC over a grid.
//!
//! ```no_run
//! use mvbfa::{data, grid_search, FitConfig, GridSpec};
//!
//! let sim = data::generate(&data::SyntheticSpec {
//!     params: data::preset(data::Preset::Sim1),
//!     n_obs: 200,
//!     seed: 1,
//!     supervision: None,
//! })?;
//! let grid = GridSpec::new(1..=3, 1..=4, 1..=4);
//! let selection = grid_search(&sim.data, &grid, &FitConfig::new(1, 1, 1).with_seed(7))?;
//! let best = selection.best();
//! println!("G = {}, q = {}, r = {}, BIC = {}", best.groups, best.q, best.r, best.bic);
//! # Ok::<(), mvbfa::Error>(())
//! ```

pub mod aecm;
pub mod data;
mod error;
pub mod matnorm;
pub mod metrics;
pub mod model;
pub mod persist;
pub mod selection;

pub use aecm::{
    aitken_stop, fit_multi_start, fit_once, observed_log_lik, random_init, AitkenDecision,
    FitConfig, FitResult, StageLimits,
};
pub use data::DataSet3D;
pub use error::{Error, Result};
pub use matnorm::{MatNormParams, StructuredScale};
pub use model::{map_classify, ComponentParams, MixtureParams, ResponsibilityMatrix};
pub use selection::{bic, count_params, grid_search, GridSpec, Selection, SelectionRecord};
