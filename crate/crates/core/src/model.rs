//! Mixture of matrix variate bilinear factor analyzers: parameters, component
//! densities, responsibilities and the conditional moments of the latent matrices.
//!
//! Component `g` generates `X = M + A·U·Bᵀ + A·E_B + E_A·Bᵀ + E`, so that
//! marginally `X ~ N_{n×p}(M, Σ + A·Aᵀ, Ψ + B·Bᵀ)` with `Σ`, `Ψ` diagonal.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::data::DataSet3D;
use crate::error::{Error, Result};
use crate::matnorm::{log_density_from_trace, structured_trace, MatNormParams, StructuredScale};

/// One mixture component: weight, location, loadings and diagonal noise.
#[derive(Debug, Clone)]
pub struct ComponentParams {
    weight: f64,
    location: DMatrix<f64>,
    // Λ_A = Σ + A·Aᵀ (n × n), holds A and Σ
    row_scale: StructuredScale,
    // Λ_B = Ψ + B·Bᵀ (p × p), holds B and Ψ
    col_scale: StructuredScale,
}

impl ComponentParams {
    /// `col_loading` is `A` (`n × q`), `row_loading` is `B` (`p × r`), `row_noise`
    /// is the diagonal of `Σ` and `col_noise` the diagonal of `Ψ`.
    pub fn new(
        weight: f64,
        location: DMatrix<f64>,
        col_loading: DMatrix<f64>,
        row_loading: DMatrix<f64>,
        row_noise: DVector<f64>,
        col_noise: DVector<f64>,
    ) -> Result<Self> {
        if !(weight > 0.0 && weight <= 1.0) {
            return Err(Error::Input(format!(
                "mixing weight {weight} is outside (0, 1]"
            )));
        }
        let (n, p) = location.shape();
        if col_loading.nrows() != n || row_noise.len() != n {
            return Err(Error::Dimension(format!(
                "location has {n} rows but A has {} and Σ has {}",
                col_loading.nrows(),
                row_noise.len()
            )));
        }
        if row_loading.nrows() != p || col_noise.len() != p {
            return Err(Error::Dimension(format!(
                "location has {p} columns but B has {} rows and Ψ has {}",
                row_loading.nrows(),
                col_noise.len()
            )));
        }
        if location.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("location has non-finite entries".into()));
        }
        Ok(Self {
            weight,
            location,
            row_scale: StructuredScale::new(row_noise, col_loading)?,
            col_scale: StructuredScale::new(col_noise, row_loading)?,
        })
    }

    pub(crate) fn from_scales(
        weight: f64,
        location: DMatrix<f64>,
        row_scale: StructuredScale,
        col_scale: StructuredScale,
    ) -> Self {
        Self {
            weight,
            location,
            row_scale,
            col_scale,
        }
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn location(&self) -> &DMatrix<f64> {
        &self.location
    }

    /// `A`, the `n × q` column factor loadings.
    pub fn col_loading(&self) -> &DMatrix<f64> {
        self.row_scale.loading()
    }

    /// `B`, the `p × r` row factor loadings.
    pub fn row_loading(&self) -> &DMatrix<f64> {
        self.col_scale.loading()
    }

    /// Diagonal of `Σ`.
    pub fn row_noise(&self) -> &DVector<f64> {
        self.row_scale.diag()
    }

    /// Diagonal of `Ψ`.
    pub fn col_noise(&self) -> &DVector<f64> {
        self.col_scale.diag()
    }

    /// `Λ_A = Σ + A·Aᵀ`.
    pub fn row_scale(&self) -> &StructuredScale {
        &self.row_scale
    }

    /// `Λ_B = Ψ + B·Bᵀ`.
    pub fn col_scale(&self) -> &StructuredScale {
        &self.col_scale
    }

    pub fn nrows(&self) -> usize {
        self.location.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.location.ncols()
    }

    pub fn q(&self) -> usize {
        self.row_scale.rank()
    }

    pub fn r(&self) -> usize {
        self.col_scale.rank()
    }

    pub fn marginal(&self) -> MatNormParams {
        MatNormParams::new(
            self.location.clone(),
            self.row_scale.clone(),
            self.col_scale.clone(),
        )
        .expect("component dimensions are consistent")
    }

    /// Dense `Λ_B ⊗ Λ_A`, the covariance of `vec(X)`.
    pub fn vec_covariance(&self) -> DMatrix<f64> {
        self.col_scale
            .to_dense()
            .kronecker(&self.row_scale.to_dense())
    }

    /// The same component for transposed observations: `Mᵀ`, with `(A, Σ)` and
    /// `(B, Ψ)` swapped.
    pub fn transpose(&self) -> Self {
        Self {
            weight: self.weight,
            location: self.location.transpose(),
            row_scale: self.col_scale.clone(),
            col_scale: self.row_scale.clone(),
        }
    }

    pub fn with_weight(&self, weight: f64) -> Self {
        Self {
            weight,
            ..self.clone()
        }
    }
}

/// Ordered mixture components sharing `(n, p, q, r)`.
#[derive(Debug, Clone)]
pub struct MixtureParams {
    components: Vec<ComponentParams>,
}

impl MixtureParams {
    pub fn new(components: Vec<ComponentParams>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::Input("mixture needs at least one component".into()))?;
        let dims = (first.nrows(), first.ncols(), first.q(), first.r());
        for (g, c) in components.iter().enumerate() {
            let d = (c.nrows(), c.ncols(), c.q(), c.r());
            if d != dims {
                return Err(Error::Dimension(format!(
                    "component {} has (n,p,q,r) = {d:?}, component 1 has {dims:?}",
                    g + 1
                )));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Input(format!(
                "mixing weights sum to {total}, not 1"
            )));
        }
        Ok(Self { components })
    }

    pub fn components(&self) -> &[ComponentParams] {
        &self.components
    }

    pub fn component(&self, g: usize) -> &ComponentParams {
        &self.components[g]
    }

    pub fn groups(&self) -> usize {
        self.components.len()
    }

    /// `(n, p, q, r)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let c = &self.components[0];
        (c.nrows(), c.ncols(), c.q(), c.r())
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    pub fn transpose(&self) -> Self {
        Self {
            components: self.components.iter().map(|c| c.transpose()).collect(),
        }
    }

    /// Components reordered so that new component `g` is old component `order[g]`.
    pub fn permute(&self, order: &[usize]) -> Self {
        Self {
            components: order.iter().map(|&g| self.components[g].clone()).collect(),
        }
    }

    pub(crate) fn from_components_unchecked(components: Vec<ComponentParams>) -> Self {
        Self { components }
    }

    pub(crate) fn check_data(&self, data: &DataSet3D) -> Result<()> {
        let (n, p, _, _) = self.dims();
        if data.dims() != (n, p) {
            return Err(Error::Dimension(format!(
                "data is {}x{}, model is {n}x{p}",
                data.dims().0,
                data.dims().1
            )));
        }
        let max = data.max_label();
        if max > self.groups() {
            return Err(Error::Input(format!(
                "label {max} exceeds the number of components {}",
                self.groups()
            )));
        }
        Ok(())
    }
}

/// `N × G` posterior membership probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponsibilityMatrix {
    values: DMatrix<f64>,
}

impl ResponsibilityMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        for (i, row) in values.row_iter().enumerate() {
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Input(format!(
                    "responsibilities of observation {} leave [0, 1]",
                    i + 1
                )));
            }
            if (row.sum() - 1.0).abs() > 1e-12 {
                return Err(Error::Input(format!(
                    "responsibilities of observation {} sum to {}",
                    i + 1,
                    row.sum()
                )));
            }
        }
        Ok(Self { values })
    }

    /// Rows equal to the one-hot encoding of 1-based `labels`.
    pub fn one_hot(labels: &[usize], groups: usize) -> Result<Self> {
        let mut values = DMatrix::zeros(labels.len(), groups);
        for (i, &l) in labels.iter().enumerate() {
            if l == 0 || l > groups {
                return Err(Error::Input(format!(
                    "label {l} of observation {} is outside 1..={groups}",
                    i + 1
                )));
            }
            values[(i, l - 1)] = 1.0;
        }
        Ok(Self { values })
    }

    pub(crate) fn from_values_unchecked(values: DMatrix<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn get(&self, i: usize, g: usize) -> f64 {
        self.values[(i, g)]
    }

    pub fn nobs(&self) -> usize {
        self.values.nrows()
    }

    pub fn groups(&self) -> usize {
        self.values.ncols()
    }

    /// `N_g = Σ_i ẑ_ig`, summed in observation order.
    pub fn masses(&self) -> Vec<f64> {
        (0..self.groups())
            .map(|g| self.values.column(g).iter().sum())
            .collect()
    }
}

/// Conditional expectations of the latent matrices for one observation and component.
#[derive(Debug, Clone)]
pub struct LatentMoments {
    /// `E[Y_B | X]`, `q × p`.
    pub a_b: DMatrix<f64>,
    /// `E[Y_B·Λ_B⁻¹·Y_Bᵀ | X]`, `q × q`.
    pub b_b: DMatrix<f64>,
    /// `E[Y_A | X]`, `n × r`.
    pub a_a: DMatrix<f64>,
    /// `E[Y_Aᵀ·Λ_A⁻¹·Y_A | X]`, `r × r`.
    pub b_a: DMatrix<f64>,
}

pub fn component_log_density(x: &DMatrix<f64>, comp: &ComponentParams) -> Result<f64> {
    if x.shape() != comp.location.shape() {
        return Err(Error::Dimension(format!(
            "observation is {}x{}, component is {}x{}",
            x.nrows(),
            x.ncols(),
            comp.nrows(),
            comp.ncols()
        )));
    }
    let resid = x - &comp.location;
    let ld = log_density_unchecked(&resid, comp);
    if ld.is_nan() {
        return Err(Error::Degenerate("component log-density is NaN".into()));
    }
    Ok(ld)
}

pub(crate) fn log_density_unchecked(resid: &DMatrix<f64>, comp: &ComponentParams) -> f64 {
    let trace = structured_trace(&comp.row_scale, &comp.col_scale, resid).max(0.0);
    log_density_from_trace(
        trace,
        comp.row_scale.log_det(),
        comp.col_scale.log_det(),
        comp.nrows(),
        comp.ncols(),
    )
}

pub(crate) fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Responsibilities together with the observed log-likelihood they imply.
///
/// Unlabeled observations contribute `log Σ_g π_g φ_g(X_i)`; labeled ones contribute
/// `log π_l + log φ_l(X_i)` for their class `l` and get a one-hot row.
pub(crate) fn expectation(
    data: &DataSet3D,
    params: &MixtureParams,
) -> Result<(ResponsibilityMatrix, f64)> {
    params.check_data(data)?;
    let groups = params.groups();
    let log_weights: Vec<f64> = params.components.iter().map(|c| c.weight.ln()).collect();

    let rows: Vec<Result<(Vec<f64>, f64)>> = data
        .obs()
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let label = data.label(i);
            let mut joint = Vec::with_capacity(groups);
            for (g, comp) in params.components.iter().enumerate() {
                if label > 0 && label != g + 1 {
                    joint.push(f64::NEG_INFINITY);
                    continue;
                }
                let resid = x - &comp.location;
                let ld = log_density_unchecked(&resid, comp);
                if ld.is_nan() {
                    return Err(Error::Degenerate(format!(
                        "log-density of observation {} under component {} is NaN",
                        i + 1,
                        g + 1
                    )));
                }
                joint.push(log_weights[g] + ld);
            }
            if label > 0 {
                let mut row = vec![0.0; groups];
                row[label - 1] = 1.0;
                return Ok((row, joint[label - 1]));
            }
            let total = log_sum_exp(&joint);
            if !total.is_finite() {
                return Err(Error::Degenerate(format!(
                    "observation {} has zero density under every component",
                    i + 1
                )));
            }
            let row = joint.iter().map(|v| (v - total).exp()).collect();
            Ok((row, total))
        })
        .collect();

    let mut values = DMatrix::zeros(data.len(), groups);
    let mut loglik = 0.0;
    for (i, row) in rows.into_iter().enumerate() {
        let (row, ll) = row?;
        for (g, v) in row.into_iter().enumerate() {
            values[(i, g)] = v;
        }
        loglik += ll;
    }
    Ok((ResponsibilityMatrix::from_values_unchecked(values), loglik))
}

/// `ẑ_ig`, computed in log space; labeled observations get their one-hot row.
pub fn responsibilities(data: &DataSet3D, params: &MixtureParams) -> Result<ResponsibilityMatrix> {
    expectation(data, params).map(|(resp, _)| resp)
}

/// Column-direction moments `(a_B, b_B)` plus `resid·Λ_B⁻¹`, which the stage-2
/// update needs as well.
pub(crate) fn column_moments(
    resid: &DMatrix<f64>,
    comp: &ComponentParams,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let (_, p) = resid.shape();
    let row = &comp.row_scale;
    let w_inv = row.inner_inverse();
    let resid_col = comp.col_scale.solve_right(resid);
    // a_B = W_A⁻¹·Aᵀ·Σ⁻¹·R ; a_B·Λ_B⁻¹ = W_A⁻¹·Aᵀ·Σ⁻¹·(R·Λ_B⁻¹)
    let a_b = w_inv * row.scaled_loading().tr_mul(resid);
    let a_b_col = w_inv * row.scaled_loading().tr_mul(&resid_col);
    let b_b = w_inv * (p as f64) + &a_b_col * a_b.transpose();
    (a_b, b_b, resid_col)
}

/// Row-direction moments `(a_A, b_A)` plus `Λ_A⁻¹·resid`.
pub(crate) fn row_moments(
    resid: &DMatrix<f64>,
    comp: &ComponentParams,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let (n, _) = resid.shape();
    let col = &comp.col_scale;
    let w_inv = col.inner_inverse();
    let row_resid = comp.row_scale.solve_left(resid);
    // a_A = R·Ψ⁻¹·B·W_B⁻¹ ; Λ_A⁻¹·a_A = (Λ_A⁻¹·R)·Ψ⁻¹·B·W_B⁻¹
    let a_a = resid * col.scaled_loading() * w_inv;
    let row_a_a = &row_resid * col.scaled_loading() * w_inv;
    let b_a = w_inv * (n as f64) + a_a.tr_mul(&row_a_a);
    (a_a, b_a, row_resid)
}

pub fn latent_moments(x: &DMatrix<f64>, comp: &ComponentParams) -> Result<LatentMoments> {
    if x.shape() != comp.location.shape() {
        return Err(Error::Dimension(format!(
            "observation is {}x{}, component is {}x{}",
            x.nrows(),
            x.ncols(),
            comp.nrows(),
            comp.ncols()
        )));
    }
    let resid = x - &comp.location;
    let (a_b, b_b, _) = column_moments(&resid, comp);
    let (a_a, b_a, _) = row_moments(&resid, comp);
    Ok(LatentMoments { a_b, b_b, a_a, b_a })
}

/// Maximum a posteriori labels (1-based); ties go to the smallest component index.
pub fn map_classify(resp: &ResponsibilityMatrix) -> Vec<usize> {
    resp.values
        .row_iter()
        .map(|row| {
            let mut best = 0;
            for g in 1..row.len() {
                if row[g] > row[best] {
                    best = g;
                }
            }
            best + 1
        })
        .collect()
}
