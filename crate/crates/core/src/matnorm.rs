//! Matrix variate normal distribution with low-rank-plus-diagonal scale matrices.
//!
//! A scale matrix is stored as `Diag(d) + L·Lᵀ` and every inverse or determinant
//! goes through the `k × k` inner matrix `W = I + Lᵀ·Diag(d)⁻¹·L`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::DataSet3D;
use crate::error::{Error, Result};

/// Smallest admissible diagonal entry of a structured scale.
pub const VARIANCE_FLOOR: f64 = 1e-6;

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Symmetric positive definite matrix `Diag(diag) + loading·loadingᵀ` with cached
/// Woodbury factors.
#[derive(Debug, Clone)]
pub struct StructuredScale {
    diag: DVector<f64>,
    loading: DMatrix<f64>,
    inv_diag: DVector<f64>,
    // Diag⁻¹·loading
    scaled_loading: DMatrix<f64>,
    inner_inv: DMatrix<f64>,
    inner_log_det: f64,
    log_det: f64,
}

impl StructuredScale {
    pub fn new(diag: DVector<f64>, loading: DMatrix<f64>) -> Result<Self> {
        let d = diag.len();
        if d == 0 {
            return Err(Error::Dimension(
                "scale matrix must have dimension >= 1".into(),
            ));
        }
        if loading.nrows() != d {
            return Err(Error::Dimension(format!(
                "loading has {} rows, diagonal has length {}",
                loading.nrows(),
                d
            )));
        }
        if let Some(bad) = diag.iter().find(|v| !v.is_finite() || **v < VARIANCE_FLOOR) {
            return Err(Error::Degenerate(format!(
                "diagonal entry {bad} is below the variance floor {VARIANCE_FLOOR}"
            )));
        }
        if loading.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate(
                "loading matrix has non-finite entries".into(),
            ));
        }

        let inv_diag = diag.map(|v| 1.0 / v);
        let mut scaled_loading = loading.clone();
        for (i, mut row) in scaled_loading.row_iter_mut().enumerate() {
            row *= inv_diag[i];
        }
        let k = loading.ncols();
        let mut inner = loading.transpose() * &scaled_loading;
        for i in 0..k {
            inner[(i, i)] += 1.0;
        }
        let inner = symmetrize(inner);
        let chol = inner.cholesky().ok_or_else(|| {
            Error::Degenerate("inner matrix I + LᵀD⁻¹L is not positive definite".into())
        })?;
        let inner_log_det = 2.0
            * chol
                .l_dirty()
                .diagonal()
                .iter()
                .map(|v| v.ln())
                .sum::<f64>();
        let inner_inv = symmetrize(chol.inverse());
        let log_det = diag.iter().map(|v| v.ln()).sum::<f64>() + inner_log_det;

        Ok(Self {
            diag,
            loading,
            inv_diag,
            scaled_loading,
            inner_inv,
            inner_log_det,
            log_det,
        })
    }

    /// Purely diagonal scale (zero-width loading).
    pub fn diagonal(diag: DVector<f64>) -> Result<Self> {
        let d = diag.len();
        Self::new(diag, DMatrix::zeros(d, 0))
    }

    pub fn identity(d: usize) -> Self {
        Self::diagonal(DVector::from_element(d, 1.0)).expect("identity is positive definite")
    }

    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    pub fn rank(&self) -> usize {
        self.loading.ncols()
    }

    pub fn diag(&self) -> &DVector<f64> {
        &self.diag
    }

    pub fn loading(&self) -> &DMatrix<f64> {
        &self.loading
    }

    pub fn inv_diag(&self) -> &DVector<f64> {
        &self.inv_diag
    }

    /// `Diag⁻¹·loading`.
    pub fn scaled_loading(&self) -> &DMatrix<f64> {
        &self.scaled_loading
    }

    /// `W⁻¹` where `W = I + loadingᵀ·Diag⁻¹·loading`.
    pub fn inner_inverse(&self) -> &DMatrix<f64> {
        &self.inner_inv
    }

    pub fn inner_log_det(&self) -> f64 {
        self.inner_log_det
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// `Λ⁻¹·x` for `x` with `dim()` rows.
    pub fn solve_left(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        debug_assert_eq!(x.nrows(), self.dim());
        let mut out = x.clone();
        for (i, mut row) in out.row_iter_mut().enumerate() {
            row *= self.inv_diag[i];
        }
        if self.rank() > 0 {
            let projected = self.scaled_loading.tr_mul(x);
            let inner = &self.inner_inv * projected;
            out.gemm(-1.0, &self.scaled_loading, &inner, 1.0);
        }
        out
    }

    /// `x·Λ⁻¹` for `x` with `dim()` columns.
    pub fn solve_right(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        debug_assert_eq!(x.ncols(), self.dim());
        let mut out = x.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            col *= self.inv_diag[j];
        }
        if self.rank() > 0 {
            let projected = x * &self.scaled_loading;
            let inner = projected * &self.inner_inv;
            out.gemm(-1.0, &inner, &self.scaled_loading.transpose(), 1.0);
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = &self.loading * self.loading.transpose();
        for i in 0..self.dim() {
            m[(i, i)] += self.diag[i];
        }
        m
    }

    /// A factor `F` with `F·Fᵀ = Λ`, built as `D^{1/2}(I + K·K')^{1/2}` with
    /// `K = D^{-1/2}·loading`; the inner square root comes from the eigenvectors of `KᵀK`.
    pub fn sqrt_factor(&self) -> DMatrix<f64> {
        let d = self.dim();
        let sqrt_d = self.diag.map(f64::sqrt);
        let mut k = self.loading.clone();
        for (i, mut row) in k.row_iter_mut().enumerate() {
            row /= sqrt_d[i];
        }
        let mut inner_sqrt = DMatrix::<f64>::identity(d, d);
        if self.rank() > 0 {
            let eig = symmetrize(k.tr_mul(&k)).symmetric_eigen();
            // (sqrt(1+λ) - 1)/λ, written without the 0/0 at λ = 0.
            let coef = eig
                .eigenvalues
                .map(|l| 1.0 / ((1.0 + l.max(0.0)).sqrt() + 1.0));
            let kv = &k * &eig.eigenvectors;
            let mut kv_scaled = kv.clone();
            for (j, mut col) in kv_scaled.column_iter_mut().enumerate() {
                col *= coef[j];
            }
            inner_sqrt += kv_scaled * kv.transpose();
        }
        for (i, mut row) in inner_sqrt.row_iter_mut().enumerate() {
            row *= sqrt_d[i];
        }
        inner_sqrt
    }
}

pub(crate) fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    (m + t) * 0.5
}

/// Location and structured row/column scales of a matrix variate normal.
#[derive(Debug, Clone)]
pub struct MatNormParams {
    location: DMatrix<f64>,
    row_scale: StructuredScale,
    col_scale: StructuredScale,
}

impl MatNormParams {
    pub fn new(
        location: DMatrix<f64>,
        row_scale: StructuredScale,
        col_scale: StructuredScale,
    ) -> Result<Self> {
        if location.nrows() != row_scale.dim() || location.ncols() != col_scale.dim() {
            return Err(Error::Dimension(format!(
                "location is {}x{}, scales are {}x{} and {}x{}",
                location.nrows(),
                location.ncols(),
                row_scale.dim(),
                row_scale.dim(),
                col_scale.dim(),
                col_scale.dim()
            )));
        }
        Ok(Self {
            location,
            row_scale,
            col_scale,
        })
    }

    pub fn location(&self) -> &DMatrix<f64> {
        &self.location
    }

    pub fn row_scale(&self) -> &StructuredScale {
        &self.row_scale
    }

    pub fn col_scale(&self) -> &StructuredScale {
        &self.col_scale
    }

    pub fn nrows(&self) -> usize {
        self.location.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.location.ncols()
    }

    fn check(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.shape() != self.location.shape() {
            return Err(Error::Dimension(format!(
                "observation is {}x{}, distribution is {}x{}",
                x.nrows(),
                x.ncols(),
                self.nrows(),
                self.ncols()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("observation has non-finite entries".into()));
        }
        Ok(())
    }
}

/// `tr(R_⁻¹·resid·C⁻¹·residᵀ)` for structured row scale `R_` and column scale `C`,
/// expanded through both Woodbury identities so that no `n × n` or `p × p` inverse
/// is formed.
pub fn structured_trace(row: &StructuredScale, col: &StructuredScale, resid: &DMatrix<f64>) -> f64 {
    let (n, p) = resid.shape();
    let mut diag_term = 0.0;
    for j in 0..p {
        let cj = col.inv_diag[j];
        for i in 0..n {
            let v = resid[(i, j)];
            diag_term += v * v * row.inv_diag[i] * cj;
        }
    }
    let mut total = diag_term;

    let row_k = row.rank();
    let col_k = col.rank();
    // P = G_rᵀ·R (k×p), Q = R·G_c (n×m)
    let p_mat = if row_k > 0 {
        Some(row.scaled_loading.tr_mul(resid))
    } else {
        None
    };
    let q_mat = if col_k > 0 {
        Some(resid * &col.scaled_loading)
    } else {
        None
    };

    if let Some(q_mat) = &q_mat {
        // tr(W_c⁻¹·Qᵀ·D_r⁻¹·Q)
        let w = &col.inner_inv;
        for a in 0..col_k {
            for b in a..col_k {
                let mut gram = 0.0;
                for i in 0..n {
                    gram += q_mat[(i, a)] * q_mat[(i, b)] * row.inv_diag[i];
                }
                total -= if a == b {
                    gram * w[(a, a)]
                } else {
                    gram * (w[(a, b)] + w[(b, a)])
                };
            }
        }
    }
    if let Some(p_mat) = &p_mat {
        // tr(W_r⁻¹·P·D_c⁻¹·Pᵀ)
        let w = &row.inner_inv;
        for a in 0..row_k {
            for b in a..row_k {
                let mut gram = 0.0;
                for j in 0..p {
                    gram += p_mat[(a, j)] * p_mat[(b, j)] * col.inv_diag[j];
                }
                total -= if a == b {
                    gram * w[(a, a)]
                } else {
                    gram * (w[(a, b)] + w[(b, a)])
                };
            }
        }
    }
    if let (Some(p_mat), Some(_)) = (&p_mat, &q_mat) {
        // tr(W_r⁻¹·T·W_c⁻¹·Tᵀ), T = G_rᵀ·R·G_c
        let t = p_mat * &col.scaled_loading;
        let left = &row.inner_inv * &t;
        let right = &t * &col.inner_inv;
        total += left.component_mul(&right).sum();
    }
    total
}

/// `tr(Δ⁻¹(X−M)Ω⁻¹(X−M)ᵀ)`.
pub fn mahalanobis_trace(x: &DMatrix<f64>, params: &MatNormParams) -> Result<f64> {
    params.check(x)?;
    let resid = x - &params.location;
    Ok(structured_trace(&params.row_scale, &params.col_scale, &resid).max(0.0))
}

/// Log-density of the `n × p` matrix variate normal at `x`.
pub fn log_density(x: &DMatrix<f64>, params: &MatNormParams) -> Result<f64> {
    let trace = mahalanobis_trace(x, params)?;
    Ok(log_density_from_trace(
        trace,
        params.row_scale.log_det(),
        params.col_scale.log_det(),
        params.nrows(),
        params.ncols(),
    ))
}

pub(crate) fn log_density_from_trace(
    trace: f64,
    row_log_det: f64,
    col_log_det: f64,
    n: usize,
    p: usize,
) -> f64 {
    let (n, p) = (n as f64, p as f64);
    -0.5 * n * p * LN_2PI - 0.5 * p * row_log_det - 0.5 * n * col_log_det - 0.5 * trace
}

/// Draws `count` i.i.d. matrices `M + F_Δ·Z·F_Ωᵀ`.
pub fn sample(params: &MatNormParams, count: usize, seed: u64) -> Result<DataSet3D> {
    if count == 0 {
        return Err(Error::Input("sample count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let row_factor = params.row_scale.sqrt_factor();
    let col_factor_t = params.col_scale.sqrt_factor().transpose();
    let (n, p) = (params.nrows(), params.ncols());
    let obs = (0..count)
        .map(|_| {
            let z = DMatrix::<f64>::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
            &params.location + &row_factor * z * &col_factor_t
        })
        .collect();
    DataSet3D::new(obs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use std::f64::consts::PI;

    fn normal_log_pdf(x: f64, mean: f64, var: f64) -> f64 {
        -0.5 * (2.0 * PI * var).ln() - 0.5 * (x - mean).powi(2) / var
    }

    fn random_scale(rng: &mut ChaCha8Rng, d: usize, k: usize) -> StructuredScale {
        let diag = DVector::from_fn(d, |_, _| rng.random_range(0.2..2.0));
        let loading = DMatrix::from_fn(d, k, |_, _| rng.random_range(-1.0..1.0));
        StructuredScale::new(diag, loading).unwrap()
    }

    fn random_params(rng: &mut ChaCha8Rng, n: usize, p: usize) -> MatNormParams {
        let q = rng.random_range(0..n.max(1));
        let r = rng.random_range(0..p.max(1));
        let m = DMatrix::from_fn(n, p, |_, _| rng.random_range(-2.0..2.0));
        MatNormParams::new(m, random_scale(rng, n, q), random_scale(rng, p, r)).unwrap()
    }

    // Dense multivariate normal log-density of vec(X) with covariance Ω⊗Δ.
    fn dense_vec_log_density(x: &DMatrix<f64>, params: &MatNormParams) -> f64 {
        let cov = params
            .col_scale()
            .to_dense()
            .kronecker(&params.row_scale().to_dense());
        let diff = DVector::from_column_slice((x - params.location()).as_slice());
        let chol = cov.cholesky().unwrap();
        let sol = chol.solve(&diff);
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let d = diff.len() as f64;
        -0.5 * d * LN_2PI - 0.5 * log_det - 0.5 * diff.dot(&sol)
    }

    #[test]
    fn identity_scales_at_location() {
        let params = MatNormParams::new(
            DMatrix::from_element(3, 2, 0.7),
            StructuredScale::identity(3),
            StructuredScale::identity(2),
        )
        .unwrap();
        let ld = log_density(&DMatrix::from_element(3, 2, 0.7), &params).unwrap();
        assert!((ld - (-3.0 * LN_2PI)).abs() < 1e-14);
    }

    #[test]
    fn scalar_density_matches_univariate_normal() {
        let params = MatNormParams::new(
            DMatrix::from_element(1, 1, 0.0),
            StructuredScale::identity(1),
            StructuredScale::diagonal(DVector::from_element(1, 2.0)).unwrap(),
        )
        .unwrap();
        let ld = log_density(&DMatrix::from_element(1, 1, 1.0), &params).unwrap();
        assert!((ld - normal_log_pdf(1.0, 0.0, 2.0)).abs() < 1e-14);
        assert!((ld - (-1.515512)).abs() < 1e-6);
        assert!((ld.exp() - 0.21970).abs() < 1e-5);
    }

    #[test]
    fn random_instance_matches_kronecker_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let params = random_params(&mut rng, 3, 2);
            let x = DMatrix::from_fn(3, 2, |_, _| rng.random_range(-3.0..3.0));
            let ld = log_density(&x, &params).unwrap();
            assert!((ld - dense_vec_log_density(&x, &params)).abs() < 1e-8);
        }
    }

    #[test]
    fn mahalanobis_examples() {
        let params = MatNormParams::new(
            DMatrix::from_element(1, 1, 1.0),
            StructuredScale::identity(1),
            StructuredScale::diagonal(DVector::from_element(1, 4.0)).unwrap(),
        )
        .unwrap();
        let t = mahalanobis_trace(&DMatrix::from_element(1, 1, 3.0), &params).unwrap();
        assert!((t - 1.0).abs() < 1e-15);
        let t0 = mahalanobis_trace(&DMatrix::from_element(1, 1, 1.0), &params).unwrap();
        assert_eq!(t0, 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = MatNormParams::new(
            DMatrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0)),
            random_scale(&mut rng, 4, 2),
            random_scale(&mut rng, 3, 1),
        )
        .unwrap();
        let x = DMatrix::from_fn(4, 3, |_, _| rng.random_range(-2.0..2.0));
        let resid = &x - params.location();
        let dense = (params.row_scale().to_dense().try_inverse().unwrap()
            * &resid
            * params.col_scale().to_dense().try_inverse().unwrap()
            * resid.transpose())
        .trace();
        let t = mahalanobis_trace(&x, &params).unwrap();
        assert!((t - dense).abs() < 1e-10 * dense.abs().max(1.0));
        assert_eq!(mahalanobis_trace(params.location(), &params).unwrap(), 0.0);
    }

    #[test]
    fn dimension_and_finiteness_errors() {
        let params = MatNormParams::new(
            DMatrix::zeros(2, 2),
            StructuredScale::identity(2),
            StructuredScale::identity(2),
        )
        .unwrap();
        assert!(matches!(
            log_density(&DMatrix::zeros(2, 3), &params),
            Err(Error::Dimension(_))
        ));
        let mut x = DMatrix::zeros(2, 2);
        x[(0, 1)] = f64::NAN;
        assert!(matches!(log_density(&x, &params), Err(Error::Input(_))));
        assert!(MatNormParams::new(
            DMatrix::zeros(3, 2),
            StructuredScale::identity(2),
            StructuredScale::identity(2)
        )
        .is_err());
    }

    #[test]
    fn rejects_diagonal_below_floor() {
        let err = StructuredScale::diagonal(DVector::from_vec(vec![1.0, 1e-9])).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn woodbury_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(d, k) in &[(1, 0), (1, 1), (5, 2), (17, 4), (40, 8), (64, 8)] {
            let s = random_scale(&mut rng, d, k);
            let dense = s.to_dense();
            let x = DMatrix::from_fn(d, 3, |_, _| rng.random_range(-1.0..1.0));
            let want = dense.clone().cholesky().unwrap().solve(&x);
            let got = s.solve_left(&x);
            assert!((&got - &want).norm() / want.norm() < 1e-10);
            let got_r = s.solve_right(&x.transpose());
            assert!((&got_r - want.transpose()).norm() / want.norm() < 1e-10);
            let ld = dense
                .cholesky()
                .unwrap()
                .l()
                .diagonal()
                .iter()
                .map(|v| 2.0 * v.ln())
                .sum::<f64>();
            assert!((s.log_det() - ld).abs() < 1e-10 * ld.abs().max(1.0));
        }
    }

    #[test]
    fn sqrt_factor_reproduces_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &(d, k) in &[(1, 0), (4, 0), (6, 3), (10, 9)] {
            let s = random_scale(&mut rng, d, k);
            let f = s.sqrt_factor();
            let err = (&f * f.transpose() - s.to_dense()).norm() / s.to_dense().norm();
            assert!(err < 1e-12, "d={d} k={k} err={err}");
        }
    }

    #[test]
    fn transpose_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let params = random_params(&mut rng, 4, 3);
            let x = DMatrix::from_fn(4, 3, |_, _| rng.random_range(-3.0..3.0));
            let swapped = MatNormParams::new(
                params.location().transpose(),
                params.col_scale().clone(),
                params.row_scale().clone(),
            )
            .unwrap();
            let a = log_density(&x, &params).unwrap();
            let b = log_density(&x.transpose(), &swapped).unwrap();
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn density_peaks_at_location() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..20 {
            let params = random_params(&mut rng, 3, 4);
            let at_mode = log_density(params.location(), &params).unwrap();
            for _ in 0..10 {
                let dir = DMatrix::from_fn(3, 4, |_, _| rng.random_range(-1.0..1.0));
                let scale = rng.random_range(1e-3..2.0);
                let x = params.location() + dir * scale;
                assert!(log_density(&x, &params).unwrap() < at_mode);
            }
        }
    }

    #[test]
    fn sampling_moments() {
        let params = MatNormParams::new(
            DMatrix::zeros(2, 2),
            StructuredScale::identity(2),
            StructuredScale::identity(2),
        )
        .unwrap();
        let data = sample(&params, 10_000, 1).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let vals: Vec<f64> = data.iter().map(|x| x[(i, j)]).collect();
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
                assert!(mean.abs() < 0.05, "mean {mean}");
                assert!((var - 1.0).abs() < 0.05, "var {var}");
            }
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = random_params(&mut rng, 3, 3);
        let a = sample(&params, 1, 42).unwrap();
        let b = sample(&params, 1, 42).unwrap();
        assert_eq!(a.obs()[0].as_slice(), b.obs()[0].as_slice());
    }

    #[test]
    fn sampling_covariance_matches_kronecker() {
        let params = MatNormParams::new(
            DMatrix::zeros(2, 3),
            StructuredScale::diagonal(DVector::from_vec(vec![1.0, 4.0])).unwrap(),
            StructuredScale::identity(3),
        )
        .unwrap();
        let data = sample(&params, 20_000, 8).unwrap();
        let mut cov = DMatrix::<f64>::zeros(6, 6);
        for x in data.iter() {
            let v = DVector::from_column_slice(x.as_slice());
            cov += &v * v.transpose();
        }
        cov /= data.len() as f64;
        let truth = params
            .col_scale()
            .to_dense()
            .kronecker(&params.row_scale().to_dense());
        assert!((cov - &truth).norm() / truth.norm() < 0.05);
    }
}
