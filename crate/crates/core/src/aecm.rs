//! Three-stage AECM fitting.
//!
//! Each cycle runs three E/CM pairs, refreshing the responsibilities before every
//! stage:
//!
//! 1. memberships only → `π_g`, `M_g`;
//! 2. memberships and the column-direction latent `Y_B` → `A_g`, `Σ_g`;
//! 3. memberships and the row-direction latent `Y_A` → `B_g`, `Ψ_g`.
//!
//! Starts come from an emEM scheme: several short random-start runs, then the best
//! one continues until the Aitken-extrapolated log-likelihood stops moving.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;

use crate::data::DataSet3D;
use crate::error::{Error, Result};
use crate::matnorm::{StructuredScale, VARIANCE_FLOOR};
use crate::model::{
    column_moments, expectation, row_moments, ComponentParams, MixtureParams, ResponsibilityMatrix,
};

const CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub groups: usize,
    /// Column factors (the `n`-side reduction).
    pub q: usize,
    /// Row factors (the `p`-side reduction).
    pub r: usize,
    pub n_starts: usize,
    pub burn_in: usize,
    pub max_iters: usize,
    /// `ε = epsilon_rel · |l|` with `l` the log-likelihood after burn-in.
    pub epsilon_rel: f64,
    pub seed: u64,
    pub floor: f64,
}

impl FitConfig {
    pub fn new(groups: usize, q: usize, r: usize) -> Self {
        Self {
            groups,
            q,
            r,
            n_starts: 10,
            burn_in: 10,
            max_iters: 1000,
            epsilon_rel: 1e-4,
            seed: 0,
            floor: VARIANCE_FLOOR,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn limits(&self) -> StageLimits {
        StageLimits::for_factors(self.q, self.r).with_floor(self.floor)
    }

    pub fn validate(&self, data: &DataSet3D) -> Result<()> {
        let (n, p) = data.dims();
        if self.groups == 0 {
            return Err(Error::Input(
                "number of components must be at least 1".into(),
            ));
        }
        if self.q >= n || self.r >= p {
            return Err(Error::Input(format!(
                "need q < n and r < p, got q = {}, r = {} for {n}x{p} data",
                self.q, self.r
            )));
        }
        if self.n_starts == 0 || self.max_iters == 0 {
            return Err(Error::Input(
                "n_starts and max_iters must be positive".into(),
            ));
        }
        if !(self.epsilon_rel > 0.0) || !(self.floor > 0.0) {
            return Err(Error::Input(
                "epsilon_rel and floor must be positive".into(),
            ));
        }
        if data.max_label() > self.groups {
            return Err(Error::Input(format!(
                "label {} exceeds G = {}",
                data.max_label(),
                self.groups
            )));
        }
        Ok(())
    }
}

/// Guards applied inside every CM-step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageLimits {
    /// Lower bound for every diagonal entry of `Σ_g` and `Ψ_g`.
    pub floor: f64,
    /// A component whose expected size falls below this aborts the run.
    pub min_mass: f64,
}

impl StageLimits {
    /// Floor `VARIANCE_FLOOR`, minimum mass `max(q, r, 1) + 1`.
    pub fn for_factors(q: usize, r: usize) -> Self {
        Self {
            floor: VARIANCE_FLOOR,
            min_mass: (q.max(r).max(1) + 1) as f64,
        }
    }

    pub fn with_floor(mut self, floor: f64) -> Self {
        self.floor = floor;
        self
    }

    pub fn with_min_mass(mut self, min_mass: f64) -> Self {
        self.min_mass = min_mass;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceState {
    /// Observed log-likelihood of the initial parameters followed by one entry per cycle.
    pub trace: Vec<f64>,
    pub acceleration: Option<f64>,
    pub asymptote: Option<f64>,
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: MixtureParams,
    pub resp: ResponsibilityMatrix,
    pub convergence: ConvergenceState,
    pub log_lik: f64,
    pub converged: bool,
    /// Full AECM cycles performed.
    pub iterations: usize,
    /// Causes of random starts that failed during burn-in or continuation.
    pub failed_starts: Vec<String>,
}

impl FitResult {
    pub fn labels(&self) -> Vec<usize> {
        crate::model::map_classify(&self.resp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AitkenDecision {
    Continue,
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AitkenCheck {
    pub decision: AitkenDecision,
    pub acceleration: Option<f64>,
    pub asymptote: Option<f64>,
}

/// Aitken-acceleration stopping rule on the last three trace entries
/// `l⁽ᵗ⁻¹⁾, l⁽ᵗ⁾, l⁽ᵗ⁺¹⁾`: stop when the extrapolated asymptote exceeds the latest
/// value by an amount in `(0, ε)`. Increments at machine-precision scale count as
/// zero, and two such increments in a row are a plateau (stop).
pub fn aitken_stop(trace: &[f64], epsilon: f64) -> AitkenCheck {
    let undecided = AitkenCheck {
        decision: AitkenDecision::Continue,
        acceleration: None,
        asymptote: None,
    };
    let [.., prev, cur, next] = trace else {
        return undecided;
    };
    let flat = 1e-12 * next.abs().max(1.0);
    let last_step = next - cur;
    let prev_step = cur - prev;
    if prev_step.abs() <= flat {
        let decision = if last_step.abs() <= flat {
            AitkenDecision::Stop
        } else {
            AitkenDecision::Continue
        };
        return AitkenCheck {
            decision,
            ..undecided
        };
    }
    let acceleration = last_step / prev_step;
    let asymptote = cur + last_step / (1.0 - acceleration);
    let gap = asymptote - next;
    let decision = if gap > 0.0 && gap < epsilon {
        AitkenDecision::Stop
    } else {
        AitkenDecision::Continue
    };
    AitkenCheck {
        decision,
        acceleration: Some(acceleration),
        asymptote: Some(asymptote),
    }
}

/// Observed log-likelihood; labeled observations enter through their own class only.
pub fn observed_log_lik(data: &DataSet3D, params: &MixtureParams) -> Result<f64> {
    expectation(data, params).map(|(_, ll)| ll)
}

fn check_resp(data: &DataSet3D, params: &MixtureParams, resp: &ResponsibilityMatrix) -> Result<()> {
    params.check_data(data)?;
    if resp.nobs() != data.len() || resp.groups() != params.groups() {
        return Err(Error::Dimension(format!(
            "responsibilities are {}x{}, expected {}x{}",
            resp.nobs(),
            resp.groups(),
            data.len(),
            params.groups()
        )));
    }
    Ok(())
}

fn checked_masses(resp: &ResponsibilityMatrix, limits: &StageLimits) -> Result<Vec<f64>> {
    let masses = resp.masses();
    for (g, &mass) in masses.iter().enumerate() {
        if !(mass >= limits.min_mass) || mass <= 0.0 {
            return Err(Error::EmptyComponent {
                component: g + 1,
                mass,
                min: limits.min_mass,
            });
        }
    }
    Ok(masses)
}

/// Weighted sum over observations, reduced chunk by chunk in observation order so the
/// result does not depend on the thread count.
fn weighted_sum<T, F, A>(data: &DataSet3D, weights: &[f64], init: F, accumulate: A) -> T
where
    T: Send,
    F: Fn() -> T + Sync,
    A: Fn(&mut T, f64, &DMatrix<f64>) + Sync,
    T: std::ops::AddAssign<T>,
{
    let partials: Vec<T> = data
        .obs()
        .par_chunks(CHUNK)
        .zip(weights.par_chunks(CHUNK))
        .map(|(xs, ws)| {
            let mut acc = init();
            for (x, &w) in xs.iter().zip(ws) {
                if w != 0.0 {
                    accumulate(&mut acc, w, x);
                }
            }
            acc
        })
        .collect();
    let mut total = init();
    for part in partials {
        total += part;
    }
    total
}

fn weighted_means(
    data: &DataSet3D,
    resp: &ResponsibilityMatrix,
    limits: &StageLimits,
) -> Result<Vec<(f64, DMatrix<f64>)>> {
    let masses = checked_masses(resp, limits)?;
    let (n, p) = data.dims();
    let total = data.len() as f64;
    Ok((0..resp.groups())
        .map(|g| {
            // sequential on purpose: with one-hot weights this is exactly the class mean
            let mut sum = DMatrix::<f64>::zeros(n, p);
            for (i, x) in data.iter().enumerate() {
                let w = resp.get(i, g);
                if w != 0.0 {
                    sum.zip_apply(x, |a, b| *a += w * b);
                }
            }
            (masses[g] / total, sum / masses[g])
        })
        .collect())
}

/// Stage 1 CM-step: `π_g = N_g / N`, `M_g = Σ_i ẑ_ig X_i / N_g`.
pub fn stage1_update(
    data: &DataSet3D,
    params: &MixtureParams,
    resp: &ResponsibilityMatrix,
    limits: &StageLimits,
) -> Result<MixtureParams> {
    check_resp(data, params, resp)?;
    let means = weighted_means(data, resp, limits)?;
    let components = params
        .components()
        .iter()
        .zip(means)
        .map(|(c, (weight, location))| {
            ComponentParams::from_scales(
                weight,
                location,
                c.row_scale().clone(),
                c.col_scale().clone(),
            )
        })
        .collect();
    Ok(MixtureParams::from_components_unchecked(components))
}

/// Sufficient statistics of one loading/noise CM-step.
struct LoadingStats {
    // Σ_i z·(residual products)·aᵀ, d × k
    cross: DMatrix<f64>,
    // Σ_i z·b, k × k
    second: DMatrix<f64>,
    // Σ_i z·diag(residual quadratic), d
    quad: DVector<f64>,
}

impl std::ops::AddAssign for LoadingStats {
    fn add_assign(&mut self, rhs: Self) {
        self.cross += rhs.cross;
        self.second += rhs.second;
        self.quad += rhs.quad;
    }
}

/// Solves the CM-step `L = cross·second⁻¹`, `noise = (quad − rowsum(L ∘ cross)) / (mass·m)`.
fn solve_loading(
    stats: &LoadingStats,
    mass: f64,
    other_dim: usize,
    floor: f64,
    what: &str,
    g: usize,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let k = stats.second.ncols();
    let loading = if k == 0 {
        DMatrix::zeros(stats.cross.nrows(), 0)
    } else {
        let chol = crate::matnorm::symmetrize(stats.second.clone())
            .cholesky()
            .ok_or_else(|| {
                Error::Degenerate(format!(
                    "accumulated second moment for {what} of component {} is singular",
                    g + 1
                ))
            })?;
        chol.solve(&stats.cross.transpose()).transpose()
    };
    let denom = mass * other_dim as f64;
    let mut noise = DVector::zeros(stats.quad.len());
    for i in 0..noise.len() {
        let explained: f64 = (0..k).map(|c| loading[(i, c)] * stats.cross[(i, c)]).sum();
        let v = (stats.quad[i] - explained) / denom;
        if !v.is_finite() || loading.row(i).iter().any(|x| !x.is_finite()) {
            return Err(Error::Degenerate(format!(
                "{what} update of component {} is not finite",
                g + 1
            )));
        }
        noise[i] = v.max(floor);
    }
    Ok((loading, noise))
}

/// Stage 2 CM-step: new `A_g` and `Σ_g` from the column-direction latent moments,
/// holding `M_g`, `B_g`, `Ψ_g` at their current values.
pub fn stage2_update(
    data: &DataSet3D,
    params: &MixtureParams,
    resp: &ResponsibilityMatrix,
    limits: &StageLimits,
) -> Result<MixtureParams> {
    check_resp(data, params, resp)?;
    let masses = checked_masses(resp, limits)?;
    let (n, p, q, _) = params.dims();
    let mut components = Vec::with_capacity(params.groups());
    for (g, comp) in params.components().iter().enumerate() {
        let weights: Vec<f64> = resp.values().column(g).iter().copied().collect();
        let stats = weighted_sum(
            data,
            &weights,
            || LoadingStats {
                cross: DMatrix::zeros(n, q),
                second: DMatrix::zeros(q, q),
                quad: DVector::zeros(n),
            },
            |acc, w, x| {
                let resid = x - comp.location();
                let (a_b, b_b, resid_col) = column_moments(&resid, comp);
                acc.cross.gemm(w, &resid_col, &a_b.transpose(), 1.0);
                acc.second.zip_apply(&b_b, |a, b| *a += w * b);
                for i in 0..n {
                    acc.quad[i] += w * resid_col.row(i).dot(&resid.row(i));
                }
            },
        );
        let (a, sigma) = solve_loading(&stats, masses[g], p, limits.floor, "A/Σ", g)?;
        let row_scale = StructuredScale::new(sigma, a)?;
        components.push(ComponentParams::from_scales(
            comp.weight(),
            comp.location().clone(),
            row_scale,
            comp.col_scale().clone(),
        ));
    }
    Ok(MixtureParams::from_components_unchecked(components))
}

/// Stage 3 CM-step: new `B_g` and `Ψ_g` from the row-direction latent moments.
pub fn stage3_update(
    data: &DataSet3D,
    params: &MixtureParams,
    resp: &ResponsibilityMatrix,
    limits: &StageLimits,
) -> Result<MixtureParams> {
    check_resp(data, params, resp)?;
    let masses = checked_masses(resp, limits)?;
    let (n, p, _, r) = params.dims();
    let mut components = Vec::with_capacity(params.groups());
    for (g, comp) in params.components().iter().enumerate() {
        let weights: Vec<f64> = resp.values().column(g).iter().copied().collect();
        let stats = weighted_sum(
            data,
            &weights,
            || LoadingStats {
                cross: DMatrix::zeros(p, r),
                second: DMatrix::zeros(r, r),
                quad: DVector::zeros(p),
            },
            |acc, w, x| {
                let resid = x - comp.location();
                let (a_a, b_a, row_resid) = row_moments(&resid, comp);
                acc.cross.gemm(w, &row_resid.transpose(), &a_a, 1.0);
                acc.second.zip_apply(&b_a, |a, b| *a += w * b);
                for j in 0..p {
                    acc.quad[j] += w * row_resid.column(j).dot(&resid.column(j));
                }
            },
        );
        let (b, psi) = solve_loading(&stats, masses[g], n, limits.floor, "B/Ψ", g)?;
        let col_scale = StructuredScale::new(psi, b)?;
        components.push(ComponentParams::from_scales(
            comp.weight(),
            comp.location().clone(),
            comp.row_scale().clone(),
            col_scale,
        ));
    }
    Ok(MixtureParams::from_components_unchecked(components))
}

/// One full AECM cycle starting from `params` with responsibilities `resp`.
pub fn aecm_cycle(
    data: &DataSet3D,
    params: &MixtureParams,
    resp: &ResponsibilityMatrix,
    limits: &StageLimits,
) -> Result<MixtureParams> {
    let stage1 = stage1_update(data, params, resp, limits)?;
    let (resp, _) = expectation(data, &stage1)?;
    let stage2 = stage2_update(data, &stage1, &resp, limits)?;
    let (resp, _) = expectation(data, &stage2)?;
    stage3_update(data, &stage2, &resp, limits)
}

/// State of a single AECM run.
struct Run {
    params: MixtureParams,
    resp: ResponsibilityMatrix,
    log_lik: f64,
    trace: Vec<f64>,
    best: Option<(MixtureParams, ResponsibilityMatrix, f64)>,
    iterations: usize,
    check: Option<AitkenCheck>,
}

impl Run {
    fn new(data: &DataSet3D, init: MixtureParams) -> Result<Self> {
        let (resp, log_lik) = expectation(data, &init)?;
        Ok(Self {
            params: init,
            resp,
            log_lik,
            trace: vec![log_lik],
            best: None,
            iterations: 0,
            check: None,
        })
    }

    fn step(&mut self, data: &DataSet3D, limits: &StageLimits) -> Result<()> {
        let next = aecm_cycle(data, &self.params, &self.resp, limits)?;
        let (resp, log_lik) = expectation(data, &next)?;
        let previous = std::mem::replace(&mut self.params, next);
        let previous_resp = std::mem::replace(&mut self.resp, resp);
        if log_lik < self.log_lik {
            // keep the better state in case the run ends here
            let best_ll = self.best.as_ref().map_or(f64::NEG_INFINITY, |b| b.2);
            if self.log_lik > best_ll {
                self.best = Some((previous, previous_resp, self.log_lik));
            }
        }
        self.log_lik = log_lik;
        self.trace.push(log_lik);
        self.iterations += 1;
        Ok(())
    }

    fn burn_in(&mut self, data: &DataSet3D, config: &FitConfig) -> Result<()> {
        let limits = config.limits();
        for _ in 0..config.burn_in.min(config.max_iters) {
            self.step(data, &limits)?;
        }
        Ok(())
    }

    fn finish(mut self, data: &DataSet3D, config: &FitConfig) -> Result<FitResult> {
        let limits = config.limits();
        let epsilon = config.epsilon_rel * self.log_lik.abs();
        let mut converged = false;
        loop {
            let check = aitken_stop(&self.trace, epsilon);
            self.check = Some(check);
            if check.decision == AitkenDecision::Stop {
                converged = true;
                break;
            }
            if self.iterations >= config.max_iters {
                break;
            }
            self.step(data, &limits)?;
        }
        let (params, resp, log_lik) = match self.best {
            Some(best) if best.2 > self.log_lik => best,
            _ => (self.params, self.resp, self.log_lik),
        };
        let check = self.check.expect("checked at least once");
        Ok(FitResult {
            params,
            resp,
            convergence: ConvergenceState {
                trace: self.trace,
                acceleration: check.acceleration,
                asymptote: check.asymptote,
                epsilon: Some(epsilon),
            },
            log_lik,
            converged,
            iterations: self.iterations,
            failed_starts: Vec::new(),
        })
    }
}

fn check_init(data: &DataSet3D, config: &FitConfig, init: &MixtureParams) -> Result<()> {
    config.validate(data)?;
    let (n, p) = data.dims();
    let want = (n, p, config.q, config.r);
    if init.dims() != want || init.groups() != config.groups {
        return Err(Error::Dimension(format!(
            "initial parameters have G = {} and (n,p,q,r) = {:?}, configuration asks for G = {} and {want:?}",
            init.groups(),
            init.dims(),
            config.groups
        )));
    }
    Ok(())
}

/// Runs burn-in, fixes `ε` from the log-likelihood reached, then iterates until the
/// Aitken rule stops the run or `max_iters` cycles have been spent.
pub fn fit_once(data: &DataSet3D, config: &FitConfig, init: MixtureParams) -> Result<FitResult> {
    check_init(data, config, &init)?;
    let mut run = Run::new(data, init)?;
    run.burn_in(data, config)?;
    run.finish(data, config)
}

/// Random starting values for start number `start`.
///
/// Unlabeled responsibilities are drawn from a flat Dirichlet (labeled rows are one-hot)
/// and one stage-1 pass gives `π`, `M`. `Σ` takes the row mean squares of the weighted
/// residuals and `Ψ` the column mean squares divided by their overall mean, so that
/// `Σ ⊗ Ψ` has the scale of the data. Loadings are i.i.d. normal: `A` scaled by
/// `0.1·s` with `s` the data standard deviation, `B` by `0.1`.
pub fn random_init(data: &DataSet3D, config: &FitConfig, start: usize) -> Result<MixtureParams> {
    config.validate(data)?;
    let groups = config.groups;
    let limits = config.limits();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(start as u64);

    let mut values = DMatrix::zeros(data.len(), groups);
    for i in 0..data.len() {
        match data.label(i) {
            0 => {
                let draws: Vec<f64> = (0..groups).map(|_| rng.sample::<f64, _>(Exp1)).collect();
                let total: f64 = draws.iter().sum();
                for (g, d) in draws.into_iter().enumerate() {
                    values[(i, g)] = d / total;
                }
            }
            l => values[(i, l - 1)] = 1.0,
        }
    }
    let resp = ResponsibilityMatrix::from_values_unchecked(values);
    let means = weighted_means(data, &resp, &limits)?;

    let (n, p) = data.dims();
    let count = (data.len() * n * p) as f64;
    let grand_mean = data.iter().map(|x| x.sum()).sum::<f64>() / count;
    let spread = (data
        .iter()
        .map(|x| x.iter().map(|v| (v - grand_mean).powi(2)).sum::<f64>())
        .sum::<f64>()
        / count)
        .sqrt()
        .max(config.floor.sqrt());

    let mut components = Vec::with_capacity(groups);
    for (g, (weight, location)) in means.into_iter().enumerate() {
        let mass: f64 = resp.values().column(g).sum();
        let mut sq = DMatrix::<f64>::zeros(n, p);
        for (i, x) in data.iter().enumerate() {
            let z = resp.get(i, g);
            if z > 0.0 {
                let d = x - &location;
                sq += d.component_mul(&d) * z;
            }
        }
        sq /= mass;
        let overall = sq.mean().max(config.floor);
        let sigma = DVector::from_fn(n, |i, _| sq.row(i).mean().max(config.floor));
        let psi = DVector::from_fn(p, |j, _| (sq.column(j).mean() / overall).max(config.floor));
        let a = DMatrix::from_fn(n, config.q, |_, _| {
            0.1 * spread * rng.sample::<f64, _>(StandardNormal)
        });
        let b = DMatrix::from_fn(p, config.r, |_, _| {
            0.1 * rng.sample::<f64, _>(StandardNormal)
        });
        components.push(ComponentParams::new(weight, location, a, b, sigma, psi)?);
    }
    Ok(MixtureParams::from_components_unchecked(components))
}

/// emEM: `n_starts` random starts run for `burn_in` cycles each; the start with the
/// highest log-likelihood continues to convergence. A start that fails is recorded and
/// the next best survivor is tried.
pub fn fit_multi_start(data: &DataSet3D, config: &FitConfig) -> Result<FitResult> {
    config.validate(data)?;
    let outcomes: Vec<Result<Run>> = (0..config.n_starts)
        .into_par_iter()
        .map(|start| {
            let init = random_init(data, config, start)?;
            let mut run = Run::new(data, init)?;
            run.burn_in(data, config)?;
            Ok(run)
        })
        .collect();

    let mut failures = Vec::new();
    let mut survivors = Vec::new();
    for (start, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(run) => survivors.push((start, run)),
            Err(e) => failures.push(format!("start {}: {e}", start + 1)),
        }
    }
    // highest burn-in log-likelihood first; ties keep start order
    survivors.sort_by(|a, b| b.1.log_lik.total_cmp(&a.1.log_lik));
    for (start, run) in survivors {
        match run.finish(data, config) {
            Ok(mut result) => {
                result.failed_starts = failures;
                return Ok(result);
            }
            Err(e) => failures.push(format!("start {}: {e}", start + 1)),
        }
    }
    Err(Error::AllStartsFailed(failures))
}
