//! Model selection over `(G, q, r)` by BIC.

use std::fmt::Write as _;
use std::ops::RangeInclusive;

use rayon::prelude::*;

use crate::aecm::{fit_multi_start, FitConfig, FitResult};
use crate::data::DataSet3D;
use crate::error::{Error, Result};

/// Free parameters of a `G`-component model:
/// `(G−1) + G·[np + (nq + n − q(q−1)/2) + (pr + p − r(r−1)/2)]`.
pub fn count_params(groups: usize, n: usize, p: usize, q: usize, r: usize) -> Result<u64> {
    if groups == 0 || q >= n || r >= p {
        return Err(Error::Input(format!(
            "parameter count needs G >= 1, q < n, r < p; got G = {groups}, n = {n}, p = {p}, q = {q}, r = {r}"
        )));
    }
    let (g, n, p, q, r) = (groups as u64, n as u64, p as u64, q as u64, r as u64);
    let row = n * q + n - q * q.saturating_sub(1) / 2;
    let col = p * r + p - r * r.saturating_sub(1) / 2;
    Ok(g - 1 + g * (n * p + row + col))
}

/// Reduction in free covariance parameters of `Σ + AAᵀ` (d×d, k factors) relative to
/// an unrestricted `d×d` covariance: `((d−k)² − (d+k)) / 2`.
pub fn covariance_reduction(d: usize, k: usize) -> i64 {
    let (d, k) = (d as i64, k as i64);
    ((d - k).pow(2) - (d + k)) / 2
}

/// Whether `k` factors still give a genuine reduction for dimension `d`.
pub fn reduces(d: usize, k: usize) -> bool {
    k < d && covariance_reduction(d, k) > 0
}

/// `2ℓ − ρ ln N`; larger is better.
pub fn bic(log_lik: f64, rho: u64, nobs: usize) -> f64 {
    2.0 * log_lik - rho as f64 * (nobs as f64).ln()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridSpec {
    pub groups: RangeInclusive<usize>,
    pub q: RangeInclusive<usize>,
    pub r: RangeInclusive<usize>,
    /// Grow the factor ranges while the winner sits on their upper edge.
    pub expand: bool,
}

impl GridSpec {
    pub fn new(
        groups: RangeInclusive<usize>,
        q: RangeInclusive<usize>,
        r: RangeInclusive<usize>,
    ) -> Self {
        Self {
            groups,
            q,
            r,
            expand: true,
        }
    }

    pub fn validate(&self, n: usize, p: usize) -> Result<()> {
        if self.groups.is_empty() || self.q.is_empty() || self.r.is_empty() {
            return Err(Error::Input("grid ranges must be nonempty".into()));
        }
        if *self.groups.start() == 0 {
            return Err(Error::Input("G range must start at 1 or more".into()));
        }
        if *self.q.end() >= n || *self.r.end() >= p {
            return Err(Error::Input(format!(
                "grid needs q < n = {n} and r < p = {p}, got q up to {} and r up to {}",
                self.q.end(),
                self.r.end()
            )));
        }
        Ok(())
    }

    fn cells(&self) -> Vec<(usize, usize, usize)> {
        let mut cells = Vec::new();
        for g in self.groups.clone() {
            for q in self.q.clone() {
                for r in self.r.clone() {
                    cells.push((g, q, r));
                }
            }
        }
        cells
    }
}

#[derive(Debug, Clone)]
pub struct SelectionRecord {
    pub groups: usize,
    pub q: usize,
    pub r: usize,
    pub log_lik: f64,
    pub rho: u64,
    pub bic: f64,
    pub converged: bool,
    pub fit: FitResult,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellFailure {
    pub groups: usize,
    pub q: usize,
    pub r: usize,
    pub cause: String,
}

#[derive(Debug, Clone)]
pub struct Selection {
    /// Successful cells in `(G, q, r)` order.
    pub records: Vec<SelectionRecord>,
    pub failures: Vec<CellFailure>,
    /// Index of the winner in `records`.
    pub best: usize,
    /// Final factor ranges after any expansion.
    pub q_range: RangeInclusive<usize>,
    pub r_range: RangeInclusive<usize>,
}

impl Selection {
    pub fn best(&self) -> &SelectionRecord {
        &self.records[self.best]
    }

    pub fn record(&self, groups: usize, q: usize, r: usize) -> Option<&SelectionRecord> {
        self.records
            .iter()
            .find(|rec| (rec.groups, rec.q, rec.r) == (groups, q, r))
    }

    /// One line per record: `G,q,r,logLik,rho,bic,converged`.
    pub fn table(&self) -> String {
        let mut out = String::from("G,q,r,logLik,rho,bic,converged\n");
        for rec in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                rec.groups, rec.q, rec.r, rec.log_lik, rec.rho, rec.bic, rec.converged
            );
        }
        out
    }
}

/// Seed for one grid cell; depends only on the base seed and the cell, so the winner
/// does not depend on enumeration order.
pub fn cell_seed(seed: u64, groups: usize, q: usize, r: usize) -> u64 {
    let mut h = seed;
    for v in [groups, q, r] {
        h = splitmix(h ^ (v as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fit_cell(
    data: &DataSet3D,
    base: &FitConfig,
    (groups, q, r): (usize, usize, usize),
) -> std::result::Result<SelectionRecord, CellFailure> {
    let (n, p) = data.dims();
    let config = FitConfig {
        groups,
        q,
        r,
        seed: cell_seed(base.seed, groups, q, r),
        ..base.clone()
    };
    let outcome = count_params(groups, n, p, q, r).and_then(|rho| {
        let fit = fit_multi_start(data, &config)?;
        Ok((rho, fit))
    });
    match outcome {
        Ok((rho, fit)) => Ok(SelectionRecord {
            groups,
            q,
            r,
            log_lik: fit.log_lik,
            rho,
            bic: bic(fit.log_lik, rho, data.len()),
            converged: fit.converged,
            fit,
        }),
        Err(e) => Err(CellFailure {
            groups,
            q,
            r,
            cause: e.to_string(),
        }),
    }
}

// Larger BIC, then fewer parameters, then smaller (G, q, r).
fn better(a: &SelectionRecord, b: &SelectionRecord) -> bool {
    if a.bic != b.bic {
        return a.bic > b.bic;
    }
    if a.rho != b.rho {
        return a.rho < b.rho;
    }
    (a.groups, a.q, a.r) < (b.groups, b.q, b.r)
}

fn argmax(records: &[SelectionRecord]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, rec) in records.iter().enumerate() {
        if !rec.bic.is_finite() {
            continue;
        }
        if best.is_none_or(|b| better(rec, &records[b])) {
            best = Some(i);
        }
    }
    best
}

fn fit_cells(
    data: &DataSet3D,
    base: &FitConfig,
    cells: Vec<(usize, usize, usize)>,
    records: &mut Vec<SelectionRecord>,
    failures: &mut Vec<CellFailure>,
) {
    let outcomes: Vec<_> = cells
        .into_par_iter()
        .map(|cell| fit_cell(data, base, cell))
        .collect();
    for outcome in outcomes {
        match outcome {
            Ok(rec) => records.push(rec),
            Err(f) => failures.push(f),
        }
    }
}

/// Fits every cell of the grid and picks the BIC winner. When the winner uses the
/// largest `q` (or `r`) in range, the range grows by one while the next value still
/// reduces the covariance parameter count, and the new cells are fitted.
pub fn grid_search(data: &DataSet3D, grid: &GridSpec, base: &FitConfig) -> Result<Selection> {
    let (n, p) = data.dims();
    grid.validate(n, p)?;

    let mut records = Vec::new();
    let mut failures = Vec::new();
    fit_cells(data, base, grid.cells(), &mut records, &mut failures);

    let mut q_range = grid.q.clone();
    let mut r_range = grid.r.clone();
    let pick = |records: &[SelectionRecord], failures: &[CellFailure]| {
        argmax(records).ok_or_else(|| {
            Error::Selection(format!(
                "all {} grid cells failed; first cause: {}",
                failures.len(),
                failures.first().map_or("none", |f| f.cause.as_str())
            ))
        })
    };
    let mut best = pick(&records, &failures)?;
    if grid.expand {
        loop {
            let winner = &records[best];
            let grow_q = winner.q == *q_range.end() && reduces(n, winner.q + 1);
            let grow_r = winner.r == *r_range.end() && reduces(p, winner.r + 1);
            if !grow_q && !grow_r {
                break;
            }
            let mut cells = Vec::new();
            if grow_q {
                let q = winner.q + 1;
                for g in grid.groups.clone() {
                    for r in r_range.clone() {
                        cells.push((g, q, r));
                    }
                }
                q_range = *q_range.start()..=q;
            }
            if grow_r {
                let r = winner.r + 1;
                for g in grid.groups.clone() {
                    for q in q_range.clone() {
                        cells.push((g, q, r));
                    }
                }
                r_range = *r_range.start()..=r;
            }
            fit_cells(data, base, cells, &mut records, &mut failures);
            records.sort_by_key(|rec| (rec.groups, rec.q, rec.r));
            best = pick(&records, &failures)?;
        }
    }
    records.sort_by_key(|rec| (rec.groups, rec.q, rec.r));
    failures.sort_by_key(|f| (f.groups, f.q, f.r));
    let best = pick(&records, &failures)?;
    Ok(Selection {
        records,
        failures,
        best,
        q_range,
        r_range,
    })
}
