//! Partition agreement and parameter-recovery measures.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Contingency counts of truth (rows) against predicted (columns) labels; both label
/// sets are listed in increasing order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    pub truth_labels: Vec<usize>,
    pub predicted_labels: Vec<usize>,
    pub counts: Vec<Vec<usize>>,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> Vec<usize> {
        self.counts.iter().map(|row| row.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<usize> {
        (0..self.predicted_labels.len())
            .map(|j| self.counts.iter().map(|row| row[j]).sum())
            .collect()
    }
}

fn check_pair(truth: &[usize], predicted: &[usize]) -> Result<()> {
    if truth.len() != predicted.len() {
        return Err(Error::Input(format!(
            "label vectors differ in length: {} vs {}",
            truth.len(),
            predicted.len()
        )));
    }
    Ok(())
}

pub fn confusion(truth: &[usize], predicted: &[usize]) -> Result<Confusion> {
    check_pair(truth, predicted)?;
    let index = |labels: &[usize]| -> BTreeMap<usize, usize> {
        let mut map: BTreeMap<usize, usize> = labels.iter().map(|&l| (l, 0)).collect();
        for (i, v) in map.values_mut().enumerate() {
            *v = i;
        }
        map
    };
    let rows = index(truth);
    let cols = index(predicted);
    let mut counts = vec![vec![0; cols.len()]; rows.len()];
    for (t, p) in truth.iter().zip(predicted) {
        counts[rows[t]][cols[p]] += 1;
    }
    Ok(Confusion {
        truth_labels: rows.into_keys().collect(),
        predicted_labels: cols.into_keys().collect(),
        counts,
    })
}

fn pairs(k: usize) -> i128 {
    let k = k as i128;
    k * (k - 1) / 2
}

/// Adjusted Rand index. Evaluated in integer arithmetic up to one final division, so
/// simple cases come out exact.
pub fn ari(truth: &[usize], predicted: &[usize]) -> Result<f64> {
    if truth.len() < 2 {
        return Err(Error::Input("ARI needs at least two observations".into()));
    }
    let table = confusion(truth, predicted)?;
    let index: i128 = table.counts.iter().flatten().map(|&c| pairs(c)).sum();
    let a: i128 = table.row_sums().into_iter().map(pairs).sum();
    let b: i128 = table.col_sums().into_iter().map(pairs).sum();
    let total = pairs(truth.len());
    // (index − ab/total) / ((a+b)/2 − ab/total), scaled by 2·total
    let num = 2 * (index * total - a * b);
    let den = (a + b) * total - 2 * a * b;
    if den == 0 {
        // both partitions trivial (all singletons or one block)
        return Ok(if num == 0 { 1.0 } else { 0.0 });
    }
    Ok(num as f64 / den as f64)
}

/// Misclassification rate under the best one-to-one matching of predicted to true
/// labels.
pub fn mcr(truth: &[usize], predicted: &[usize]) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::Input("MCR needs at least one observation".into()));
    }
    let table = confusion(truth, predicted)?;
    let k = table.truth_labels.len().max(table.predicted_labels.len());
    let cost = DMatrix::from_fn(k, k, |i, j| {
        let c = table
            .counts
            .get(i)
            .and_then(|row| row.get(j))
            .copied()
            .unwrap_or(0);
        -(c as f64)
    });
    let assignment = min_cost_assignment(&cost);
    let matched: f64 = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| -cost[(i, j)])
        .sum();
    Ok(1.0 - matched / truth.len() as f64)
}

/// `max_j Σ_i |w_ij|`.
pub fn mat_one_norm(w: &DMatrix<f64>) -> f64 {
    w.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Minimum-cost assignment of rows to distinct columns (Hungarian method, `O(n²m)`).
/// Requires `rows ≤ cols`; returns the column chosen for each row.
pub fn min_cost_assignment(cost: &DMatrix<f64>) -> Vec<usize> {
    let (n, m) = cost.shape();
    assert!(n <= m, "assignment needs rows <= cols");
    if n == 0 {
        return Vec::new();
    }
    // potentials and matching use 1-based indices with 0 as the virtual column
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=m {
        if owner[j] > 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Matches each true location to a distinct estimated one by minimising the total
/// `‖M_g − M̂_h‖₁`. Returns the estimated index for every true component.
pub fn match_locations(truth: &[DMatrix<f64>], estimated: &[DMatrix<f64>]) -> Result<Vec<usize>> {
    if truth.len() > estimated.len() {
        return Err(Error::Dimension(format!(
            "cannot match {} true components to {} estimated ones",
            truth.len(),
            estimated.len()
        )));
    }
    for m in estimated {
        if truth.first().is_some_and(|t| t.shape() != m.shape()) {
            return Err(Error::Dimension(format!(
                "location shapes differ: {:?} vs {:?}",
                truth[0].shape(),
                m.shape()
            )));
        }
    }
    let cost = DMatrix::from_fn(truth.len(), estimated.len(), |g, h| {
        mat_one_norm(&(&truth[g] - &estimated[h]))
    });
    Ok(min_cost_assignment(&cost))
}

/// `‖M_g − M̂_g‖₁` for every true component after matching.
pub fn location_errors(truth: &[DMatrix<f64>], estimated: &[DMatrix<f64>]) -> Result<Vec<f64>> {
    let matching = match_locations(truth, estimated)?;
    Ok(truth
        .iter()
        .zip(matching)
        .map(|(t, h)| mat_one_norm(&(t - &estimated[h])))
        .collect())
}

/// Sample mean and standard deviation (`n − 1` denominator; 0 for a single value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ari_examples() {
        assert_eq!(ari(&[1, 1, 2, 2], &[1, 1, 2, 2]).unwrap(), 1.0);
        assert_eq!(ari(&[1, 1, 2, 2], &[1, 2, 1, 2]).unwrap(), -0.5);
        assert_eq!(ari(&[1, 1, 2, 2, 3], &[7, 7, 4, 4, 9]).unwrap(), 1.0);
        assert!(ari(&[1], &[1]).is_err());
        assert!(ari(&[1, 2], &[1]).is_err());
    }

    #[test]
    fn ari_against_textbook_value() {
        // contingency [[1,1,0],[1,2,1],[0,0,4]]: index 7, a = 13, b = 14, C(10,2) = 45
        let truth = [1, 1, 2, 2, 2, 2, 3, 3, 3, 3];
        let pred = [1, 2, 1, 2, 2, 3, 3, 3, 3, 3];
        let want = (7.0 - 13.0 * 14.0 / 45.0) / (0.5 * (13.0 + 14.0) - 13.0 * 14.0 / 45.0);
        assert!((ari(&truth, &pred).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn mcr_examples() {
        assert_eq!(mcr(&[1, 1, 2, 2], &[1, 1, 2, 2]).unwrap(), 0.0);
        assert_eq!(mcr(&[1, 1, 2, 2], &[2, 2, 1, 1]).unwrap(), 0.0);
        assert_eq!(mcr(&[1, 1, 2, 2], &[2, 1, 1, 1]).unwrap(), 0.25);
        // extra predicted class: unmatched members count as errors
        assert_eq!(mcr(&[1, 1, 1, 1], &[1, 1, 2, 3]).unwrap(), 0.5);
    }

    #[test]
    fn confusion_examples() {
        let c = confusion(&[1, 1, 2, 2], &[1, 2, 1, 2]).unwrap();
        assert_eq!(c.counts, vec![vec![1, 1], vec![1, 1]]);
        let c = confusion(&[1, 1, 2], &[1, 1, 2]).unwrap();
        assert_eq!(c.counts, vec![vec![2, 0], vec![0, 1]]);
        assert_eq!(c.row_sums(), vec![2, 1]);
        assert_eq!(c.total(), 3);
    }

    #[test]
    fn one_norm_examples() {
        assert_eq!(mat_one_norm(&DMatrix::zeros(3, 2)), 0.0);
        assert_eq!(
            mat_one_norm(&DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 3.0, 4.0])),
            6.0
        );
    }

    #[test]
    fn assignment_small_cases() {
        let c = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0]);
        let a = min_cost_assignment(&c);
        let total: f64 = a.iter().enumerate().map(|(i, &j)| c[(i, j)]).sum();
        assert_eq!(total, 5.0);
        let rect = DMatrix::from_row_slice(2, 3, &[5.0, 1.0, 9.0, 1.0, 5.0, 9.0]);
        assert_eq!(min_cost_assignment(&rect), vec![1, 0]);
    }

    #[test]
    fn matching_locations_follows_permutation() {
        let t = vec![
            DMatrix::from_element(2, 2, 0.0),
            DMatrix::from_element(2, 2, 5.0),
        ];
        let e = vec![
            DMatrix::from_element(2, 2, 5.1),
            DMatrix::from_element(2, 2, -0.2),
        ];
        assert_eq!(match_locations(&t, &e).unwrap(), vec![1, 0]);
        let errs = location_errors(&t, &e).unwrap();
        assert!((errs[0] - 0.4).abs() < 1e-12 && (errs[1] - 0.2).abs() < 1e-12);
    }

    fn permutations(k: usize) -> Vec<Vec<usize>> {
        if k == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(k - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, k - 1);
                out.push(q);
            }
        }
        out
    }

    fn brute_force_mcr(truth: &[usize], pred: &[usize], k: usize) -> f64 {
        let best = permutations(k)
            .into_iter()
            .map(|perm| {
                truth
                    .iter()
                    .zip(pred)
                    .filter(|(&t, &p)| perm[p - 1] == t - 1)
                    .count()
            })
            .max()
            .unwrap();
        1.0 - best as f64 / truth.len() as f64
    }

    proptest! {
        #[test]
        fn relabeling_invariance(
            labels in proptest::collection::vec((1usize..=4, 1usize..=4), 2..40),
            seed in 0usize..24,
        ) {
            let truth: Vec<usize> = labels.iter().map(|l| l.0).collect();
            let pred: Vec<usize> = labels.iter().map(|l| l.1).collect();
            let perm = &permutations(4)[seed];
            let relabeled: Vec<usize> = pred.iter().map(|&l| perm[l - 1] + 10).collect();
            prop_assert_eq!(ari(&truth, &pred).unwrap(), ari(&truth, &relabeled).unwrap());
            prop_assert_eq!(ari(&truth, &pred).unwrap(), ari(&pred, &truth).unwrap());
            prop_assert!((mcr(&truth, &pred).unwrap() - mcr(&truth, &relabeled).unwrap()).abs() < 1e-12);
            prop_assert!((mcr(&truth, &pred).unwrap() - brute_force_mcr(&truth, &pred, 4)).abs() < 1e-12);
        }

        #[test]
        fn perfect_agreement_equivalence(
            labels in proptest::collection::vec(1usize..=3, 4..30),
            noise in proptest::collection::vec(proptest::bool::weighted(0.2), 30),
        ) {
            let pred: Vec<usize> = labels.iter().zip(&noise).map(|(&l, &flip)| if flip { l % 3 + 1 } else { l }).collect();
            let a = ari(&labels, &pred).unwrap();
            let m = mcr(&labels, &pred).unwrap();
            let classes = |v: &[usize]| v.iter().collect::<std::collections::BTreeSet<_>>().len();
            if classes(&labels) == classes(&pred) {
                prop_assert_eq!(a == 1.0, m == 0.0);
            }
        }

        #[test]
        fn one_norm_axioms(
            a in proptest::collection::vec(-10.0f64..10.0, 12),
            b in proptest::collection::vec(-10.0f64..10.0, 12),
            c in -5.0f64..5.0,
        ) {
            let a = DMatrix::from_vec(3, 4, a);
            let b = DMatrix::from_vec(3, 4, b);
            prop_assert!(mat_one_norm(&(&a + &b)) <= mat_one_norm(&a) + mat_one_norm(&b) + 1e-12);
            prop_assert!((mat_one_norm(&(&a * c)) - c.abs() * mat_one_norm(&a)).abs() <= 1e-12 * (1.0 + mat_one_norm(&a)));
            prop_assert_eq!(mat_one_norm(&a) == 0.0, a.iter().all(|v| *v == 0.0));
        }
    }
}
