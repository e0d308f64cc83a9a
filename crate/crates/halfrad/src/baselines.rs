//! Greedy and non-convex baselines: iterative hard thresholding and
//! orthogonal matching pursuit, with full iterate traces.
//!
//! These are the methods the semi-random instances in [`crate::ensembles`]
//! are built to break; the traces exist so benchmarks can show *how* they
//! fail (support never found, residuals growing), not just that they do.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::{dot, DenseMatrix};
use crate::vecops::{hard_threshold, l2_norm, linf_norm};

/// Why a baseline run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Termination {
    Completed,
    /// Residual infinity norm exceeded `10^6` times its initial value.
    Diverged,
}

/// Per-iteration log of a baseline run. Residuals are recomputed exactly
/// from the iterate each iteration.
#[derive(Debug, Clone, Serialize)]
pub struct BaselineTrace {
    pub iterates: Vec<Vec<f64>>,
    pub residual_l2: Vec<f64>,
    pub residual_linf: Vec<f64>,
    /// OMP: column selected at each round.
    pub selected: Vec<usize>,
    pub termination: Termination,
}

impl BaselineTrace {
    pub fn final_iterate(&self) -> Option<&[f64]> {
        self.iterates.last().map(|x| x.as_slice())
    }
}

/// Iterative hard thresholding:
/// `x_{t+1} = H_s(x_t + (1/n) A^T (b - A x_t))`.
pub fn iht(a: &DenseMatrix, b: &[f64], s: usize, iters: usize) -> Result<BaselineTrace> {
    if b.len() != a.nrows() {
        return Err(Error::dim(format!(
            "iht: {} responses vs {} rows",
            b.len(),
            a.nrows()
        )));
    }
    if s == 0 || s > a.ncols() {
        return Err(Error::arg(format!("iht: s ({s}) out of range")));
    }
    if iters == 0 {
        return Err(Error::arg("iht needs at least one iteration"));
    }

    let n = a.nrows() as f64;
    let mut x = vec![0.0; a.ncols()];
    let initial_linf = linf_norm(b).max(f64::MIN_POSITIVE);
    let mut trace = BaselineTrace {
        iterates: Vec::with_capacity(iters),
        residual_l2: Vec::with_capacity(iters),
        residual_linf: Vec::with_capacity(iters),
        selected: Vec::new(),
        termination: Termination::Completed,
    };

    for _ in 0..iters {
        let ax = a.mul_vec(&x)?;
        let residual: Vec<f64> = b.iter().zip(&ax).map(|(bi, axi)| bi - axi).collect();
        let gradient = a.transpose_mul_vec(&residual)?;
        let stepped: Vec<f64> = x
            .iter()
            .zip(&gradient)
            .map(|(xi, gi)| xi + gi / n)
            .collect();
        x = hard_threshold(&stepped, s)?;

        let ax = a.mul_vec(&x)?;
        let residual: Vec<f64> = b.iter().zip(&ax).map(|(bi, axi)| bi - axi).collect();
        trace.iterates.push(x.clone());
        trace.residual_l2.push(l2_norm(&residual));
        trace.residual_linf.push(linf_norm(&residual));
        if linf_norm(&residual) > 1e6 * initial_linf {
            trace.termination = Termination::Diverged;
            break;
        }
    }
    Ok(trace)
}

/// Orthogonal matching pursuit: greedily select the column maximizing
/// `|<c_j, r>| / ||c_j||^2` (ties toward the lower index), refit by least
/// squares on the selected columns, repeat `s` times.
pub fn omp(a: &DenseMatrix, b: &[f64], s: usize) -> Result<BaselineTrace> {
    if b.len() != a.nrows() {
        return Err(Error::dim(format!(
            "omp: {} responses vs {} rows",
            b.len(),
            a.nrows()
        )));
    }
    if s == 0 || s > a.ncols() {
        return Err(Error::arg(format!("omp: s ({s}) out of range")));
    }
    let n = a.nrows();
    let d = a.ncols();
    let columns: Vec<Vec<f64>> = (0..d).map(|j| a.column(j)).collect();
    let col_norm_sq: Vec<f64> = columns.iter().map(|c| dot(c, c)).collect();

    let mut residual = b.to_vec();
    let mut selected: Vec<usize> = Vec::with_capacity(s);
    let mut trace = BaselineTrace {
        iterates: Vec::with_capacity(s),
        residual_l2: Vec::with_capacity(s),
        residual_linf: Vec::with_capacity(s),
        selected: Vec::with_capacity(s),
        termination: Termination::Completed,
    };

    for _round in 0..s {
        let mut best: Option<(f64, usize)> = None;
        for j in 0..d {
            if selected.contains(&j) {
                continue;
            }
            if col_norm_sq[j] == 0.0 {
                return Err(Error::ZeroColumn(j));
            }
            let score = dot(&columns[j], &residual).abs() / col_norm_sq[j];
            let better = match best {
                None => true,
                Some((score_best, _)) => score > score_best,
            };
            if better {
                best = Some((score, j));
            }
        }
        let (_, j) = best.ok_or_else(|| Error::arg("omp: no selectable column"))?;
        selected.push(j);
        trace.selected.push(j);

        let coefficients = least_squares(&columns, &selected, b)?;
        let mut x = vec![0.0; d];
        for (&jj, &c) in selected.iter().zip(&coefficients) {
            x[jj] = c;
        }
        residual = (0..n)
            .map(|i| {
                let fit: f64 = selected
                    .iter()
                    .zip(&coefficients)
                    .map(|(&jj, &c)| c * columns[jj][i])
                    .sum();
                b[i] - fit
            })
            .collect();
        trace.iterates.push(x);
        trace.residual_l2.push(l2_norm(&residual));
        trace.residual_linf.push(linf_norm(&residual));
    }
    Ok(trace)
}

/// Least-squares fit of `b` on the selected columns via normal equations
/// with a pivot guard.
fn least_squares(columns: &[Vec<f64>], selected: &[usize], b: &[f64]) -> Result<Vec<f64>> {
    let k = selected.len();
    let mut gram = vec![0.0; k * k];
    let mut rhs = vec![0.0; k];
    for (p, &jp) in selected.iter().enumerate() {
        rhs[p] = dot(&columns[jp], b);
        for (q, &jq) in selected.iter().enumerate().skip(p) {
            let g = dot(&columns[jp], &columns[jq]);
            gram[p * k + q] = g;
            gram[q * k + p] = g;
        }
    }
    let scale = gram
        .iter()
        .fold(0.0f64, |m, x| m.max(x.abs()))
        .max(f64::MIN_POSITIVE);

    // Gaussian elimination with partial pivoting.
    let mut x = rhs;
    for col in 0..k {
        let mut pivot_row = col;
        for row in col + 1..k {
            if gram[row * k + col].abs() > gram[pivot_row * k + col].abs() {
                pivot_row = row;
            }
        }
        let pivot = gram[pivot_row * k + col];
        if pivot.abs() <= 1e-12 * scale {
            return Err(Error::RankDeficient { pivot });
        }
        if pivot_row != col {
            for j in 0..k {
                gram.swap(col * k + j, pivot_row * k + j);
            }
            x.swap(col, pivot_row);
        }
        for row in col + 1..k {
            let factor = gram[row * k + col] / gram[col * k + col];
            if factor == 0.0 {
                continue;
            }
            for j in col..k {
                gram[row * k + j] -= factor * gram[col * k + j];
            }
            x[row] -= factor * x[col];
        }
    }
    for col in (0..k).rev() {
        let mut acc = x[col];
        for j in col + 1..k {
            acc -= gram[col * k + j] * x[j];
        }
        x[col] = acc / gram[col * k + col];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensembles::{iht_breaker, omp_breaker};

    fn scaled_identity(d: usize, scale: f64) -> DenseMatrix {
        let mut data = vec![0.0; d * d];
        for i in 0..d {
            data[i * d + i] = scale;
        }
        DenseMatrix::from_rows_vec(d, d, data).unwrap()
    }

    #[test]
    fn iht_one_step_on_scaled_orthonormal_columns() {
        // (1/n) A^T A = I when A = sqrt(n) I, so one gradient step followed
        // by thresholding is exact.
        let d = 8;
        let a = scaled_identity(d, (d as f64).sqrt());
        let mut x_star = vec![0.0; d];
        x_star[2] = 1.5;
        x_star[5] = -0.5;
        let b = a.mul_vec(&x_star).unwrap();
        let trace = iht(&a, &b, 2, 3).unwrap();
        for (xi, ti) in trace.iterates[0].iter().zip(&x_star) {
            assert!((xi - ti).abs() < 1e-12);
        }
        assert!(trace.residual_l2[0] < 1e-12);
        assert_eq!(trace.termination, Termination::Completed);
    }

    #[test]
    fn iht_with_full_sparsity_is_plain_gradient_descent() {
        let a = scaled_identity(4, 2.0);
        let b = vec![2.0, -4.0, 0.0, 6.0];
        let trace = iht(&a, &b, 4, 1).unwrap();
        // x_1 = 0 + (1/n) A^T b with no thresholding
        let expected = a.transpose_mul_vec(&b).unwrap();
        for (xi, ei) in trace.iterates[0].iter().zip(&expected) {
            assert!((xi - ei / 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn iht_iterates_stay_sparse() {
        let inst = iht_breaker(8, 20, 4, 33).unwrap();
        let trace = iht(&inst.a, &inst.b, 1, 10).unwrap();
        for x in &trace.iterates {
            assert!(x.iter().filter(|v| **v != 0.0).count() <= 1);
        }
    }

    #[test]
    fn iht_breaker_defeats_iht() {
        let inst = iht_breaker(20, 60, 10, 34).unwrap();
        let trace = iht(&inst.a, &inst.b, 1, 20).unwrap();
        // support never lands on coordinate 0
        for x in &trace.iterates {
            assert_eq!(x[0], 0.0, "IHT found the true support");
        }
        let growth = trace.residual_linf.last().unwrap()
            / linf_norm(&inst.b).max(f64::MIN_POSITIVE);
        assert!(growth >= 10.0, "residual growth only {growth}");
    }

    #[test]
    fn omp_identity_selects_support_in_magnitude_order() {
        let d = 6;
        let a = scaled_identity(d, 1.0);
        let mut b = vec![0.0; d];
        b[1] = -3.0;
        b[4] = 2.0;
        let trace = omp(&a, &b, 2).unwrap();
        assert_eq!(trace.selected, vec![1, 4]);
        assert!(trace.residual_l2.last().unwrap() < &1e-12);
    }

    #[test]
    fn omp_single_column_match() {
        let a = DenseMatrix::from_rows_vec(3, 2, vec![1.0, 0.5, 2.0, -0.5, -1.0, 0.25]).unwrap();
        let b = a.column(1);
        let trace = omp(&a, &b, 1).unwrap();
        assert_eq!(trace.selected, vec![1]);
        assert!(trace.residual_l2[0] < 1e-12);
    }

    #[test]
    fn omp_residual_orthogonal_and_nonincreasing() {
        let inst = omp_breaker(10, 30, 10, 35).unwrap();
        let trace = omp(&inst.a, &inst.b, 10).unwrap();
        for w in trace.residual_l2.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
        // residual after the final refit is orthogonal to all selected columns
        let x = trace.final_iterate().unwrap();
        let ax = inst.a.mul_vec(x).unwrap();
        let residual: Vec<f64> = inst.b.iter().zip(&ax).map(|(bi, axi)| bi - axi).collect();
        for &j in &trace.selected {
            let col = inst.a.column(j);
            assert!(dot(&col, &residual).abs() < 1e-8 * l2_norm(&col).max(1.0));
        }
    }

    #[test]
    fn omp_breaker_defeats_omp() {
        let inst = omp_breaker(30, 90, 10, 36).unwrap();
        let j: usize = inst.meta.extra["planted_column"].parse().unwrap();
        let trace = omp(&inst.a, &inst.b, 10).unwrap();
        assert_eq!(trace.selected[0], j, "OMP dodged the planted column");
    }

    #[test]
    fn omp_rejects_zero_column() {
        let a = DenseMatrix::from_rows_vec(2, 2, vec![1.0, 0.0, 2.0, 0.0]).unwrap();
        let b = vec![1.0, 2.0];
        match omp(&a, &b, 2) {
            Err(Error::ZeroColumn(1)) => {}
            other => panic!("expected zero-column rejection, got {other:?}"),
        }
    }
}
