//! Dense solve utilities shared by the linear estimators.
//!
//! Systems are solved through rank-revealing factorizations (SVD for general
//! square systems with a condition-number guard, Cholesky for ridge/SPD
//! systems), never through explicit inverses.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

use crate::error::{Error, Result};

/// Default guard: systems with a larger condition estimate are rejected.
pub const COND_GUARD: f64 = 1e12;

fn to_na(a: ArrayView2<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn to_na_vec(v: ArrayView1<'_, f64>) -> DVector<f64> {
    DVector::from_fn(v.len(), |i, _| v[i])
}

fn from_na_vec(v: &DVector<f64>) -> Array1<f64> {
    Array1::from_iter(v.iter().copied())
}

fn from_na(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Solves the square system `A x = b` by SVD with a condition-number guard.
pub fn solve_square_guarded(
    a: ArrayView2<'_, f64>,
    b: ArrayView1<'_, f64>,
    guard: f64,
    hint: &str,
) -> Result<Array1<f64>> {
    if a.nrows() != a.ncols() || a.nrows() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "square solve got A {}x{}, b {}",
            a.nrows(),
            a.ncols(),
            b.len()
        )));
    }
    let na = to_na(a);
    let svd = na.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !cond.is_finite() || cond > guard {
        return Err(Error::IllConditioned {
            cond,
            guard,
            hint: hint.to_string(),
        });
    }
    let x = svd
        .solve(&to_na_vec(b), 0.0)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Ok(from_na_vec(&x))
}

/// Condition estimate (ratio of extreme singular values) of a square matrix.
pub fn condition_estimate(a: ArrayView2<'_, f64>) -> f64 {
    let na = to_na(a);
    let svd = na.svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if smin > 0.0 {
        smax / smin
    } else {
        f64::INFINITY
    }
}

/// Solves the symmetric positive-definite system `A x = b` (single RHS) via
/// Cholesky; fails with [`Error::IndefiniteMatrix`] when `A` is not PD.
pub fn cholesky_solve(a: ArrayView2<'_, f64>, b: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
    let na = to_na(a);
    let chol = na.cholesky().ok_or(Error::IndefiniteMatrix)?;
    let x = chol.solve(&to_na_vec(b));
    Ok(from_na_vec(&x))
}

/// Multi-RHS variant of [`cholesky_solve`]: solves `A X = B`.
pub fn cholesky_solve_multi(
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    let na = to_na(a);
    let chol = na.cholesky().ok_or(Error::IndefiniteMatrix)?;
    let x = chol.solve(&to_na(b));
    Ok(from_na(&x))
}

/// Reusable Cholesky factorization of an SPD matrix.
pub struct SpdFactor {
    chol: nalgebra::linalg::Cholesky<f64, nalgebra::Dyn>,
}

impl SpdFactor {
    pub fn new(a: ArrayView2<'_, f64>) -> Result<Self> {
        let chol = to_na(a).cholesky().ok_or(Error::IndefiniteMatrix)?;
        Ok(SpdFactor { chol })
    }

    pub fn solve_vec(&self, b: ArrayView1<'_, f64>) -> Array1<f64> {
        from_na_vec(&self.chol.solve(&to_na_vec(b)))
    }

    pub fn solve_mat(&self, b: ArrayView2<'_, f64>) -> Array2<f64> {
        from_na(&self.chol.solve(&to_na(b)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr1;

    #[test]
    fn solves_well_conditioned_system() {
        let a = ndarray::arr2(&[[2.0, 1.0], [1.0, 3.0]]);
        let b = arr1(&[5.0, 10.0]);
        let x = solve_square_guarded(a.view(), b.view(), COND_GUARD, "").unwrap();
        assert_abs_diff_eq!(x[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(x[1], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn rejects_singular_system() {
        let a = ndarray::arr2(&[[1.0, 2.0], [2.0, 4.0]]);
        let b = arr1(&[1.0, 2.0]);
        match solve_square_guarded(a.view(), b.view(), COND_GUARD, "try ridge") {
            Err(Error::IllConditioned { cond, hint, .. }) => {
                assert!(cond > COND_GUARD);
                assert_eq!(hint, "try ridge");
            }
            other => panic!("expected ill-conditioned error, got {other:?}"),
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = ndarray::arr2(&[[1.0, 0.0], [0.0, -1.0]]);
        assert!(cholesky_solve(a.view(), arr1(&[1.0, 1.0]).view()).is_err());
    }

    #[test]
    fn cholesky_matches_svd_on_spd() {
        let a = ndarray::arr2(&[[4.0, 1.0], [1.0, 3.0]]);
        let b = arr1(&[1.0, 2.0]);
        let x1 = cholesky_solve(a.view(), b.view()).unwrap();
        let x2 = solve_square_guarded(a.view(), b.view(), COND_GUARD, "").unwrap();
        assert_abs_diff_eq!(x1[0], x2[0], epsilon = 1e-12);
        assert_abs_diff_eq!(x1[1], x2[1], epsilon = 1e-12);
    }
}
