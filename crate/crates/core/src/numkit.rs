//! Small dense linear-algebra kernel.
//!
//! Dimensions in this crate are tiny (the stacked parameter rarely exceeds a
//! few dozen entries), so everything is dense and backed by `nalgebra`.
//! Singularity is judged by the 2-norm condition number, computed exactly
//! from the singular values.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Matrices with a condition number above this are treated as singular.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Tolerance for symmetry checks, relative to `max(1, max |m_ij|)`.
pub const SYMMETRY_TOL: f64 = 1e-8;

pub fn ensure_finite_matrix(m: &Matrix, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteEvaluation(format!("{what} has non-finite entries")))
    }
}

pub fn ensure_finite_vector(v: &Vector, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteEvaluation(format!("{what} has non-finite entries")))
    }
}

/// Builds a matrix from row slices, rejecting ragged or non-finite input.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<Matrix> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if let Some(bad) = rows.iter().find(|r| r.len() != ncols) {
        return Err(Error::DimensionMismatch {
            expected: ncols,
            actual: bad.len(),
            context: "matrix row length",
        });
    }
    let m = Matrix::from_fn(nrows, ncols, |i, j| rows[i][j]);
    ensure_finite_matrix(&m, "matrix")?;
    Ok(m)
}

pub fn matrix_to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

/// 2-norm condition number; infinite for exactly singular input.
pub fn condition_number(a: &Matrix) -> f64 {
    if a.is_empty() {
        return 1.0;
    }
    let sv = a.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solves `a x = b` by LU with partial pivoting.
pub fn solve_linear(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch {
            expected: a.nrows(),
            actual: a.ncols(),
            context: "solve_linear: square coefficient matrix",
        });
    }
    if b.nrows() != a.nrows() {
        return Err(Error::DimensionMismatch {
            expected: a.nrows(),
            actual: b.nrows(),
            context: "solve_linear: right-hand side rows",
        });
    }
    ensure_finite_matrix(a, "coefficient matrix")?;
    ensure_finite_matrix(b, "right-hand side")?;
    if a.is_empty() {
        return Ok(Matrix::zeros(0, b.ncols()));
    }
    let condition = condition_number(a);
    if !(condition <= CONDITION_LIMIT) {
        return Err(Error::SingularMatrix { condition });
    }
    a.clone()
        .lu()
        .solve(b)
        .ok_or(Error::SingularMatrix { condition: f64::INFINITY })
}

pub fn solve_vector(a: &Matrix, b: &Vector) -> Result<Vector> {
    let x = solve_linear(a, &Matrix::from_column_slice(b.len(), 1, b.as_slice()))?;
    Ok(x.column(0).into_owned())
}

pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

fn asymmetry(m: &Matrix) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

fn check_symmetric(m: &Matrix) -> Result<()> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch {
            expected: m.nrows(),
            actual: m.ncols(),
            context: "symmetric matrix must be square",
        });
    }
    let scale = m.amax().max(1.0);
    let asym = asymmetry(m);
    if asym > SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    Ok(())
}

/// Inverse of a (numerically) symmetric matrix. The input is symmetrized
/// first and the output is symmetrized again.
pub fn sym_inverse(m: &Matrix) -> Result<Matrix> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch {
            expected: m.nrows(),
            actual: m.ncols(),
            context: "sym_inverse: square matrix",
        });
    }
    let s = symmetrize(m);
    let inv = solve_linear(&s, &Matrix::identity(s.nrows(), s.ncols()))?;
    Ok(symmetrize(&inv))
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &Matrix) -> Result<f64> {
    check_symmetric(m)?;
    ensure_finite_matrix(m, "eigenvalue input")?;
    if m.is_empty() {
        return Ok(f64::INFINITY);
    }
    let eig = symmetrize(m).symmetric_eigenvalues();
    Ok(eig.min())
}

/// Default central-difference step for a point `x`.
pub fn default_step(x: &Vector, rel: f64) -> f64 {
    rel * x.amax().max(1.0)
}

/// Central-difference Jacobian of `f` at `x`. Column `j` is
/// `(f(x + h e_j) - f(x - h e_j)) / (2h)`.
pub fn finite_diff_jacobian<F>(f: F, x: &Vector, h: f64) -> Result<Matrix>
where
    F: Fn(&Vector) -> Result<Vector>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidInput(format!("finite-difference step must be positive, got {h}")));
    }
    let f0 = f(x)?;
    ensure_finite_vector(&f0, "function value")?;
    let mut jac = Matrix::zeros(f0.len(), x.len());
    let mut xp = x.clone();
    for j in 0..x.len() {
        let orig = xp[j];
        xp[j] = orig + h;
        let fp = f(&xp)?;
        xp[j] = orig - h;
        let fm = f(&xp)?;
        xp[j] = orig;
        ensure_finite_vector(&fp, "function value")?;
        ensure_finite_vector(&fm, "function value")?;
        if fp.len() != f0.len() || fm.len() != f0.len() {
            return Err(Error::DimensionMismatch {
                expected: f0.len(),
                actual: fp.len(),
                context: "finite_diff_jacobian output length",
            });
        }
        jac.set_column(j, &((fp - fm) / (2.0 * h)));
    }
    Ok(jac)
}

/// Entrywise max-abs norm.
pub fn max_abs(m: &Matrix) -> f64 {
    if m.is_empty() {
        0.0
    } else {
        m.amax()
    }
}
