//! Variance estimators for `ψ̂` built from one set of moment estimates, and
//! the empirical identity diagnostics that justify the score correction.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::eecore::{self, EstimatingFunctions, MomentEstimates, ParamVector, ScoreRows};
use crate::error::{Error, Result};
use crate::numkit::{self, Matrix};

/// Serde adapter writing a matrix as a list of rows.
pub mod matrix_rows {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::numkit::{self, Matrix};

    pub fn serialize<S: Serializer>(m: &Matrix, s: S) -> Result<S::Ok, S::Error> {
        numkit::matrix_to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        numkit::matrix_from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// Serde adapter writing a vector as a plain list.
pub mod vector_list {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::numkit::Vector;

    pub fn serialize<S: Serializer>(v: &Vector, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector, D::Error> {
        Ok(Vector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}

pub const GAP_PASS: f64 = 0.05;
pub const GAP_WARN: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapStatus {
    Pass,
    Warn,
    Fail,
    NotApplicable,
}

impl GapStatus {
    pub fn classify(gap: Option<f64>) -> Self {
        match gap {
            None => GapStatus::NotApplicable,
            Some(g) if g < GAP_PASS => GapStatus::Pass,
            Some(g) if g < GAP_WARN => GapStatus::Warn,
            Some(_) => GapStatus::Fail,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GapStatus::Pass => "pass",
            GapStatus::Warn => "warn",
            GapStatus::Fail => "fail",
            GapStatus::NotApplicable => "n/a",
        }
    }
}

/// Empirical checks of `E∂θU1 = −E U1U2ᵀ`, `E∂θU2 = −E U2U2ᵀ` and of the
/// orthogonality of projection residuals. `None` when there is no nuisance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityDiagnostics {
    pub ddtheta_gap: Option<f64>,
    pub fisher_gap: Option<f64>,
    pub orthogonality_gap: Option<f64>,
}

impl IdentityDiagnostics {
    pub fn statuses(&self) -> [(&'static str, Option<f64>, GapStatus); 3] {
        [
            ("ddtheta_gap", self.ddtheta_gap, GapStatus::classify(self.ddtheta_gap)),
            ("fisher_gap", self.fisher_gap, GapStatus::classify(self.fisher_gap)),
            ("orthogonality_gap", self.orthogonality_gap, GapStatus::classify(self.orthogonality_gap)),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    #[serde(with = "matrix_rows")]
    pub naive: Matrix,
    #[serde(with = "matrix_rows")]
    pub corrected_score: Matrix,
    #[serde(with = "matrix_rows")]
    pub general: Matrix,
    /// Amount subtracted from `naive` to give `corrected_score`.
    #[serde(with = "matrix_rows")]
    pub correction: Matrix,
    /// `Â = (Pₙ U1U2ᵀ)(Pₙ U2U2ᵀ)⁻¹`.
    #[serde(with = "matrix_rows")]
    pub projection_coeff: Matrix,
    pub diagnostics: IdentityDiagnostics,
    pub n: usize,
}

impl VarianceReport {
    /// Covariance blocks with their JSON names.
    pub fn blocks(&self) -> [(&'static str, &Matrix); 3] {
        [
            ("naive", &self.naive),
            ("corrected_score", &self.corrected_score),
            ("general", &self.general),
        ]
    }
}

fn bread_inverse(m: &MomentEstimates) -> Result<Matrix> {
    let p = m.dim_psi();
    numkit::solve_linear(&m.bread, &Matrix::identity(p, p))
}

/// `B⁻¹ X B⁻ᵀ / n`, symmetrized.
fn sandwich(binv: &Matrix, filling: &Matrix, n: usize) -> Matrix {
    numkit::symmetrize(&(binv * filling * binv.transpose())) / n as f64
}

/// `C F⁻¹ Cᵀ`.
fn explained_meat(m: &MomentEstimates, fisher_inv: &Matrix) -> Matrix {
    numkit::symmetrize(&(&m.cross * fisher_inv * m.cross.transpose()))
}

fn fisher_inverse(m: &MomentEstimates) -> Result<Matrix> {
    if m.dim_theta() == 0 {
        return Ok(Matrix::zeros(0, 0));
    }
    numkit::sym_inverse(&m.fisher)
}

/// `B⁻¹ M B⁻ᵀ / n`; ignores nuisance estimation.
pub fn sandwich_naive(m: &MomentEstimates) -> Result<Matrix> {
    Ok(sandwich(&bread_inverse(m)?, &m.meat, m.n))
}

/// `B⁻¹ C F⁻¹ Cᵀ B⁻ᵀ / n`.
pub fn correction_term(m: &MomentEstimates) -> Result<Matrix> {
    let fi = fisher_inverse(m)?;
    Ok(sandwich(&bread_inverse(m)?, &explained_meat(m, &fi), m.n))
}

/// Same as [`correction_term`] with the Fisher information taken from a
/// reported nuisance covariance: `F⁻¹ = n · var̂(θ̂)`.
pub fn correction_term_from_theta_var(m: &MomentEstimates, var_theta: &Matrix) -> Result<Matrix> {
    let q = m.dim_theta();
    if var_theta.nrows() != q || var_theta.ncols() != q {
        return Err(Error::DimensionMismatch {
            expected: q,
            actual: var_theta.nrows(),
            context: "nuisance covariance",
        });
    }
    let fi = numkit::symmetrize(var_theta) * m.n as f64;
    Ok(sandwich(&bread_inverse(m)?, &explained_meat(m, &fi), m.n))
}

/// `B⁻¹ (M − C F⁻¹ Cᵀ) B⁻ᵀ / n`; valid when `U2` is a partial score.
pub fn sandwich_corrected_score(m: &MomentEstimates) -> Result<Matrix> {
    let fi = fisher_inverse(m)?;
    Ok(sandwich(&bread_inverse(m)?, &(&m.meat - explained_meat(m, &fi)), m.n))
}

fn check_rows(m: &MomentEstimates, rows: &ScoreRows) -> Result<()> {
    if rows.n() != m.n || rows.u1.ncols() != m.dim_psi() || rows.u2.ncols() != m.dim_theta() || rows.u2.nrows() != m.n {
        return Err(Error::DimensionMismatch {
            expected: m.n,
            actual: rows.n(),
            context: "score rows vs moment estimates",
        });
    }
    Ok(())
}

/// `B⁻¹ Pₙ[(U1 − D U2)(U1 − D U2)ᵀ] B⁻ᵀ / n` with `D = (Pₙ∂θU1)(Pₙ∂θU2)⁻¹`;
/// valid for any unbiased nuisance equations.
pub fn sandwich_general(m: &MomentEstimates, rows: &ScoreRows) -> Result<Matrix> {
    check_rows(m, rows)?;
    let binv = bread_inverse(m)?;
    if m.dim_theta() == 0 {
        return Ok(sandwich(&binv, &m.meat, m.n));
    }
    // Dᵀ solves (∂θU2)ᵀ Dᵀ = (∂θU1)ᵀ.
    let dt = numkit::solve_linear(&m.d_theta_u2.transpose(), &m.d_theta_u1.transpose())?;
    let resid = &rows.u1 - &rows.u2 * dt;
    let filling = numkit::symmetrize(&(resid.transpose() * &resid)) / m.n as f64;
    Ok(sandwich(&binv, &filling, m.n))
}

/// Projection of `U1` on the span of `U2`: returns `Â` and the residual rows
/// `Ũ1ᵢ = U1ᵢ − Â U2ᵢ` (n×p).
pub fn projection_residuals(m: &MomentEstimates, rows: &ScoreRows) -> Result<(Matrix, Matrix)> {
    check_rows(m, rows)?;
    if m.dim_theta() == 0 {
        return Ok((Matrix::zeros(m.dim_psi(), 0), rows.u1.clone()));
    }
    let a_hat = &m.cross * numkit::sym_inverse(&m.fisher)?;
    let resid = &rows.u1 - &rows.u2 * a_hat.transpose();
    Ok((a_hat, resid))
}

/// Corrected variance computed from projection residuals instead of moments.
pub fn corrected_from_residuals(m: &MomentEstimates, residuals: &Matrix) -> Result<Matrix> {
    let filling = numkit::symmetrize(&(residuals.transpose() * residuals)) / m.n as f64;
    Ok(sandwich(&bread_inverse(m)?, &filling, m.n))
}

fn relative_gap(derivative: &Matrix, outer: &Matrix) -> f64 {
    let num = numkit::max_abs(&(derivative + outer));
    let den = numkit::max_abs(outer);
    if den > 0.0 {
        num / den
    } else {
        num
    }
}

/// Diagnostics from moments alone; the orthogonality gap needs rows and is
/// left unset here.
pub fn identity_diagnostics(m: &MomentEstimates) -> IdentityDiagnostics {
    if m.dim_theta() == 0 {
        return IdentityDiagnostics {
            ddtheta_gap: None,
            fisher_gap: None,
            orthogonality_gap: None,
        };
    }
    IdentityDiagnostics {
        ddtheta_gap: Some(relative_gap(&m.d_theta_u1, &m.cross)),
        fisher_gap: Some(relative_gap(&m.d_theta_u2, &m.fisher)),
        orthogonality_gap: None,
    }
}

/// `‖Pₙ Ũ1 U2ᵀ‖∞`.
pub fn orthogonality_gap(residuals: &Matrix, u2: &Matrix) -> f64 {
    numkit::max_abs(&(residuals.transpose() * u2)) / residuals.nrows() as f64
}

/// Every variance estimator side by side, plus diagnostics.
pub fn variance_report(m: &MomentEstimates, rows: &ScoreRows, partial_score: bool) -> Result<VarianceReport> {
    m.validate()?;
    if !partial_score && m.dim_theta() > 0 {
        warn!("nuisance equations are not partial scores; corrected_score is not a valid variance, use general");
    }
    let naive = sandwich_naive(m)?;
    let correction = correction_term(m)?;
    let corrected_score = sandwich_corrected_score(m)?;
    let general = sandwich_general(m, rows)?;
    let (projection_coeff, resid) = projection_residuals(m, rows)?;
    let mut diagnostics = identity_diagnostics(m);
    if m.dim_theta() > 0 {
        diagnostics.orthogonality_gap = Some(orthogonality_gap(&resid, &rows.u2));
    }
    Ok(VarianceReport {
        naive,
        corrected_score,
        general,
        correction,
        projection_coeff,
        diagnostics,
        n: m.n,
    })
}

/// Moments, rows and report at a fitted point.
pub fn report_at<F: EstimatingFunctions + ?Sized>(fns: &F, data: &[F::Unit], at: &ParamVector, fd_step_rel: f64) -> Result<VarianceReport> {
    let (m, rows) = eecore::moments_and_rows(fns, data, at, fd_step_rel)?;
    variance_report(&m, &rows, fns.theta_is_partial_score())
}
