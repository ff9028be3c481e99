//! Estimating functions and the stacked / two-step solvers.
//!
//! An [`EstimatingFunctions`] implementation supplies the per-unit functions
//! `U1(ψ, θ)` (for the parameter of interest) and `U2(θ)` (for the nuisance).
//! The stacked system `Pₙ(U1; U2) = 0` is solved by damped Newton with step
//! halving; [`solve_profile`] solves `Pₙ U2 = 0` first and then `Pₙ U1 = 0`
//! with the nuisance held fixed. Both reach the same root.
//!
//! Jacobians are taken from the implementation when supplied and otherwise
//! obtained by central differences, block by block.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{self, Matrix, Vector};

/// Per-unit estimating functions for `(ψ, θ)`.
///
/// Analytic Jacobians are optional; returning `Ok(None)` falls back to
/// central differences for that block.
pub trait EstimatingFunctions: Sync {
    type Unit: Sync;

    fn dim_psi(&self) -> usize;
    fn dim_theta(&self) -> usize;

    fn u1(&self, unit: &Self::Unit, psi: &Vector, theta: &Vector) -> Result<Vector>;
    fn u2(&self, unit: &Self::Unit, theta: &Vector) -> Result<Vector>;

    fn d_u1_dpsi(&self, _unit: &Self::Unit, _psi: &Vector, _theta: &Vector) -> Result<Option<Matrix>> {
        Ok(None)
    }
    fn d_u1_dtheta(&self, _unit: &Self::Unit, _psi: &Vector, _theta: &Vector) -> Result<Option<Matrix>> {
        Ok(None)
    }
    fn d_u2_dtheta(&self, _unit: &Self::Unit, _theta: &Vector) -> Result<Option<Matrix>> {
        Ok(None)
    }

    /// Whether `U2` is the derivative of a (partial) log-likelihood.
    fn theta_is_partial_score(&self) -> bool {
        true
    }
}

/// Stacked parameter `(ψ, θ)`. `θ` may be empty.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub psi: Vector,
    pub theta: Vector,
}

impl ParamVector {
    pub fn new(psi: Vector, theta: Vector) -> Result<Self> {
        if psi.is_empty() {
            return Err(Error::InvalidInput("psi must have at least one component".into()));
        }
        numkit::ensure_finite_vector(&psi, "psi")?;
        numkit::ensure_finite_vector(&theta, "theta")?;
        Ok(Self { psi, theta })
    }

    pub fn zeros(p: usize, q: usize) -> Self {
        Self {
            psi: Vector::zeros(p),
            theta: Vector::zeros(q),
        }
    }

    pub fn stacked(&self) -> Vector {
        let mut v = Vector::zeros(self.psi.len() + self.theta.len());
        v.rows_mut(0, self.psi.len()).copy_from(&self.psi);
        v.rows_mut(self.psi.len(), self.theta.len()).copy_from(&self.theta);
        v
    }

    pub fn from_stacked(p: usize, v: &Vector) -> Self {
        Self {
            psi: v.rows(0, p).into_owned(),
            theta: v.rows(p, v.len() - p).into_owned(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    pub fd_step_rel: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 200,
            max_halvings: 50,
            fd_step_rel: 1e-6,
        }
    }
}

fn fd_u1_psi<F: EstimatingFunctions + ?Sized>(
    fns: &F,
    unit: &F::Unit,
    psi: &Vector,
    theta: &Vector,
    rel: f64,
) -> Result<Matrix> {
    match fns.d_u1_dpsi(unit, psi, theta)? {
        Some(j) => Ok(j),
        None => numkit::finite_diff_jacobian(|x| fns.u1(unit, x, theta), psi, numkit::default_step(psi, rel)),
    }
}

fn fd_u1_theta<F: EstimatingFunctions + ?Sized>(
    fns: &F,
    unit: &F::Unit,
    psi: &Vector,
    theta: &Vector,
    rel: f64,
) -> Result<Matrix> {
    if theta.is_empty() {
        return Ok(Matrix::zeros(fns.dim_psi(), 0));
    }
    match fns.d_u1_dtheta(unit, psi, theta)? {
        Some(j) => Ok(j),
        None => numkit::finite_diff_jacobian(|x| fns.u1(unit, psi, x), theta, numkit::default_step(theta, rel)),
    }
}

fn fd_u2_theta<F: EstimatingFunctions + ?Sized>(fns: &F, unit: &F::Unit, theta: &Vector, rel: f64) -> Result<Matrix> {
    if theta.is_empty() {
        return Ok(Matrix::zeros(0, 0));
    }
    match fns.d_u2_dtheta(unit, theta)? {
        Some(j) => Ok(j),
        None => numkit::finite_diff_jacobian(|x| fns.u2(unit, x), theta, numkit::default_step(theta, rel)),
    }
}

fn check_len(v: &Vector, expected: usize, context: &'static str) -> Result<()> {
    if v.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            actual: v.len(),
            context,
        });
    }
    numkit::ensure_finite_vector(v, context)
}

/// `Pₙ U1(ψ, θ)`.
pub fn mean_u1<F: EstimatingFunctions + ?Sized>(fns: &F, data: &[F::Unit], psi: &Vector, theta: &Vector) -> Result<Vector> {
    let mut acc = Vector::zeros(fns.dim_psi());
    for unit in data {
        let u = fns.u1(unit, psi, theta)?;
        check_len(&u, fns.dim_psi(), "U1 value")?;
        acc += u;
    }
    Ok(acc / data.len() as f64)
}

/// `Pₙ U2(θ)`.
pub fn mean_u2<F: EstimatingFunctions + ?Sized>(fns: &F, data: &[F::Unit], theta: &Vector) -> Result<Vector> {
    let mut acc = Vector::zeros(fns.dim_theta());
    if fns.dim_theta() == 0 {
        return Ok(acc);
    }
    for unit in data {
        let u = fns.u2(unit, theta)?;
        check_len(&u, fns.dim_theta(), "U2 value")?;
        acc += u;
    }
    Ok(acc / data.len() as f64)
}

/// `Pₙ (U1; U2)` at a stacked point.
pub fn stacked_mean<F: EstimatingFunctions + ?Sized>(fns: &F, data: &[F::Unit], at: &ParamVector) -> Result<Vector> {
    let top = mean_u1(fns, data, &at.psi, &at.theta)?;
    let bottom = mean_u2(fns, data, &at.theta)?;
    Ok(ParamVector { psi: top, theta: bottom }.stacked())
}

fn stacked_jacobian<F: EstimatingFunctions + ?Sized>(
    fns: &F,
    data: &[F::Unit],
    at: &ParamVector,
    rel: f64,
) -> Result<Matrix> {
    let (p, q) = (fns.dim_psi(), fns.dim_theta());
    let mut jac = Matrix::zeros(p + q, p + q);
    for unit in data {
        let a = fd_u1_psi(fns, unit, &at.psi, &at.theta, rel)?;
        let mut block = jac.view_mut((0, 0), (p, p));
        block += a;
        if q > 0 {
            let b = fd_u1_theta(fns, unit, &at.psi, &at.theta, rel)?;
            let mut block = jac.view_mut((0, p), (p, q));
            block += b;
            let c = fd_u2_theta(fns, unit, &at.theta, rel)?;
            let mut block = jac.view_mut((p, p), (q, q));
            block += c;
        }
    }
    Ok(jac / data.len() as f64)
}

/// Damped Newton iteration on a square system with step halving on the
/// Euclidean norm of the residual.
pub fn damped_newton<R, J>(residual: R, jacobian: J, x0: Vector, cfg: &SolverConfig) -> Result<Vector>
where
    R: Fn(&Vector) -> Result<Vector>,
    J: Fn(&Vector) -> Result<Matrix>,
{
    let mut x = x0;
    let mut f = residual(&x)?;
    for _ in 0..cfg.max_iter {
        if f.amax() <= cfg.tol {
            return Ok(x);
        }
        let jac = jacobian(&x)?;
        let step = numkit::solve_vector(&jac, &(-&f)).map_err(|e| match e {
            Error::SingularMatrix { condition } => Error::SingularJacobian { condition },
            other => other,
        })?;
        let norm0 = f.norm();
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=cfg.max_halvings {
            let trial = &x + &step * t;
            if let Ok(ft) = residual(&trial) {
                if ft.iter().all(|v| v.is_finite()) && (ft.norm() < norm0 || ft.amax() <= cfg.tol) {
                    accepted = Some((trial, ft));
                    break;
                }
            }
            t *= 0.5;
        }
        match accepted {
            Some((xn, fnew)) => {
                x = xn;
                f = fnew;
            }
            None => {
                return Err(Error::NoConvergence {
                    iterations: cfg.max_iter,
                    residual: f.amax(),
                })
            }
        }
    }
    if f.amax() <= cfg.tol {
        Ok(x)
    } else {
        Err(Error::NoConvergence {
            iterations: cfg.max_iter,
            residual: f.amax(),
        })
    }
}

fn check_sample_size<F: EstimatingFunctions + ?Sized>(fns: &F, data: &[F::Unit], init: &ParamVector) -> Result<()> {
    let (p, q) = (fns.dim_psi(), fns.dim_theta());
    if data.len() < p + q || data.is_empty() {
        return Err(Error::InvalidInput(format!(
            "need at least {} units for {} parameters, got {}",
            p + q,
            p + q,
            data.len()
        )));
    }
    if init.psi.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            actual: init.psi.len(),
            context: "initial psi",
        });
    }
    if init.theta.len() != q {
        return Err(Error::DimensionMismatch {
            expected: q,
            actual: init.theta.len(),
            context: "initial theta",
        });
    }
    numkit::ensure_finite_vector(&init.psi, "initial psi")?;
    numkit::ensure_finite_vector(&init.theta, "initial theta")
}

/// Solves `Pₙ U2(θ) = 0` alone.
pub fn solve_nuisance<F: EstimatingFunctions + ?Sized>(
    fns: &F,
    data: &[F::Unit],
    theta0: &Vector,
    cfg: &SolverConfig,
) -> Result<Vector> {
    if fns.dim_theta() == 0 {
        return Ok(Vector::zeros(0));
    }
    damped_newton(
        |t| mean_u2(fns, data, t),
        |t| {
            let mut acc = Matrix::zeros(fns.dim_theta(), fns.dim_theta());
            for unit in data {
                acc += fd_u2_theta(fns, unit, t, cfg.fd_step_rel)?;
            }
            Ok(acc / data.len() as f64)
        },
        theta0.clone(),
        cfg,
    )
}

/// Solves `Pₙ U1(ψ, θ) = 0` for `ψ` with `θ` held fixed.
pub fn solve_psi<F: EstimatingFunctions + ?Sized>(
    fns: &F,
    data: &[F::Unit],
    psi0: &Vector,
    theta: &Vector,
    cfg: &SolverConfig,
) -> Result<Vector> {
    damped_newton(
        |x| mean_u1(fns, data, x, theta),
        |x| {
            let mut acc = Matrix::zeros(fns.dim_psi(), fns.dim_psi());
            for unit in data {
                acc += fd_u1_psi(fns, unit, x, theta, cfg.fd_step_rel)?;
            }
            Ok(acc / data.len() as f64)
        },
        psi0.clone(),
        cfg,
    )
}

/// Solves the stacked system `Pₙ(U1(ψ, θ); U2(θ)) = 0` jointly.
pub fn solve_stacked<F: EstimatingFunctions + ?Sized>(
    fns: &F,
    data: &[F::Unit],
    init: &ParamVector,
    cfg: &SolverConfig,
) -> Result<ParamVector> {
    check_sample_size(fns, data, init)?;
    let p = fns.dim_psi();
    let x = damped_newton(
        |v| stacked_mean(fns, data, &ParamVector::from_stacked(p, v)),
        |v| stacked_jacobian(fns, data, &ParamVector::from_stacked(p, v), cfg.fd_step_rel),
        init.stacked(),
        cfg,
    )?;
    Ok(ParamVector::from_stacked(p, &x))
}

/// Two-step solve: `θ̂` from `Pₙ U2 = 0`, then `ψ̂` from `Pₙ U1(ψ, θ̂) = 0`.
pub fn solve_profile<F: EstimatingFunctions + ?Sized>(
    fns: &F,
    data: &[F::Unit],
    init: &ParamVector,
    cfg: &SolverConfig,
) -> Result<ParamVector> {
    check_sample_size(fns, data, init)?;
    let theta = solve_nuisance(fns, data, &init.theta, cfg)?;
    let psi = solve_psi(fns, data, &init.psi, &theta, cfg)?;
    Ok(ParamVector { psi, theta })
}

/// Default starting point: `θ` from a nuisance-only solve from zero, `ψ = 0`.
pub fn default_init<F: EstimatingFunctions + ?Sized>(
    fns: &F,
    data: &[F::Unit],
    cfg: &SolverConfig,
) -> Result<ParamVector> {
    let theta = solve_nuisance(fns, data, &Vector::zeros(fns.dim_theta()), cfg)?;
    Ok(ParamVector {
        psi: Vector::zeros(fns.dim_psi()),
        theta,
    })
}

/// Empirical averages of the derivative and outer-product matrices at a
/// fitted point.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentEstimates {
    /// `Pₙ ∂ψ U1`, p×p.
    pub bread: Matrix,
    /// `Pₙ ∂θ U1`, p×q.
    pub d_theta_u1: Matrix,
    /// `Pₙ U1 U1ᵀ`, p×p.
    pub meat: Matrix,
    /// `Pₙ U1 U2ᵀ`, p×q.
    pub cross: Matrix,
    /// `Pₙ U2 U2ᵀ`, q×q.
    pub fisher: Matrix,
    /// `Pₙ ∂θ U2`, q×q.
    pub d_theta_u2: Matrix,
    pub n: usize,
}

impl MomentEstimates {
    pub fn dim_psi(&self) -> usize {
        self.bread.nrows()
    }

    pub fn dim_theta(&self) -> usize {
        self.fisher.nrows()
    }

    /// Checks shapes, finiteness and that `meat` and `fisher` are
    /// symmetric PSD to 1e-8.
    pub fn validate(&self) -> Result<()> {
        let (p, q) = (self.bread.nrows(), self.fisher.nrows());
        let shapes = [
            (&self.bread, p, p, "bread"),
            (&self.d_theta_u1, p, q, "d_theta_u1"),
            (&self.meat, p, p, "meat"),
            (&self.cross, p, q, "cross"),
            (&self.fisher, q, q, "fisher"),
            (&self.d_theta_u2, q, q, "d_theta_u2"),
        ];
        for (m, r, c, name) in shapes {
            if m.nrows() != r || m.ncols() != c {
                return Err(Error::InvalidInput(format!(
                    "{name} is {}x{}, expected {r}x{c}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            numkit::ensure_finite_matrix(m, name)?;
        }
        if self.n == 0 {
            return Err(Error::InvalidInput("moment estimates need n > 0".into()));
        }
        for (m, name) in [(&self.meat, "meat"), (&self.fisher, "fisher")] {
            if m.is_empty() {
                continue;
            }
            let lam = numkit::min_eigenvalue(m)?;
            if lam < -1e-8 * numkit::max_abs(m).max(1.0) {
                return Err(Error::InvalidInput(format!("{name} is not PSD (min eigenvalue {lam:e})")));
            }
        }
        Ok(())
    }
}

/// Per-unit `U1` (n×p) and `U2` (n×q) values at a fitted point.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRows {
    pub u1: Matrix,
    pub u2: Matrix,
}

impl ScoreRows {
    pub fn n(&self) -> usize {
        self.u1.nrows()
    }
}

/// Evaluates `U1`, `U2` per unit at `at`.
pub fn score_rows<F: EstimatingFunctions + ?Sized>(fns: &F, data: &[F::Unit], at: &ParamVector) -> Result<ScoreRows> {
    let (p, q) = (fns.dim_psi(), fns.dim_theta());
    let mut u1 = Matrix::zeros(data.len(), p);
    let mut u2 = Matrix::zeros(data.len(), q);
    for (i, unit) in data.iter().enumerate() {
        let a = fns.u1(unit, &at.psi, &at.theta)?;
        check_len(&a, p, "U1 value")?;
        u1.set_row(i, &a.transpose());
        if q > 0 {
            let b = fns.u2(unit, &at.theta)?;
            check_len(&b, q, "U2 value")?;
            u2.set_row(i, &b.transpose());
        }
    }
    Ok(ScoreRows { u1, u2 })
}

/// Moment matrices and the per-unit rows they were built from, computed in
/// one pass. Unit contributions are summed in data order, so the result is
/// deterministic.
pub fn moments_and_rows<F: EstimatingFunctions + ?Sized>(
    fns: &F,
    data: &[F::Unit],
    at: &ParamVector,
    fd_step_rel: f64,
) -> Result<(MomentEstimates, ScoreRows)> {
    if data.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    let (p, q) = (fns.dim_psi(), fns.dim_theta());
    let rows = score_rows(fns, data, at)?;
    let mut bread = Matrix::zeros(p, p);
    let mut d_theta_u1 = Matrix::zeros(p, q);
    let mut d_theta_u2 = Matrix::zeros(q, q);
    for unit in data {
        bread += fd_u1_psi(fns, unit, &at.psi, &at.theta, fd_step_rel)?;
        if q > 0 {
            d_theta_u1 += fd_u1_theta(fns, unit, &at.psi, &at.theta, fd_step_rel)?;
            d_theta_u2 += fd_u2_theta(fns, unit, &at.theta, fd_step_rel)?;
        }
    }
    let n = data.len() as f64;
    let ut1 = rows.u1.transpose();
    let ut2 = rows.u2.transpose();
    let m = MomentEstimates {
        bread: bread / n,
        d_theta_u1: d_theta_u1 / n,
        meat: numkit::symmetrize(&(&ut1 * &rows.u1)) / n,
        cross: (&ut1 * &rows.u2) / n,
        fisher: numkit::symmetrize(&(&ut2 * &rows.u2)) / n,
        d_theta_u2: d_theta_u2 / n,
        n: data.len(),
    };
    for (mat, name) in [
        (&m.bread, "bread"),
        (&m.d_theta_u1, "d_theta_u1"),
        (&m.d_theta_u2, "d_theta_u2"),
    ] {
        numkit::ensure_finite_matrix(mat, name)?;
    }
    Ok((m, rows))
}

pub fn empirical_moments<F: EstimatingFunctions + ?Sized>(
    fns: &F,
    data: &[F::Unit],
    at: &ParamVector,
) -> Result<MomentEstimates> {
    moments_and_rows(fns, data, at, SolverConfig::default().fd_step_rel).map(|(m, _)| m)
}
