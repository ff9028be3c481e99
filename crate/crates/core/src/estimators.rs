//! Built-in `U1` estimating functions: IPTW means, augmented IPW means and
//! coarse structural nested mean models.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{PersonHistory, PointDataset, PointRow, TimeRecord};
use crate::eecore::EstimatingFunctions;
use crate::error::{Error, Result};
use crate::nuisance::{check_positivity, Design, PooledDesign, Propensity};
use crate::numkit::{self, Matrix, Vector};

/// `ψ̂1 − ψ̂0` and its variance `cᵀ Σ c` with `c = (1, −1)`.
pub fn ate_contrast(psi: &Vector, cov: &Matrix) -> (f64, f64) {
    let est = psi[0] - psi[1];
    let var = cov[(0, 0)] + cov[(1, 1)] - cov[(0, 1)] - cov[(1, 0)];
    (est, var)
}

/// IPTW estimating equations for `(ψ1, ψ0) = (E Y⁽¹⁾, E Y⁽⁰⁾)`:
/// `1{A=1}/p (Y − ψ1)` and `1{A=0}/(1−p) (Y − ψ0)`.
#[derive(Debug, Clone)]
pub struct Iptw {
    propensity: Propensity,
}

impl Iptw {
    pub fn new(propensity: Propensity) -> Self {
        Self { propensity }
    }

    pub fn propensity(&self) -> &Propensity {
        &self.propensity
    }
}

/// Per-row `U1` of IPTW.
pub fn iptw_u1(psi: &Vector, theta: &Vector, row: &PointRow, model: &Propensity) -> Result<Vector> {
    let p = model.prob(row, theta)?;
    let a = row.treated();
    Ok(Vector::from_vec(vec![
        a / p * (row.y - psi[0]),
        (1.0 - a) / (1.0 - p) * (row.y - psi[1]),
    ]))
}

impl EstimatingFunctions for Iptw {
    type Unit = PointRow;

    fn dim_psi(&self) -> usize {
        2
    }

    fn dim_theta(&self) -> usize {
        self.propensity.dim_theta()
    }

    fn u1(&self, row: &PointRow, psi: &Vector, theta: &Vector) -> Result<Vector> {
        iptw_u1(psi, theta, row, &self.propensity)
    }

    fn u2(&self, row: &PointRow, theta: &Vector) -> Result<Vector> {
        Ok(self.propensity.u2(row, theta))
    }

    fn d_u1_dpsi(&self, row: &PointRow, _psi: &Vector, theta: &Vector) -> Result<Option<Matrix>> {
        let p = self.propensity.prob(row, theta)?;
        let a = row.treated();
        Ok(Some(Matrix::from_diagonal(&Vector::from_vec(vec![-a / p, -(1.0 - a) / (1.0 - p)]))))
    }

    fn d_u1_dtheta(&self, row: &PointRow, psi: &Vector, theta: &Vector) -> Result<Option<Matrix>> {
        let p = self.propensity.prob(row, theta)?;
        let dp = self.propensity.dprob(row, p);
        let a = row.treated();
        let mut j = Matrix::zeros(2, dp.len());
        j.set_row(0, &(&dp * (-a * (row.y - psi[0]) / (p * p))).transpose());
        j.set_row(1, &(&dp * ((1.0 - a) * (row.y - psi[1]) / ((1.0 - p) * (1.0 - p)))).transpose());
        Ok(Some(j))
    }

    fn d_u2_dtheta(&self, row: &PointRow, theta: &Vector) -> Result<Option<Matrix>> {
        Ok(Some(self.propensity.d_u2(row, theta)))
    }

    fn theta_is_partial_score(&self) -> bool {
        self.propensity.is_score()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomeSpec {
    pub columns: Vec<String>,
    #[serde(default = "default_true")]
    pub intercept: bool,
}

fn default_true() -> bool {
    true
}

/// Coefficients of the per-arm linear outcome models `m_a(L) = xᵀ ξ_a`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutcomeCoefficients {
    pub treated: Vector,
    pub untreated: Vector,
}

/// Least-squares outcome model for one arm: the rows with `A = arm`.
pub fn fit_outcome_arm(design: &Design, data: &PointDataset, arm: u8) -> Result<Vector> {
    let d = design.dim();
    let mut xtx = Matrix::zeros(d, d);
    let mut xty = Vector::zeros(d);
    for r in data.rows().iter().filter(|r| r.a == arm) {
        let x = design.x(&r.l);
        xtx.ger(1.0, &x, &x, 1.0);
        xty.axpy(r.y, &x, 1.0);
    }
    numkit::solve_vector(&xtx, &xty)
}

pub fn fit_outcome_models(design: &Design, data: &PointDataset) -> Result<OutcomeCoefficients> {
    Ok(OutcomeCoefficients {
        treated: fit_outcome_arm(design, data, 1)?,
        untreated: fit_outcome_arm(design, data, 0)?,
    })
}

/// Least-squares score `U3 = (A x (Y − xᵀξ1); (1−A) x (Y − xᵀξ0))`.
pub fn outcome_score(design: &Design, xi: &OutcomeCoefficients, row: &PointRow) -> Vector {
    let x = design.x(&row.l);
    let a = row.treated();
    let r1 = row.y - x.dot(&xi.treated);
    let r0 = row.y - x.dot(&xi.untreated);
    let d = x.len();
    let mut s = Vector::zeros(2 * d);
    s.rows_mut(0, d).copy_from(&(&x * (a * r1)));
    s.rows_mut(d, d).copy_from(&(&x * ((1.0 - a) * r0)));
    s
}

/// Augmented IPW estimating equations for `(ψ1, ψ0)`:
/// `A(Y − m1)/p + m1 − ψ1` and `(1−A)(Y − m0)/(1−p) + m0 − ψ0`,
/// with the outcome-model coefficients `ξ` held fixed.
#[derive(Debug, Clone)]
pub struct Aipw {
    propensity: Propensity,
    outcome: Design,
    xi: OutcomeCoefficients,
}

impl Aipw {
    pub fn new(propensity: Propensity, outcome: Design, xi: OutcomeCoefficients) -> Result<Self> {
        if xi.treated.len() != outcome.dim() || xi.untreated.len() != outcome.dim() {
            return Err(Error::DimensionMismatch {
                expected: outcome.dim(),
                actual: xi.treated.len(),
                context: "outcome-model coefficients",
            });
        }
        Ok(Self { propensity, outcome, xi })
    }

    pub fn xi(&self) -> &OutcomeCoefficients {
        &self.xi
    }
}

/// Per-row `U1` of AIPW.
pub fn aipw_u1(psi: &Vector, theta: &Vector, xi: &OutcomeCoefficients, row: &PointRow, model: &Propensity, outcome: &Design) -> Result<Vector> {
    let p = model.prob(row, theta)?;
    let x = outcome.x(&row.l);
    let m1 = x.dot(&xi.treated);
    let m0 = x.dot(&xi.untreated);
    let a = row.treated();
    Ok(Vector::from_vec(vec![
        a * (row.y - m1) / p + m1 - psi[0],
        (1.0 - a) * (row.y - m0) / (1.0 - p) + m0 - psi[1],
    ]))
}

impl EstimatingFunctions for Aipw {
    type Unit = PointRow;

    fn dim_psi(&self) -> usize {
        2
    }

    fn dim_theta(&self) -> usize {
        self.propensity.dim_theta()
    }

    fn u1(&self, row: &PointRow, psi: &Vector, theta: &Vector) -> Result<Vector> {
        aipw_u1(psi, theta, &self.xi, row, &self.propensity, &self.outcome)
    }

    fn u2(&self, row: &PointRow, theta: &Vector) -> Result<Vector> {
        Ok(self.propensity.u2(row, theta))
    }

    fn d_u1_dpsi(&self, _row: &PointRow, _psi: &Vector, _theta: &Vector) -> Result<Option<Matrix>> {
        Ok(Some(-Matrix::identity(2, 2)))
    }

    fn d_u1_dtheta(&self, row: &PointRow, _psi: &Vector, theta: &Vector) -> Result<Option<Matrix>> {
        let p = self.propensity.prob(row, theta)?;
        let dp = self.propensity.dprob(row, p);
        let x = self.outcome.x(&row.l);
        let a = row.treated();
        let r1 = row.y - x.dot(&self.xi.treated);
        let r0 = row.y - x.dot(&self.xi.untreated);
        let mut j = Matrix::zeros(2, dp.len());
        j.set_row(0, &(&dp * (-a * r1 / (p * p))).transpose());
        j.set_row(1, &(&dp * ((1.0 - a) * r0 / ((1.0 - p) * (1.0 - p)))).transpose());
        Ok(Some(j))
    }

    fn d_u2_dtheta(&self, row: &PointRow, theta: &Vector) -> Result<Option<Matrix>> {
        Ok(Some(self.propensity.d_u2(row, theta)))
    }

    fn theta_is_partial_score(&self) -> bool {
        self.propensity.is_score()
    }
}

/// Parametric blip `γ^{(m)}_{k,ψ} = b(m)ᵀψ · (k − m) · 1{k > m}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaBasis {
    /// `b(m) = (1)`: effect linear in treatment duration.
    Duration,
    /// `b(m) = (1, m, m²)`: duration slope quadratic in the start time.
    DurationQuadraticInM,
}

impl GammaBasis {
    pub fn dim(self) -> usize {
        match self {
            GammaBasis::Duration => 1,
            GammaBasis::DurationQuadraticInM => 3,
        }
    }

    pub fn basis(self, m: usize) -> Vector {
        let m = m as f64;
        match self {
            GammaBasis::Duration => Vector::from_element(1, 1.0),
            GammaBasis::DurationQuadraticInM => Vector::from_vec(vec![1.0, m, m * m]),
        }
    }

    pub fn gamma(self, psi: &Vector, m: usize, k: usize) -> f64 {
        if k > m {
            self.basis(m).dot(psi) * (k - m) as f64
        } else {
            0.0
        }
    }
}

/// User-supplied `q^k_m(L̄_m)`; receives `m`, `k` and the records up to and
/// including time `m`.
pub type QFunction = Arc<dyn Fn(usize, usize, &[TimeRecord]) -> Vector + Send + Sync>;

#[derive(Clone)]
pub enum QFunctions {
    /// `q^k_m = (1, m, m²)(k − m)`, truncated to `dim(ψ)` components.
    Default,
    Custom(QFunction),
}

impl fmt::Debug for QFunctions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QFunctions::Default => f.write_str("Default"),
            QFunctions::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// q-values at or above this magnitude violate the boundedness requirement.
pub const Q_BOUND: f64 = 1e6;

#[derive(Debug, Clone)]
pub struct SnmmSpec {
    pub gamma_basis: GammaBasis,
    pub q_functions: QFunctions,
    pub horizon: usize,
}

impl SnmmSpec {
    pub fn new(gamma_basis: GammaBasis, horizon: usize) -> Self {
        Self {
            gamma_basis,
            q_functions: QFunctions::Default,
            horizon,
        }
    }

    pub fn dim_psi(&self) -> usize {
        self.gamma_basis.dim()
    }

    pub fn q(&self, person: &PersonHistory, m: usize, k: usize) -> Vector {
        match &self.q_functions {
            QFunctions::Default => {
                let mm = m as f64;
                let full = [1.0, mm, mm * mm];
                let d = (k - m) as f64;
                Vector::from_iterator(self.dim_psi(), full.iter().take(self.dim_psi()).map(|v| v * d))
            }
            QFunctions::Custom(f) => f(m, k, &person.records()[..=m]),
        }
    }
}

/// `H(k) = Y_k − γ^{(T)}_{k,ψ}` for `k > T`, `Y_k` otherwise.
pub fn snmm_h(spec: &SnmmSpec, psi: &Vector, person: &PersonHistory, k: usize) -> f64 {
    let y = person.outcome(k);
    match person.t_start() {
        Some(t) if k > t => y - spec.gamma_basis.gamma(psi, t, k),
        _ => y,
    }
}

fn dh_dpsi(spec: &SnmmSpec, person: &PersonHistory, k: usize) -> Vector {
    match person.t_start() {
        Some(t) if k > t => -spec.gamma_basis.basis(t) * (k - t) as f64,
        _ => Vector::zeros(spec.dim_psi()),
    }
}

/// How the treatment-initiation coefficients enter the SNMM.
#[derive(Debug, Clone, PartialEq)]
pub enum SnmmNuisance {
    Estimated,
    Known(Vector),
}

/// Coarse SNMM g-estimation equations stacked with a pooled logistic
/// treatment-initiation model.
#[derive(Debug, Clone)]
pub struct Snmm {
    spec: SnmmSpec,
    model: PooledDesign,
    nuisance: SnmmNuisance,
}

impl Snmm {
    pub fn new(spec: SnmmSpec, model: PooledDesign, nuisance: SnmmNuisance) -> Result<Self> {
        if let SnmmNuisance::Known(t) = &nuisance {
            if t.len() != model.dim() {
                return Err(Error::DimensionMismatch {
                    expected: model.dim(),
                    actual: t.len(),
                    context: "known treatment-model coefficients",
                });
            }
        }
        Ok(Self { spec, model, nuisance })
    }

    pub fn spec(&self) -> &SnmmSpec {
        &self.spec
    }

    pub fn model(&self) -> &PooledDesign {
        &self.model
    }

    fn coefficients<'a>(&'a self, theta: &'a Vector) -> &'a Vector {
        match &self.nuisance {
            SnmmNuisance::Known(t) => t,
            SnmmNuisance::Estimated => theta,
        }
    }

    /// Validates a person: horizon, absorbing treatment, bounded q.
    pub fn check_person(&self, person: &PersonHistory) -> Result<()> {
        if person.horizon() != self.spec.horizon {
            return Err(Error::InvalidInput(format!(
                "person {} has horizon {}, model expects {}",
                person.id(),
                person.horizon(),
                self.spec.horizon
            )));
        }
        if !person.is_absorbing() {
            return Err(Error::InvalidInput(format!("person {}: treatment is not absorbing", person.id())));
        }
        let k_max = self.spec.horizon + 1;
        for m in 0..=self.spec.horizon {
            for k in (m + 1)..=k_max {
                let q = self.spec.q(person, m, k);
                if q.len() != self.spec.dim_psi() {
                    return Err(Error::DimensionMismatch {
                        expected: self.spec.dim_psi(),
                        actual: q.len(),
                        context: "q-function output",
                    });
                }
                if q.iter().any(|v| !v.is_finite() || v.abs() >= Q_BOUND) {
                    return Err(Error::InvalidInput(format!("person {}: q-function is unbounded", person.id())));
                }
            }
        }
        Ok(())
    }

    pub fn check_data(&self, persons: &[PersonHistory]) -> Result<()> {
        persons.iter().try_for_each(|p| self.check_person(p))
    }

    /// `Σ_m 1{Ā_{m−1}=0} (A_m − p(m)) Σ_{k>m} q^k_m · w(k)` for a per-k weight.
    fn sum_over_risk_set<W>(&self, person: &PersonHistory, theta: &Vector, width: usize, mut weight: W) -> Result<(Matrix, Vec<(usize, f64, Matrix)>)>
    where
        W: FnMut(usize) -> Matrix,
    {
        let coef = self.coefficients(theta);
        let p_dim = self.spec.dim_psi();
        let k_max = self.spec.horizon + 1;
        let mut total = Matrix::zeros(p_dim, width);
        let mut per_m = Vec::new();
        for m in 0..=self.spec.horizon {
            if !person.at_risk(m) {
                break;
            }
            let p = check_positivity(self.model.prob(person, m, coef))?;
            let mut inner = Matrix::zeros(p_dim, width);
            for k in (m + 1)..=k_max {
                inner += self.spec.q(person, m, k) * weight(k);
            }
            let resid = f64::from(person.records()[m].a) - p;
            total += &inner * resid;
            per_m.push((m, p, inner));
        }
        Ok((total, per_m))
    }
}

/// Per-person `U1` of the coarse SNMM.
pub fn snmm_u1(spec: &SnmmSpec, psi: &Vector, theta: &Vector, person: &PersonHistory, model: &PooledDesign) -> Result<Vector> {
    let snmm = Snmm::new(spec.clone(), model.clone(), SnmmNuisance::Estimated)?;
    snmm.u1(person, psi, theta)
}

impl EstimatingFunctions for Snmm {
    type Unit = PersonHistory;

    fn dim_psi(&self) -> usize {
        self.spec.dim_psi()
    }

    fn dim_theta(&self) -> usize {
        match self.nuisance {
            SnmmNuisance::Known(_) => 0,
            SnmmNuisance::Estimated => self.model.dim(),
        }
    }

    fn u1(&self, person: &PersonHistory, psi: &Vector, theta: &Vector) -> Result<Vector> {
        let (total, _) = self.sum_over_risk_set(person, theta, 1, |k| {
            Matrix::from_element(1, 1, snmm_h(&self.spec, psi, person, k))
        })?;
        Ok(total.column(0).into_owned())
    }

    fn u2(&self, person: &PersonHistory, theta: &Vector) -> Result<Vector> {
        if self.dim_theta() == 0 {
            return Ok(Vector::zeros(0));
        }
        Ok(self.model.person_score(person, theta))
    }

    fn d_u1_dpsi(&self, person: &PersonHistory, _psi: &Vector, theta: &Vector) -> Result<Option<Matrix>> {
        let p = self.spec.dim_psi();
        let (total, _) = self.sum_over_risk_set(person, theta, p, |k| Matrix::from_row_slice(1, p, dh_dpsi(&self.spec, person, k).as_slice()))?;
        Ok(Some(total))
    }

    fn d_u1_dtheta(&self, person: &PersonHistory, psi: &Vector, theta: &Vector) -> Result<Option<Matrix>> {
        let q = self.dim_theta();
        if q == 0 {
            return Ok(Some(Matrix::zeros(self.spec.dim_psi(), 0)));
        }
        let (_, per_m) = self.sum_over_risk_set(person, theta, 1, |k| {
            Matrix::from_element(1, 1, snmm_h(&self.spec, psi, person, k))
        })?;
        let mut j = Matrix::zeros(self.spec.dim_psi(), q);
        for (m, p, inner) in per_m {
            let x = self.model.x(person, m);
            j += inner * x.transpose() * (-p * (1.0 - p));
        }
        Ok(Some(j))
    }

    fn d_u2_dtheta(&self, person: &PersonHistory, theta: &Vector) -> Result<Option<Matrix>> {
        if self.dim_theta() == 0 {
            return Ok(Some(Matrix::zeros(0, 0)));
        }
        Ok(Some(self.model.person_score_jacobian(person, theta)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TimeRecord;
    use crate::eecore::{self, ParamVector, SolverConfig};
    use crate::nuisance::{LogisticSpec, NuisanceEquations, PooledLogisticSpec};

    fn fixture() -> PointDataset {
        let rows = vec![
            PointRow::new(2.0, 1, vec![0.0]).unwrap(),
            PointRow::new(4.0, 1, vec![1.0]).unwrap(),
            PointRow::new(0.0, 0, vec![0.0]).unwrap(),
            PointRow::new(0.0, 0, vec![1.0]).unwrap(),
        ];
        PointDataset::new(vec!["l1".into()], rows).unwrap()
    }

    fn half_propensity(names: &[String]) -> Propensity {
        let spec = LogisticSpec {
            columns: vec![],
            intercept: true,
        };
        Propensity::from_spec(&spec, names, NuisanceEquations::Known(Vector::zeros(1))).unwrap()
    }

    #[test]
    fn iptw_equal_weights() {
        let data = fixture();
        let fns = Iptw::new(half_propensity(data.covariate_names()));
        let fit = eecore::solve_stacked(&fns, data.rows(), &ParamVector::zeros(2, 0), &SolverConfig::default()).unwrap();
        assert!((fit.psi[0] - 3.0).abs() < 1e-12);
        assert!(fit.psi[1].abs() < 1e-12);
        let (ate, _) = ate_contrast(&fit.psi, &Matrix::zeros(2, 2));
        assert!((ate - 3.0).abs() < 1e-12);
    }

    #[test]
    fn iptw_indicator_annihilates() {
        let data = fixture();
        let prop = half_propensity(data.covariate_names());
        let u = iptw_u1(&Vector::from_vec(vec![1.0, 7.0]), &Vector::zeros(0), &data.rows()[0], &prop).unwrap();
        assert_eq!(u[1], 0.0);
        assert_eq!(u[0], 2.0);
    }

    #[test]
    fn intercept_logistic_mle_through_generic_solver() {
        let rows = [1u8, 1, 0, 0]
            .iter()
            .map(|&a| PointRow::new(1.0, a, vec![]).unwrap())
            .collect();
        let data = PointDataset::new(vec![], rows).unwrap();
        let spec = LogisticSpec {
            columns: vec![],
            intercept: true,
        };
        let fns = Iptw::new(Propensity::from_spec(&spec, &[], NuisanceEquations::Score).unwrap());
        let theta = eecore::solve_nuisance(&fns, data.rows(), &Vector::from_element(1, 0.8), &SolverConfig::default()).unwrap();
        assert!(theta[0].abs() < 1e-10);
    }

    #[test]
    fn positivity_violation() {
        let spec = LogisticSpec {
            columns: vec![],
            intercept: true,
        };
        let prop = Propensity::from_spec(&spec, &[], NuisanceEquations::Known(Vector::from_element(1, 20.0))).unwrap();
        let row = PointRow::new(1.0, 1, vec![]).unwrap();
        let err = iptw_u1(&Vector::zeros(2), &Vector::zeros(0), &row, &prop).unwrap_err();
        assert!(matches!(err, Error::Positivity { .. }));
    }

    #[test]
    fn aipw_zero_outcome_model_is_horvitz_thompson() {
        let data = fixture();
        let prop = half_propensity(data.covariate_names());
        let outcome = Design::new(&[], true, data.covariate_names()).unwrap();
        let xi = OutcomeCoefficients {
            treated: Vector::zeros(1),
            untreated: Vector::zeros(1),
        };
        let fns = Aipw::new(prop.clone(), outcome, xi).unwrap();
        let fit = eecore::solve_stacked(&fns, data.rows(), &ParamVector::zeros(2, 0), &SolverConfig::default()).unwrap();
        let iptw = eecore::solve_stacked(&Iptw::new(prop), data.rows(), &ParamVector::zeros(2, 0), &SolverConfig::default()).unwrap();
        // Pₙ[A/p] = 1 here, so Horvitz–Thompson and ratio-weighted means coincide.
        assert!((fit.psi - iptw.psi).amax() < 1e-12);
    }

    #[test]
    fn analytic_jacobians_match_finite_differences() {
        let rows: Vec<PointRow> = (0..6)
            .map(|i| PointRow::new(0.3 * i as f64, (i % 2) as u8, vec![0.2 * i as f64 - 0.5, (i as f64).sin()]).unwrap())
            .collect();
        let names = vec!["l1".to_string(), "l2".to_string()];
        let spec = LogisticSpec {
            columns: names.clone(),
            intercept: true,
        };
        let prop = Propensity::from_spec(&spec, &names, NuisanceEquations::Score).unwrap();
        let outcome = Design::new(&names, true, &names).unwrap();
        let xi = OutcomeCoefficients {
            treated: Vector::from_vec(vec![0.1, 0.5, -0.2]),
            untreated: Vector::from_vec(vec![-0.3, 0.2, 0.4]),
        };
        let psi = Vector::from_vec(vec![0.7, -0.1]);
        let theta = Vector::from_vec(vec![0.2, -0.6, 0.3]);
        let iptw = Iptw::new(prop.clone());
        let aipw = Aipw::new(prop, outcome, xi).unwrap();
        for row in &rows {
            check_jacobians(&iptw, row, &psi, &theta);
            check_jacobians(&aipw, row, &psi, &theta);
        }
    }

    fn check_jacobians<F: EstimatingFunctions>(fns: &F, unit: &F::Unit, psi: &Vector, theta: &Vector) {
        let rel = |a: &Matrix, b: &Matrix| (a - b).amax() / b.amax().max(1.0);
        let fd = numkit::finite_diff_jacobian(|x| fns.u1(unit, x, theta), psi, 1e-6).unwrap();
        assert!(rel(&fns.d_u1_dpsi(unit, psi, theta).unwrap().unwrap(), &fd) < 1e-5);
        if fns.dim_theta() > 0 {
            let fd = numkit::finite_diff_jacobian(|x| fns.u1(unit, psi, x), theta, 1e-6).unwrap();
            assert!(rel(&fns.d_u1_dtheta(unit, psi, theta).unwrap().unwrap(), &fd) < 1e-5);
            let fd = numkit::finite_diff_jacobian(|x| fns.u2(unit, x), theta, 1e-6).unwrap();
            assert!(rel(&fns.d_u2_dtheta(unit, theta).unwrap().unwrap(), &fd) < 1e-5);
        }
    }

    fn person(id: &str, ls: &[f64], a: &[u8], y: &[f64]) -> PersonHistory {
        let records = ls
            .iter()
            .zip(a)
            .enumerate()
            .map(|(k, (&l, &ak))| TimeRecord { k, l: vec![l], a: ak })
            .collect();
        PersonHistory::new(id, records, y.to_vec()).unwrap()
    }

    fn pooled(names: &[String]) -> PooledDesign {
        let spec = PooledLogisticSpec {
            columns: vec!["l1".into()],
            lag_treatment: false,
            intercept: true,
            at_risk_only: true,
        };
        PooledDesign::new(&spec, names).unwrap()
    }

    #[test]
    fn h_values() {
        let spec = SnmmSpec::new(GammaBasis::Duration, 5);
        let never = person("a", &[0.0; 6], &[0; 6], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        for k in 0..=6 {
            assert_eq!(snmm_h(&spec, &Vector::from_element(1, 1.0), &never, k), never.outcome(k));
        }
        let treated = person("b", &[0.0; 6], &[0, 0, 1, 1, 1, 1], &[0.0, 0.0, 0.0, 0.0, 0.0, 10.0, 0.0]);
        assert_eq!(snmm_h(&spec, &Vector::from_element(1, 1.0), &treated, 5), 7.0);
        let quad = SnmmSpec::new(GammaBasis::DurationQuadraticInM, 5);
        assert_eq!(snmm_h(&quad, &Vector::from_vec(vec![1.0, 0.0, 0.0]), &treated, 5), 7.0);
        assert_eq!(snmm_h(&quad, &Vector::from_vec(vec![1.0, 0.5, 0.25]), &treated, 5), 10.0 - 3.0 * 3.0);
    }

    #[test]
    fn u1_zero_when_h_zero() {
        let names = vec!["l1".to_string()];
        let spec = SnmmSpec::new(GammaBasis::Duration, 2);
        let p = person("a", &[0.3, -0.2, 0.5], &[0, 1, 1], &[0.0; 4]);
        let u = snmm_u1(&spec, &Vector::zeros(1), &Vector::from_vec(vec![0.1, 0.2]), &p, &pooled(&names)).unwrap();
        assert_eq!(u[0], 0.0);
    }

    #[test]
    fn treated_at_zero_has_single_term() {
        let names = vec!["l1".to_string()];
        let spec = SnmmSpec::new(GammaBasis::Duration, 1);
        let p = person("a", &[0.4, 0.0], &[1, 1], &[1.0, 2.0, 5.0]);
        let theta = Vector::from_vec(vec![-0.2, 0.5]);
        let psi = Vector::from_element(1, 1.5);
        let u = snmm_u1(&spec, &psi, &theta, &p, &pooled(&names)).unwrap();
        let p0 = crate::nuisance::expit(-0.2 + 0.5 * 0.4);
        // m = 0 only: k=1 (q=1, H = 2 − 1.5), k=2 (q=2, H = 5 − 3)
        let expected = (1.0 * 0.5 + 2.0 * 2.0) * (1.0 - p0);
        assert!((u[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn snmm_affine_in_psi_and_jacobians() {
        let names = vec!["l1".to_string()];
        let spec = SnmmSpec::new(GammaBasis::DurationQuadraticInM, 3);
        let fns = Snmm::new(spec, pooled(&names), SnmmNuisance::Estimated).unwrap();
        let p = person("a", &[0.1, -0.4, 0.9, 0.0], &[0, 0, 1, 1], &[0.2, 0.5, 1.1, 2.0, 3.4]);
        let theta = Vector::from_vec(vec![-0.5, 0.3]);
        let u0 = fns.u1(&p, &Vector::zeros(3), &theta).unwrap();
        let a = Vector::from_vec(vec![1.0, -0.2, 0.05]);
        let ua = fns.u1(&p, &a, &theta).unwrap();
        let u2a = fns.u1(&p, &(&a * 2.0), &theta).unwrap();
        assert!((&u2a - &u0 - (&ua - &u0) * 2.0).amax() < 1e-10);
        check_jacobians(&fns, &p, &a, &theta);
    }

    #[test]
    fn snmm_rejects_bad_people() {
        let names = vec!["l1".to_string()];
        let fns = Snmm::new(SnmmSpec::new(GammaBasis::Duration, 1), pooled(&names), SnmmNuisance::Estimated).unwrap();
        let reverting = person("a", &[0.0, 0.0], &[1, 0], &[0.0; 3]);
        assert!(fns.check_person(&reverting).is_err());
        let long = person("b", &[0.0; 3], &[0; 3], &[0.0; 4]);
        assert!(fns.check_person(&long).is_err());
        let mut spec = SnmmSpec::new(GammaBasis::Duration, 1);
        spec.q_functions = QFunctions::Custom(Arc::new(|_, _, _| Vector::from_element(1, 1e7)));
        let fns = Snmm::new(spec, pooled(&names), SnmmNuisance::Estimated).unwrap();
        let ok = person("c", &[0.0; 2], &[0; 2], &[0.0; 3]);
        assert!(fns.check_person(&ok).is_err());
    }
}
