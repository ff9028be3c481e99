//! Logistic nuisance models for treatment assignment.
//!
//! Sign convention: `p_θ(A=1 | L) = 1 / (1 + exp(−θᵀx))`. The opposite
//! convention `1 / (1 + exp(θᵀx))` is the same model with `θ` negated;
//! fitted probabilities and scores are identical.
//!
//! The i.i.d. unit is always the subject. For pooled (person-time) models
//! the score of a person is the sum over that person's included records.

use serde::{Deserialize, Serialize};

use crate::data::{resolve_columns, LongitudinalDataset, PersonHistory, PointDataset, PointRow};
use crate::error::{Error, Result};
use crate::numkit::{self, Matrix, Vector};

/// Fitted probabilities outside `[POSITIVITY_FLOOR, 1 − POSITIVITY_FLOOR]`
/// are positivity violations.
pub const POSITIVITY_FLOOR: f64 = 1e-6;

/// `‖θ‖∞` beyond this is treated as divergence caused by separation.
pub const SEPARATION_NORM: f64 = 50.0;

pub fn expit(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn log1p_exp(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn check_positivity(p: f64) -> Result<f64> {
    if (POSITIVITY_FLOOR..=1.0 - POSITIVITY_FLOOR).contains(&p) {
        Ok(p)
    } else {
        Err(Error::Positivity { propensity: p })
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogisticSpec {
    pub columns: Vec<String>,
    #[serde(default = "default_true")]
    pub intercept: bool,
}

/// Covariate columns (plus optional intercept) resolved against a
/// dataset's column names.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    indices: Vec<usize>,
    intercept: bool,
}

impl Design {
    pub fn new(columns: &[String], intercept: bool, names: &[String]) -> Result<Self> {
        let indices = resolve_columns(names, columns)?;
        if indices.is_empty() && !intercept {
            return Err(Error::InvalidInput("model has no terms".into()));
        }
        Ok(Self { indices, intercept })
    }

    pub fn logistic(spec: &LogisticSpec, names: &[String]) -> Result<Self> {
        Self::new(&spec.columns, spec.intercept, names)
    }

    pub fn dim(&self) -> usize {
        self.indices.len() + usize::from(self.intercept)
    }

    pub fn x(&self, l: &[f64]) -> Vector {
        let mut v = Vector::zeros(self.dim());
        let off = usize::from(self.intercept);
        if self.intercept {
            v[0] = 1.0;
        }
        for (j, &c) in self.indices.iter().enumerate() {
            v[off + j] = l[c];
        }
        v
    }

    /// Applies `f` to each design covariate (the intercept stays 1).
    pub fn map_x(&self, l: &[f64], f: impl Fn(f64) -> f64) -> Vector {
        let mut v = self.x(l);
        for j in usize::from(self.intercept)..v.len() {
            v[j] = f(v[j]);
        }
        v
    }

    pub fn prob(&self, l: &[f64], theta: &Vector) -> f64 {
        expit(self.x(l).dot(theta))
    }
}

/// `U2(θ) = x (A − p_θ)` for each row.
pub fn logistic_score(spec: &LogisticSpec, theta: &Vector, data: &PointDataset) -> Result<Vec<Vector>> {
    let design = Design::logistic(spec, data.covariate_names())?;
    if theta.len() != design.dim() {
        return Err(Error::DimensionMismatch {
            expected: design.dim(),
            actual: theta.len(),
            context: "logistic coefficients",
        });
    }
    Ok(data
        .rows()
        .iter()
        .map(|r| {
            let x = design.x(&r.l);
            let p = expit(x.dot(theta));
            x * (r.treated() - p)
        })
        .collect())
}

/// Result of a maximum (partial) likelihood logistic fit.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    pub theta: Vector,
    /// `Pₙ U2 U2ᵀ` at `θ̂`, per independent unit.
    pub fisher: Matrix,
    /// `fisher⁻¹ / n`.
    pub var_theta: Matrix,
    pub min_prob: f64,
    pub max_prob: f64,
}

fn log_likelihood(x: &[Vector], a: &[f64], theta: &Vector) -> f64 {
    x.iter()
        .zip(a)
        .map(|(xi, &ai)| {
            let z = xi.dot(theta);
            ai * z - log1p_exp(z)
        })
        .sum()
}

/// Newton–Raphson (IRLS) for logistic regression on explicit design rows.
pub fn fit_logistic_rows(x: &[Vector], a: &[f64]) -> Result<Vector> {
    fit_logistic_rows_from(x, a, None)
}

/// As [`fit_logistic_rows`], starting from `init` when given.
pub fn fit_logistic_rows_from(x: &[Vector], a: &[f64], init: Option<&Vector>) -> Result<Vector> {
    let dim = x.first().map_or(0, Vector::len);
    if x.is_empty() || dim == 0 {
        return Err(Error::InvalidInput("logistic fit needs a non-empty design".into()));
    }
    let n = x.len() as f64;
    let mut theta = match init {
        Some(t) if t.len() == dim && t.iter().all(|v| v.is_finite()) => t.clone(),
        _ => Vector::zeros(dim),
    };
    let mut ll = log_likelihood(x, a, &theta);
    for _ in 0..100 {
        let mut grad = Vector::zeros(dim);
        let mut info = Matrix::zeros(dim, dim);
        let mut worst_weight = 0.0_f64;
        for (xi, &ai) in x.iter().zip(a) {
            let p = expit(xi.dot(&theta));
            let w = p * (1.0 - p);
            worst_weight = worst_weight.max(w);
            grad.axpy(ai - p, xi, 1.0);
            info.ger(w, xi, xi, 1.0);
        }
        grad /= n;
        info /= n;
        if grad.amax() <= 1e-12 {
            return Ok(theta);
        }
        let step = match numkit::solve_vector(&info, &grad) {
            Ok(s) => s,
            Err(Error::SingularMatrix { .. }) if worst_weight < 1e-8 => {
                return Err(Error::Separation { norm: theta.amax() })
            }
            Err(e) => return Err(e),
        };
        let mut t = 1.0;
        let mut next = None;
        for _ in 0..30 {
            let cand = &theta + &step * t;
            let cll = log_likelihood(x, a, &cand);
            if cll.is_finite() && cll >= ll - 1e-12 * ll.abs().max(1.0) {
                next = Some((cand, cll));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, cll)) = next else {
            return Err(Error::NoConvergence {
                iterations: 100,
                residual: grad.amax(),
            });
        };
        theta = cand;
        ll = cll;
        if theta.amax() > SEPARATION_NORM {
            return Err(Error::Separation { norm: theta.amax() });
        }
    }
    Err(Error::NoConvergence {
        iterations: 100,
        residual: f64::NAN,
    })
}

fn finish_fit(theta: Vector, scores: &[Vector], probs: impl Iterator<Item = f64>) -> Result<LogisticFit> {
    let dim = theta.len();
    let n = scores.len() as f64;
    let mut fisher = Matrix::zeros(dim, dim);
    for s in scores {
        fisher.ger(1.0, s, s, 1.0);
    }
    let fisher = numkit::symmetrize(&(fisher / n));
    let var_theta = numkit::sym_inverse(&fisher)? / n;
    let (mut lo, mut hi) = (1.0_f64, 0.0_f64);
    for p in probs {
        lo = lo.min(p);
        hi = hi.max(p);
    }
    if lo < POSITIVITY_FLOOR || hi > 1.0 - POSITIVITY_FLOOR {
        log::warn!("Positivity: fitted propensities span [{lo:e}, {hi:e}]");
    }
    Ok(LogisticFit {
        theta,
        fisher,
        var_theta,
        min_prob: lo,
        max_prob: hi,
    })
}

/// Maximum likelihood fit of a point-treatment logistic model.
pub fn fit_logistic(spec: &LogisticSpec, data: &PointDataset) -> Result<LogisticFit> {
    let design = Design::logistic(spec, data.covariate_names())?;
    let x: Vec<Vector> = data.rows().iter().map(|r| design.x(&r.l)).collect();
    let a: Vec<f64> = data.rows().iter().map(PointRow::treated).collect();
    let theta = fit_logistic_rows(&x, &a)?;
    let scores = logistic_score(spec, &theta, data)?;
    let probs = x.iter().map(|xi| expit(xi.dot(&theta))).collect::<Vec<_>>();
    finish_fit(theta, &scores, probs.into_iter())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PooledLogisticSpec {
    pub columns: Vec<String>,
    #[serde(default)]
    pub lag_treatment: bool,
    #[serde(default = "default_true")]
    pub intercept: bool,
    /// Use only records with no prior treatment. With absorbing treatment
    /// and `lag_treatment` the lag column is then identically zero.
    #[serde(default = "default_true")]
    pub at_risk_only: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PooledDesign {
    indices: Vec<usize>,
    intercept: bool,
    lag_treatment: bool,
    at_risk_only: bool,
}

impl PooledDesign {
    pub fn new(spec: &PooledLogisticSpec, names: &[String]) -> Result<Self> {
        let indices = resolve_columns(names, &spec.columns)?;
        if indices.is_empty() && !spec.intercept && !spec.lag_treatment {
            return Err(Error::InvalidInput("pooled logistic model has no terms".into()));
        }
        Ok(Self {
            indices,
            intercept: spec.intercept,
            lag_treatment: spec.lag_treatment,
            at_risk_only: spec.at_risk_only,
        })
    }

    pub fn dim(&self) -> usize {
        self.indices.len() + usize::from(self.intercept) + usize::from(self.lag_treatment)
    }

    /// Design vector `(1, L_k, A_{k−1})` for record `k`.
    pub fn x(&self, person: &PersonHistory, k: usize) -> Vector {
        let rec = &person.records()[k];
        let mut v = Vector::zeros(self.dim());
        let mut j = 0;
        if self.intercept {
            v[0] = 1.0;
            j = 1;
        }
        for &c in &self.indices {
            v[j] = rec.l[c];
            j += 1;
        }
        if self.lag_treatment {
            v[j] = if k == 0 { 0.0 } else { f64::from(person.records()[k - 1].a) };
        }
        v
    }

    pub fn includes(&self, person: &PersonHistory, k: usize) -> bool {
        !self.at_risk_only || person.at_risk(k)
    }

    pub fn prob(&self, person: &PersonHistory, k: usize, theta: &Vector) -> f64 {
        expit(self.x(person, k).dot(theta))
    }

    /// Per-person score `Σ_k x_k (A_k − p_θ(k))` over included records.
    pub fn person_score(&self, person: &PersonHistory, theta: &Vector) -> Vector {
        let mut s = Vector::zeros(self.dim());
        for (k, rec) in person.records().iter().enumerate() {
            if self.includes(person, k) {
                let x = self.x(person, k);
                let p = expit(x.dot(theta));
                s.axpy(f64::from(rec.a) - p, &x, 1.0);
            }
        }
        s
    }

    /// Per-person `∂θ` of [`Self::person_score`].
    pub fn person_score_jacobian(&self, person: &PersonHistory, theta: &Vector) -> Matrix {
        let d = self.dim();
        let mut j = Matrix::zeros(d, d);
        for k in 0..person.records().len() {
            if self.includes(person, k) {
                let x = self.x(person, k);
                let p = expit(x.dot(theta));
                j.ger(-p * (1.0 - p), &x, &x, 1.0);
            }
        }
        j
    }

    /// Included person-time rows and their treatment indicators.
    pub fn person_time_rows(&self, data: &LongitudinalDataset) -> (Vec<Vector>, Vec<f64>) {
        let mut x = Vec::new();
        let mut a = Vec::new();
        for person in data.persons() {
            for (k, rec) in person.records().iter().enumerate() {
                if self.includes(person, k) {
                    x.push(self.x(person, k));
                    a.push(f64::from(rec.a));
                }
            }
        }
        (x, a)
    }
}

/// One score vector per person.
pub fn pooled_logistic_score(spec: &PooledLogisticSpec, theta: &Vector, data: &LongitudinalDataset) -> Result<Vec<Vector>> {
    let design = PooledDesign::new(spec, data.covariate_names())?;
    if theta.len() != design.dim() {
        return Err(Error::DimensionMismatch {
            expected: design.dim(),
            actual: theta.len(),
            context: "pooled logistic coefficients",
        });
    }
    Ok(data.persons().iter().map(|p| design.person_score(p, theta)).collect())
}

/// Pooled logistic fit on the stacked person-time rows; the Fisher
/// information is the per-person outer product of the summed scores.
pub fn fit_pooled_logistic(spec: &PooledLogisticSpec, data: &LongitudinalDataset) -> Result<LogisticFit> {
    let design = PooledDesign::new(spec, data.covariate_names())?;
    let (x, a) = design.person_time_rows(data);
    let theta = fit_logistic_rows(&x, &a)?;
    let scores: Vec<Vector> = data.persons().iter().map(|p| design.person_score(p, &theta)).collect();
    let probs: Vec<f64> = x.iter().map(|xi| expit(xi.dot(&theta))).collect();
    finish_fit(theta, &scores, probs.into_iter())
}

/// Non-score instruments for method-of-moments propensity equations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Instruments {
    /// `(1, L_1³, …, L_m³)`, matching the design layout.
    Cubic,
}

/// How the propensity coefficients are obtained.
#[derive(Debug, Clone, PartialEq)]
pub enum NuisanceEquations {
    /// Logistic partial score `x (A − p)`.
    Score,
    /// Unbiased moment conditions `z (A − p)` with `z ≠ x`.
    Moments(Instruments),
    /// Coefficients are known and plugged in; no nuisance parameter.
    Known(Vector),
}

/// Point-treatment propensity model shared by the IPTW and AIPW estimators.
#[derive(Debug, Clone, PartialEq)]
pub struct Propensity {
    design: Design,
    equations: NuisanceEquations,
}

impl Propensity {
    pub fn new(design: Design, equations: NuisanceEquations) -> Result<Self> {
        if let NuisanceEquations::Known(t) = &equations {
            if t.len() != design.dim() {
                return Err(Error::DimensionMismatch {
                    expected: design.dim(),
                    actual: t.len(),
                    context: "known propensity coefficients",
                });
            }
        }
        Ok(Self { design, equations })
    }

    pub fn from_spec(spec: &LogisticSpec, names: &[String], equations: NuisanceEquations) -> Result<Self> {
        Self::new(Design::logistic(spec, names)?, equations)
    }

    pub fn design(&self) -> &Design {
        &self.design
    }

    pub fn equations(&self) -> &NuisanceEquations {
        &self.equations
    }

    /// Number of estimated nuisance parameters (0 when known).
    pub fn dim_theta(&self) -> usize {
        match self.equations {
            NuisanceEquations::Known(_) => 0,
            _ => self.design.dim(),
        }
    }

    pub fn is_score(&self) -> bool {
        matches!(self.equations, NuisanceEquations::Score | NuisanceEquations::Known(_))
    }

    fn coefficients<'a>(&'a self, theta: &'a Vector) -> &'a Vector {
        match &self.equations {
            NuisanceEquations::Known(t) => t,
            _ => theta,
        }
    }

    /// Fitted `P(A=1 | L)`, with a positivity check.
    pub fn prob(&self, row: &PointRow, theta: &Vector) -> Result<f64> {
        check_positivity(self.design.prob(&row.l, self.coefficients(theta)))
    }

    /// `∂p/∂θ = p(1−p) x`, empty when coefficients are known.
    pub fn dprob(&self, row: &PointRow, p: f64) -> Vector {
        if self.dim_theta() == 0 {
            return Vector::zeros(0);
        }
        self.design.x(&row.l) * (p * (1.0 - p))
    }

    fn instrument(&self, row: &PointRow) -> Vector {
        match self.equations {
            NuisanceEquations::Moments(Instruments::Cubic) => self.design.map_x(&row.l, |v| v * v * v),
            _ => self.design.x(&row.l),
        }
    }

    pub fn u2(&self, row: &PointRow, theta: &Vector) -> Vector {
        if self.dim_theta() == 0 {
            return Vector::zeros(0);
        }
        let p = self.design.prob(&row.l, theta);
        self.instrument(row) * (row.treated() - p)
    }

    pub fn d_u2(&self, row: &PointRow, theta: &Vector) -> Matrix {
        if self.dim_theta() == 0 {
            return Matrix::zeros(0, 0);
        }
        let x = self.design.x(&row.l);
        let p = expit(x.dot(theta));
        let z = self.instrument(row);
        -(z * x.transpose()) * (p * (1.0 - p))
    }

    /// Solves the nuisance equations on `data`.
    pub fn fit(&self, data: &PointDataset) -> Result<Vector> {
        self.fit_from(data, None)
    }

    /// As [`Self::fit`], warm-started from `init` when given.
    pub fn fit_from(&self, data: &PointDataset, init: Option<&Vector>) -> Result<Vector> {
        let start = match init {
            Some(t) if t.len() == self.dim_theta() => t.clone(),
            _ => Vector::zeros(self.dim_theta()),
        };
        match &self.equations {
            NuisanceEquations::Known(_) => Ok(Vector::zeros(0)),
            NuisanceEquations::Score => {
                let x: Vec<Vector> = data.rows().iter().map(|r| self.design.x(&r.l)).collect();
                let a: Vec<f64> = data.rows().iter().map(PointRow::treated).collect();
                fit_logistic_rows_from(&x, &a, Some(&start))
            }
            NuisanceEquations::Moments(_) => {
                let rows = data.rows();
                let n = rows.len() as f64;
                let dim = self.design.dim();
                let cfg = crate::eecore::SolverConfig {
                    tol: 1e-12,
                    ..Default::default()
                };
                let theta = crate::eecore::damped_newton(
                    |t| Ok(rows.iter().fold(Vector::zeros(dim), |acc, r| acc + self.u2(r, t)) / n),
                    |t| Ok(rows.iter().fold(Matrix::zeros(dim, dim), |acc, r| acc + self.d_u2(r, t)) / n),
                    start,
                    &cfg,
                )?;
                if theta.amax() > SEPARATION_NORM {
                    return Err(Error::Separation { norm: theta.amax() });
                }
                Ok(theta)
            }
        }
    }
}
