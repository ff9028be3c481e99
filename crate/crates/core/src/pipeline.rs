//! End-to-end estimators: nuisance fit, then `ψ` solve, then variance report.

use serde::{Deserialize, Serialize};

use crate::data::{LongitudinalDataset, PointDataset, Units};
use crate::eecore::{self, EstimatingFunctions, ParamVector, SolverConfig};
use crate::error::{Error, Result};
use crate::estimators::{self, Aipw, Iptw, OutcomeCoefficients, OutcomeSpec, Snmm, SnmmNuisance, SnmmSpec};
use crate::nuisance::{self, Design, Instruments, LogisticSpec, NuisanceEquations, PooledDesign, PooledLogisticSpec, Propensity};
use crate::numkit::Vector;
use crate::variance::{self, VarianceReport};

/// A fitted pipeline: point estimate plus every variance estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct Fit {
    pub params: ParamVector,
    pub report: VarianceReport,
}

/// Full two-step estimator applied to a dataset.
pub trait Pipeline: Sync {
    type Data: Units + Sync;

    fn dim_psi(&self) -> usize;

    /// Point estimate only, optionally warm-started from a previous fit.
    fn estimate(&self, data: &Self::Data, warm: Option<&ParamVector>) -> Result<ParamVector>;

    fn fit(&self, data: &Self::Data) -> Result<Fit>;
}

/// How the propensity coefficients are obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NuisanceMode {
    /// Logistic maximum likelihood (partial score).
    Score,
    /// Method of moments with the given instruments.
    Moments { instruments: Instruments },
    /// Coefficients plugged in from outside; not estimated.
    Known { theta: Vec<f64> },
}

impl NuisanceMode {
    fn equations(&self) -> NuisanceEquations {
        match self {
            NuisanceMode::Score => NuisanceEquations::Score,
            NuisanceMode::Moments { instruments } => NuisanceEquations::Moments(*instruments),
            NuisanceMode::Known { theta } => NuisanceEquations::Known(Vector::from_vec(theta.clone())),
        }
    }
}

/// Outcome-model coefficients for AIPW.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OutcomeMode {
    /// Least squares within each arm.
    Estimated,
    /// Held at `treated` / `untreated`.
    Fixed { treated: Vec<f64>, untreated: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PointEstimator {
    Iptw,
    Aipw {
        outcome: OutcomeSpec,
        #[serde(default = "estimated")]
        xi: OutcomeMode,
    },
}

fn estimated() -> OutcomeMode {
    OutcomeMode::Estimated
}

/// IPTW or AIPW for `(E Y⁽¹⁾, E Y⁽⁰⁾)`.
#[derive(Debug, Clone)]
pub struct PointPipeline {
    pub estimator: PointEstimator,
    pub propensity: LogisticSpec,
    pub nuisance: NuisanceMode,
    pub solver: SolverConfig,
    names: Vec<String>,
}

enum PointFns {
    Iptw(Iptw),
    Aipw(Aipw),
}

impl PointPipeline {
    pub fn new(estimator: PointEstimator, propensity: LogisticSpec, nuisance: NuisanceMode, names: &[String], solver: SolverConfig) -> Result<Self> {
        let p = Self {
            estimator,
            propensity,
            nuisance,
            solver,
            names: names.to_vec(),
        };
        p.build_propensity()?;
        if let PointEstimator::Aipw { outcome, xi: OutcomeMode::Fixed { treated, untreated } } = &p.estimator {
            let d = Design::new(&outcome.columns, outcome.intercept, names)?.dim();
            if treated.len() != d || untreated.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    actual: treated.len().min(untreated.len()),
                    context: "fixed outcome coefficients",
                });
            }
        }
        Ok(p)
    }

    fn build_propensity(&self) -> Result<Propensity> {
        Propensity::from_spec(&self.propensity, &self.names, self.nuisance.equations())
    }

    fn check_columns(&self, data: &PointDataset) -> Result<()> {
        if data.covariate_names() != self.names.as_slice() {
            return Err(Error::InvalidInput("dataset columns differ from the pipeline's".into()));
        }
        Ok(())
    }

    fn functions(&self, data: &PointDataset) -> Result<PointFns> {
        let prop = self.build_propensity()?;
        Ok(match &self.estimator {
            PointEstimator::Iptw => PointFns::Iptw(Iptw::new(prop)),
            PointEstimator::Aipw { outcome, xi } => {
                let design = Design::new(&outcome.columns, outcome.intercept, &self.names)?;
                let coef = match xi {
                    OutcomeMode::Estimated => estimators::fit_outcome_models(&design, data)?,
                    OutcomeMode::Fixed { treated, untreated } => OutcomeCoefficients {
                        treated: Vector::from_vec(treated.clone()),
                        untreated: Vector::from_vec(untreated.clone()),
                    },
                };
                PointFns::Aipw(Aipw::new(prop, design, coef)?)
            }
        })
    }

    fn solve<F: EstimatingFunctions<Unit = crate::data::PointRow>>(&self, fns: &F, prop: &Propensity, data: &PointDataset, warm: Option<&ParamVector>) -> Result<ParamVector> {
        let theta = prop.fit_from(data, warm.map(|w| &w.theta))?;
        let psi0 = warm.map_or_else(|| Vector::zeros(2), |w| w.psi.clone());
        let psi = eecore::solve_psi(fns, data.rows(), &psi0, &theta, &self.solver)?;
        Ok(ParamVector { psi, theta })
    }

    /// Estimated outcome-model coefficients when the estimator is AIPW.
    pub fn outcome_coefficients(&self, data: &PointDataset) -> Result<Option<OutcomeCoefficients>> {
        match self.functions(data)? {
            PointFns::Aipw(a) => Ok(Some(a.xi().clone())),
            PointFns::Iptw(_) => Ok(None),
        }
    }

    pub fn is_partial_score(&self) -> bool {
        !matches!(self.nuisance, NuisanceMode::Moments { .. })
    }
}

impl Pipeline for PointPipeline {
    type Data = PointDataset;

    fn dim_psi(&self) -> usize {
        2
    }

    fn estimate(&self, data: &PointDataset, warm: Option<&ParamVector>) -> Result<ParamVector> {
        self.check_columns(data)?;
        let prop = self.build_propensity()?;
        match self.functions(data)? {
            PointFns::Iptw(f) => self.solve(&f, &prop, data, warm),
            PointFns::Aipw(f) => self.solve(&f, &prop, data, warm),
        }
    }

    fn fit(&self, data: &PointDataset) -> Result<Fit> {
        self.check_columns(data)?;
        let prop = self.build_propensity()?;
        let step = self.solver.fd_step_rel;
        match self.functions(data)? {
            PointFns::Iptw(f) => {
                let params = self.solve(&f, &prop, data, None)?;
                let report = variance::report_at(&f, data.rows(), &params, step)?;
                Ok(Fit { params, report })
            }
            PointFns::Aipw(f) => {
                let params = self.solve(&f, &prop, data, None)?;
                let report = variance::report_at(&f, data.rows(), &params, step)?;
                Ok(Fit { params, report })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TreatmentModelMode {
    /// Pooled logistic maximum likelihood on the at-risk person-time.
    Estimated,
    Known { theta: Vec<f64> },
}

/// Coarse SNMM with a pooled logistic treatment-initiation model.
#[derive(Debug, Clone)]
pub struct LongitudinalPipeline {
    snmm: Snmm,
    mode: TreatmentModelMode,
    solver: SolverConfig,
    names: Vec<String>,
}

impl LongitudinalPipeline {
    pub fn new(spec: SnmmSpec, treatment: &PooledLogisticSpec, mode: TreatmentModelMode, names: &[String], solver: SolverConfig) -> Result<Self> {
        let design = PooledDesign::new(treatment, names)?;
        let nuisance = match &mode {
            TreatmentModelMode::Estimated => SnmmNuisance::Estimated,
            TreatmentModelMode::Known { theta } => SnmmNuisance::Known(Vector::from_vec(theta.clone())),
        };
        Ok(Self {
            snmm: Snmm::new(spec, design, nuisance)?,
            mode,
            solver,
            names: names.to_vec(),
        })
    }

    pub fn functions(&self) -> &Snmm {
        &self.snmm
    }

    fn check(&self, data: &LongitudinalDataset) -> Result<()> {
        if data.covariate_names() != self.names.as_slice() {
            return Err(Error::InvalidInput("dataset columns differ from the pipeline's".into()));
        }
        self.snmm.check_data(data.persons())
    }

    fn nuisance(&self, data: &LongitudinalDataset, warm: Option<&Vector>) -> Result<Vector> {
        match self.mode {
            TreatmentModelMode::Known { .. } => Ok(Vector::zeros(0)),
            TreatmentModelMode::Estimated => {
                let (x, a) = self.snmm.model().person_time_rows(data);
                nuisance::fit_logistic_rows_from(&x, &a, warm)
            }
        }
    }
}

impl Pipeline for LongitudinalPipeline {
    type Data = LongitudinalDataset;

    fn dim_psi(&self) -> usize {
        self.snmm.dim_psi()
    }

    fn estimate(&self, data: &LongitudinalDataset, warm: Option<&ParamVector>) -> Result<ParamVector> {
        self.check(data)?;
        let theta = self.nuisance(data, warm.map(|w| &w.theta))?;
        let psi0 = warm.map_or_else(|| Vector::zeros(self.dim_psi()), |w| w.psi.clone());
        let psi = eecore::solve_psi(&self.snmm, data.persons(), &psi0, &theta, &self.solver)?;
        Ok(ParamVector { psi, theta })
    }

    fn fit(&self, data: &LongitudinalDataset) -> Result<Fit> {
        let params = self.estimate(data, None)?;
        let report = variance::report_at(&self.snmm, data.persons(), &params, self.solver.fd_step_rel)?;
        Ok(Fit { params, report })
    }
}
