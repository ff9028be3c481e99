//! Synthetic scenarios with known truth and a Monte Carlo runner.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::bootstrap::{self, replicate_rng};
use crate::data::{LongitudinalDataset, PersonHistory, PointDataset, PointRow, TimeRecord, Units};
use crate::eecore::SolverConfig;
use crate::error::{Error, Result};
use crate::estimators::{GammaBasis, OutcomeSpec, SnmmSpec};
use crate::nuisance::{expit, Instruments, LogisticSpec, PooledLogisticSpec};
use crate::numkit::{Matrix, Vector};
use crate::pipeline::{NuisanceMode, PointEstimator, PointPipeline, Pipeline, LongitudinalPipeline, TreatmentModelMode};
use crate::variance::{matrix_rows, vector_list, VarianceReport};

pub const MIN_N: usize = 50;
pub const MAX_HORIZON: usize = 10;
/// Propensities of every scenario must lie in this band.
pub const PROPENSITY_BAND: (f64, f64) = (0.05, 0.95);
/// Covariates are standard normal truncated to `[-COVARIATE_BOUND, COVARIATE_BOUND]`.
pub const COVARIATE_BOUND: f64 = 3.0;

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn truncated_normal(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= COVARIATE_BOUND {
            return z;
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Point treatment: `L ~ N(0, I)` truncated, `A | L ~ Bernoulli(expit(θᵀ(1, L)))`,
/// `Y⁽ᵃ⁾ = baseline + a·ate + βᵀL + noise_sd·ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointScenario {
    /// `(intercept, L1, …, Lm)` of the true propensity model.
    pub theta: Vec<f64>,
    pub ate: f64,
    #[serde(default)]
    pub baseline: f64,
    /// Outcome coefficients on `L1..Lm` (confounding strength).
    pub outcome_coef: Vec<f64>,
    #[serde(default = "one")]
    pub noise_sd: f64,
}

fn one() -> f64 {
    1.0
}

impl PointScenario {
    pub fn n_covariates(&self) -> usize {
        self.outcome_coef.len()
    }

    pub fn covariate_names(&self) -> Vec<String> {
        (1..=self.n_covariates()).map(|j| format!("l{j}")).collect()
    }

    /// `(E Y⁽¹⁾, E Y⁽⁰⁾)`; the covariates have mean zero.
    pub fn truth(&self) -> Vector {
        Vector::from_vec(vec![self.baseline + self.ate, self.baseline])
    }

    /// True per-arm coefficients `(intercept, β)` of the outcome regressions.
    pub fn outcome_truth(&self) -> (Vec<f64>, Vec<f64>) {
        let mut t = vec![self.baseline + self.ate];
        t.extend(&self.outcome_coef);
        let mut u = vec![self.baseline];
        u.extend(&self.outcome_coef);
        (t, u)
    }

    fn validate(&self) -> Result<()> {
        if self.theta.len() != self.n_covariates() + 1 {
            return Err(Error::DimensionMismatch {
                expected: self.n_covariates() + 1,
                actual: self.theta.len(),
                context: "scenario propensity coefficients",
            });
        }
        let reach = self.theta[0].abs() + COVARIATE_BOUND * self.theta[1..].iter().map(|t| t.abs()).sum::<f64>();
        if reach > logit(PROPENSITY_BAND.1) {
            return Err(Error::InvalidInput(format!(
                "propensity logit can reach {reach:.3}, outside the positivity band"
            )));
        }
        if !(self.noise_sd >= 0.0) {
            return Err(Error::InvalidInput("noise_sd must be non-negative".into()));
        }
        Ok(())
    }
}

/// Longitudinal scenario over times `0..=K` with outcomes `Y_0..Y_{K+1}`.
///
/// A latent prognosis `U` drives both covariates `L_k = 0.5U + 0.5e_k (+ 0.5
/// once treated)` and untreated outcomes `Y∅_k = U + trend·k + noise`;
/// treatment starts with probability `expit(θ0 + θ1 L_k)` while untreated
/// and is absorbing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LongitudinalScenario {
    pub horizon: usize,
    pub theta: Vec<f64>,
    pub psi: Vec<f64>,
    pub gamma_basis: GammaBasis,
    #[serde(default = "default_trend")]
    pub trend: f64,
    #[serde(default = "one")]
    pub noise_sd: f64,
}

fn default_trend() -> f64 {
    0.2
}

impl LongitudinalScenario {
    pub fn covariate_names(&self) -> Vec<String> {
        vec!["l1".into()]
    }

    fn validate(&self) -> Result<()> {
        if self.horizon > MAX_HORIZON {
            return Err(Error::InvalidInput(format!("horizon {} exceeds {MAX_HORIZON}", self.horizon)));
        }
        if self.theta.len() != 2 {
            return Err(Error::DimensionMismatch {
                expected: 2,
                actual: self.theta.len(),
                context: "longitudinal treatment coefficients",
            });
        }
        if self.psi.len() != self.gamma_basis.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.gamma_basis.dim(),
                actual: self.psi.len(),
                context: "longitudinal blip parameters",
            });
        }
        // |L_k| ≤ bound while untreated.
        let lo = self.theta[0] - self.theta[1].abs() * COVARIATE_BOUND;
        let hi = self.theta[0] + self.theta[1].abs() * COVARIATE_BOUND;
        if expit(lo) < PROPENSITY_BAND.0 || expit(hi) > PROPENSITY_BAND.1 {
            return Err(Error::InvalidInput("treatment probabilities leave the positivity band".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Generator {
    PointTreatment(PointScenario),
    Longitudinal(LongitudinalScenario),
    /// Point-treatment data analysed with method-of-moments propensity
    /// equations; the default pipeline exercises the general variance.
    MomNuisance(PointScenario),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub n: usize,
    pub generator: Generator,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < MIN_N {
            return Err(Error::InvalidInput(format!("scenario n must be at least {MIN_N}")));
        }
        match &self.generator {
            Generator::PointTreatment(s) | Generator::MomNuisance(s) => s.validate(),
            Generator::Longitudinal(s) => s.validate(),
        }
    }

    /// Two confounders, ATE = 1.
    pub fn s1(n: usize) -> Self {
        Self {
            name: "s1".into(),
            n,
            generator: Generator::PointTreatment(default_point()),
            seed: 1,
        }
    }

    /// `K = 3`, blip `(ψ1 + ψ2 m + ψ3 m²)(k − m)` with `ψ = (1, −0.2, 0)`.
    pub fn s2(n: usize) -> Self {
        Self {
            name: "s2".into(),
            n,
            generator: Generator::Longitudinal(LongitudinalScenario {
                horizon: 3,
                theta: vec![-1.4, 0.4],
                psi: vec![1.0, -0.2, 0.0],
                gamma_basis: GammaBasis::DurationQuadraticInM,
                trend: default_trend(),
                noise_sd: 1.0,
            }),
            seed: 2,
        }
    }

    /// S1 data with a non-score nuisance.
    pub fn s3(n: usize) -> Self {
        Self {
            name: "s3".into(),
            n,
            generator: Generator::MomNuisance(default_point()),
            seed: 3,
        }
    }

    /// Built-in scenario by name.
    pub fn named(name: &str, n: usize) -> Option<Self> {
        match name {
            "s1" => Some(Self::s1(n)),
            "s2" => Some(Self::s2(n)),
            "s3" => Some(Self::s3(n)),
            _ => None,
        }
    }

    pub fn truth(&self) -> Vector {
        match &self.generator {
            Generator::PointTreatment(s) | Generator::MomNuisance(s) => s.truth(),
            Generator::Longitudinal(s) => Vector::from_vec(s.psi.clone()),
        }
    }

    pub fn covariate_names(&self) -> Vec<String> {
        match &self.generator {
            Generator::PointTreatment(s) | Generator::MomNuisance(s) => s.covariate_names(),
            Generator::Longitudinal(s) => s.covariate_names(),
        }
    }
}

fn default_point() -> PointScenario {
    PointScenario {
        theta: vec![0.0, 0.5, -0.4],
        ate: 1.0,
        baseline: 0.0,
        outcome_coef: vec![1.0, 1.0],
        noise_sd: 1.0,
    }
}

/// Counterfactual columns kept apart from estimator-visible data.
#[derive(Debug, Clone, PartialEq)]
pub struct PointOracle {
    pub y1: Vec<f64>,
    pub y0: Vec<f64>,
    pub propensity: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedPoint {
    pub data: PointDataset,
    pub oracle: PointOracle,
}

pub fn gen_point_treatment(s: &PointScenario, n: usize, rng: &mut ChaCha8Rng) -> Result<SimulatedPoint> {
    s.validate()?;
    let m = s.n_covariates();
    let mut rows = Vec::with_capacity(n);
    let mut oracle = PointOracle {
        y1: Vec::with_capacity(n),
        y0: Vec::with_capacity(n),
        propensity: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let l: Vec<f64> = (0..m).map(|_| truncated_normal(rng)).collect();
        let lin = s.theta[0] + s.theta[1..].iter().zip(&l).map(|(t, v)| t * v).sum::<f64>();
        let p = expit(lin);
        let a = u8::from(rng.random::<f64>() < p);
        let mu0 = s.baseline + s.outcome_coef.iter().zip(&l).map(|(b, v)| b * v).sum::<f64>();
        let eps = s.noise_sd * normal(rng);
        let y0 = mu0 + eps;
        let y1 = mu0 + s.ate + eps;
        let y = if a == 1 { y1 } else { y0 };
        rows.push(PointRow::new(y, a, l)?);
        oracle.y1.push(y1);
        oracle.y0.push(y0);
        oracle.propensity.push(p);
    }
    Ok(SimulatedPoint {
        data: PointDataset::new(s.covariate_names(), rows)?,
        oracle,
    })
}

/// Untreated outcomes `Y∅_k` and the treatment-start time for each person.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalOracle {
    pub y_untreated: Vec<Vec<f64>>,
    pub t_start: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedLongitudinal {
    pub data: LongitudinalDataset,
    pub oracle: LongitudinalOracle,
}

pub fn gen_longitudinal(s: &LongitudinalScenario, n: usize, rng: &mut ChaCha8Rng) -> Result<SimulatedLongitudinal> {
    s.validate()?;
    let k_max = s.horizon;
    let psi = Vector::from_vec(s.psi.clone());
    let mut persons = Vec::with_capacity(n);
    let mut y_untreated = Vec::with_capacity(n);
    let mut starts = Vec::with_capacity(n);
    for i in 0..n {
        let u = truncated_normal(rng);
        let mut records = Vec::with_capacity(k_max + 1);
        let mut start = None;
        for k in 0..=k_max {
            let e = truncated_normal(rng);
            let treated_before = start.is_some();
            let l = 0.5 * u + 0.5 * e + if treated_before { 0.5 } else { 0.0 };
            let a = if treated_before {
                1
            } else {
                let p = expit(s.theta[0] + s.theta[1] * l);
                u8::from(rng.random::<f64>() < p)
            };
            if a == 1 && start.is_none() {
                start = Some(k);
            }
            records.push(TimeRecord { k, l: vec![l], a });
        }
        let y0: Vec<f64> = (0..=k_max + 1).map(|k| u + s.trend * k as f64 + s.noise_sd * normal(rng)).collect();
        let y: Vec<f64> = y0
            .iter()
            .enumerate()
            .map(|(k, &v)| match start {
                Some(t) => v + s.gamma_basis.gamma(&psi, t, k),
                None => v,
            })
            .collect();
        persons.push(PersonHistory::new(format!("p{i}"), records, y)?);
        y_untreated.push(y0);
        starts.push(start);
    }
    Ok(SimulatedLongitudinal {
        data: LongitudinalDataset::new(s.covariate_names(), persons)?,
        oracle: LongitudinalOracle {
            y_untreated,
            t_start: starts,
        },
    })
}

/// Datasets a scenario can generate.
pub trait Simulate: Units + Sized {
    fn simulate(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Result<Self>;
}

impl Simulate for PointDataset {
    fn simulate(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        match &cfg.generator {
            Generator::PointTreatment(s) | Generator::MomNuisance(s) => Ok(gen_point_treatment(s, cfg.n, rng)?.data),
            Generator::Longitudinal(_) => Err(Error::InvalidInput(format!("scenario {} is longitudinal", cfg.name))),
        }
    }
}

impl Simulate for LongitudinalDataset {
    fn simulate(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        match &cfg.generator {
            Generator::Longitudinal(s) => Ok(gen_longitudinal(s, cfg.n, rng)?.data),
            _ => Err(Error::InvalidInput(format!("scenario {} is point-treatment", cfg.name))),
        }
    }
}

/// Dataset for replicate `index`, independent of any other replicate.
pub fn replicate_dataset<D: Simulate>(cfg: &ScenarioConfig, master_seed: u64, index: u64) -> Result<D> {
    let mut rng = replicate_rng(master_seed, index);
    D::simulate(cfg, &mut rng)
}

/// The pipeline each built-in generator is meant to exercise.
pub fn default_point_pipeline(cfg: &ScenarioConfig) -> Result<PointPipeline> {
    let names = cfg.covariate_names();
    let spec = LogisticSpec {
        columns: names.clone(),
        intercept: true,
    };
    let mode = match cfg.generator {
        Generator::PointTreatment(_) => NuisanceMode::Score,
        Generator::MomNuisance(_) => NuisanceMode::Moments {
            instruments: Instruments::Cubic,
        },
        Generator::Longitudinal(_) => return Err(Error::InvalidInput("longitudinal scenario".into())),
    };
    PointPipeline::new(PointEstimator::Iptw, spec, mode, &names, SolverConfig::default())
}

pub fn aipw_pipeline(cfg: &ScenarioConfig, nuisance: NuisanceMode, xi: crate::pipeline::OutcomeMode) -> Result<PointPipeline> {
    let names = cfg.covariate_names();
    let spec = LogisticSpec {
        columns: names.clone(),
        intercept: true,
    };
    let outcome = OutcomeSpec {
        columns: names.clone(),
        intercept: true,
    };
    PointPipeline::new(PointEstimator::Aipw { outcome, xi }, spec, nuisance, &names, SolverConfig::default())
}

pub fn default_longitudinal_pipeline(cfg: &ScenarioConfig, mode: TreatmentModelMode) -> Result<LongitudinalPipeline> {
    let Generator::Longitudinal(s) = &cfg.generator else {
        return Err(Error::InvalidInput("point-treatment scenario".into()));
    };
    let treatment = PooledLogisticSpec {
        columns: vec!["l1".into()],
        lag_treatment: false,
        intercept: true,
        at_risk_only: true,
    };
    LongitudinalPipeline::new(SnmmSpec::new(s.gamma_basis, s.horizon), &treatment, mode, &s.covariate_names(), SolverConfig::default())
}

/// Coverage of Wald intervals for one variance estimator and component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageEntry {
    pub estimator: String,
    pub component: usize,
    pub coverage: f64,
    /// Binomial standard error of `coverage`.
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub bias: Vec<f64>,
    #[serde(with = "matrix_rows")]
    pub empirical_variance: Matrix,
    #[serde(with = "matrix_rows")]
    pub mean_naive: Matrix,
    #[serde(with = "matrix_rows")]
    pub mean_corrected_score: Matrix,
    #[serde(with = "matrix_rows")]
    pub mean_general: Matrix,
    #[serde(with = "matrix_rows")]
    pub mean_correction: Matrix,
    pub coverage: Vec<CoverageEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonteCarloResult {
    #[serde(with = "matrix_rows")]
    pub estimates: Matrix,
    #[serde(skip)]
    pub reports: Vec<VarianceReport>,
    #[serde(with = "vector_list")]
    pub truth: Vector,
    pub failed: usize,
    pub summary: Summary,
}

impl MonteCarloResult {
    pub fn replications(&self) -> usize {
        self.estimates.nrows()
    }

    /// Standard error of the Monte Carlo mean of component `j`.
    pub fn mean_se(&self, j: usize) -> f64 {
        (self.summary.empirical_variance[(j, j)] / self.replications() as f64).sqrt()
    }
}

/// Sample covariance of the rows of `x` (divisor R − 1).
pub fn sample_covariance(x: &Matrix) -> Matrix {
    let r = x.nrows();
    let mean = x.row_mean();
    let c = Matrix::from_fn(r, x.ncols(), |i, j| x[(i, j)] - mean[j]);
    c.transpose() * c / (r as f64 - 1.0)
}

fn mean_matrix(ms: impl Iterator<Item = Matrix>, p: usize) -> Matrix {
    let mut acc = Matrix::zeros(p, p);
    let mut count = 0usize;
    for m in ms {
        acc += m;
        count += 1;
    }
    acc / count.max(1) as f64
}

/// Two-sided normal quantile for a confidence `level`.
pub fn z_value(level: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(1.0 - (1.0 - level) / 2.0)
}

/// Wald coverage per component for a sequence of covariance estimates.
pub fn wald_coverage(estimates: &Matrix, variances: &[Matrix], truth: &Vector, level: f64) -> Vec<(f64, f64)> {
    let z = z_value(level);
    let r = estimates.nrows();
    (0..estimates.ncols())
        .map(|j| {
            let hits = (0..r)
                .filter(|&i| (estimates[(i, j)] - truth[j]).abs() <= z * variances[i][(j, j)].max(0.0).sqrt())
                .count();
            let c = hits as f64 / r as f64;
            (c, (c * (1.0 - c) / r as f64).sqrt())
        })
        .collect()
}

/// Coverage of naive, corrected-score and general intervals.
pub fn coverage(result: &MonteCarloResult, level: f64) -> Vec<CoverageEntry> {
    coverage_of(&result.estimates, &result.reports, &result.truth, level)
}

fn coverage_of(estimates: &Matrix, reports: &[VarianceReport], truth: &Vector, level: f64) -> Vec<CoverageEntry> {
    let mut out = Vec::new();
    for (name, pick) in [
        ("naive", (|r: &VarianceReport| r.naive.clone()) as fn(&VarianceReport) -> Matrix),
        ("corrected_score", |r| r.corrected_score.clone()),
        ("general", |r| r.general.clone()),
    ] {
        let vs: Vec<Matrix> = reports.iter().map(pick).collect();
        for (j, (c, se)) in wald_coverage(estimates, &vs, truth, level).into_iter().enumerate() {
            out.push(CoverageEntry {
                estimator: name.into(),
                component: j,
                coverage: c,
                se,
            });
        }
    }
    out
}

fn summarize(estimates: Matrix, reports: Vec<VarianceReport>, truth: Vector, failed: usize, level: f64) -> MonteCarloResult {
    let p = truth.len();
    let mean = estimates.row_mean();
    let bias = (0..p).map(|j| mean[j] - truth[j]).collect();
    let summary = Summary {
        bias,
        empirical_variance: sample_covariance(&estimates),
        mean_naive: mean_matrix(reports.iter().map(|r| r.naive.clone()), p),
        mean_corrected_score: mean_matrix(reports.iter().map(|r| r.corrected_score.clone()), p),
        mean_general: mean_matrix(reports.iter().map(|r| r.general.clone()), p),
        mean_correction: mean_matrix(reports.iter().map(|r| r.correction.clone()), p),
        coverage: coverage_of(&estimates, &reports, &truth, level),
    };
    MonteCarloResult {
        estimates,
        reports,
        truth,
        failed,
        summary,
    }
}

fn check_failures(failed: usize, total: usize) -> Result<()> {
    if failed as f64 > bootstrap::MAX_FAILURE_RATE * total as f64 {
        return Err(Error::TooManyFailures { failed, total });
    }
    Ok(())
}

/// Runs every pipeline on the same `r` datasets. A replicate that fails in
/// any pipeline is dropped from all of them, keeping the runs paired.
pub fn run_paired<P>(cfg: &ScenarioConfig, pipelines: &[P], r: usize, master_seed: u64) -> Result<Vec<MonteCarloResult>>
where
    P: Pipeline,
    P::Data: Simulate,
{
    cfg.validate()?;
    if r < 2 {
        return Err(Error::InvalidInput("need at least 2 replications".into()));
    }
    let outcomes: Vec<Result<Vec<(Vector, VarianceReport)>>> = (0..r)
        .into_par_iter()
        .map(|i| {
            let data: P::Data = replicate_dataset(cfg, master_seed, i as u64)?;
            pipelines
                .iter()
                .map(|p| p.fit(&data).map(|f| (f.params.psi, f.report)))
                .collect()
        })
        .collect();
    let mut failed = 0;
    let mut kept = Vec::with_capacity(r);
    for o in outcomes {
        match o {
            Ok(v) => kept.push(v),
            Err(e) => {
                log::debug!("replicate failed: {e}");
                failed += 1;
            }
        }
    }
    check_failures(failed, r)?;
    if kept.len() < 2 {
        return Err(Error::TooManyFailures { failed, total: r });
    }
    let truth = cfg.truth();
    let p = truth.len();
    Ok((0..pipelines.len())
        .map(|k| {
            let est = Matrix::from_fn(kept.len(), p, |i, j| kept[i][k].0[j]);
            let reports = kept.iter().map(|v| v[k].1.clone()).collect();
            summarize(est, reports, truth.clone(), failed, 0.95)
        })
        .collect())
}

pub fn run_replications<P>(cfg: &ScenarioConfig, pipeline: &P, r: usize, master_seed: u64) -> Result<MonteCarloResult>
where
    P: Pipeline,
    P::Data: Simulate,
{
    Ok(run_paired(cfg, std::slice::from_ref(pipeline), r, master_seed)?.remove(0))
}

/// Per-replicate outcome of a nested bootstrap study.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapStudy {
    /// Mean over replicates of bootstrap variance / corrected sandwich, per component.
    pub variance_ratio: Vec<f64>,
    /// Share of percentile intervals covering the truth, per component.
    pub coverage: Vec<f64>,
    pub replications: usize,
    pub failed: usize,
}

pub fn run_bootstrap_study<P>(cfg: &ScenarioConfig, pipeline: &P, r: usize, b: usize, level: f64, master_seed: u64) -> Result<BootstrapStudy>
where
    P: Pipeline,
    P::Data: Simulate,
{
    cfg.validate()?;
    let truth = cfg.truth();
    let p = truth.len();
    // Outer replicates run one after another; each bootstrap is parallel.
    let mut ratio = vec![0.0; p];
    let mut hits = vec![0usize; p];
    let mut done = 0usize;
    let mut failed = 0usize;
    for i in 0..r {
        let data: P::Data = replicate_dataset(cfg, master_seed, i as u64)?;
        let outcome = pipeline.fit(&data).and_then(|fit| {
            let bs = bootstrap::percentile_ci(pipeline, &data, b, level, master_seed ^ 0x9e37_79b9_7f4a_7c15 ^ i as u64)?;
            Ok((fit, bs))
        });
        match outcome {
            Ok((fit, bs)) => {
                let v = bs.variance();
                for j in 0..p {
                    ratio[j] += v[(j, j)] / fit.report.corrected_score[(j, j)];
                    if bs.ci_lower[j] <= truth[j] && truth[j] <= bs.ci_upper[j] {
                        hits[j] += 1;
                    }
                }
                done += 1;
            }
            Err(e) => {
                log::debug!("bootstrap study replicate failed: {e}");
                failed += 1;
            }
        }
    }
    check_failures(failed, r)?;
    Ok(BootstrapStudy {
        variance_ratio: ratio.iter().map(|s| s / done as f64).collect(),
        coverage: hits.iter().map(|&h| h as f64 / done as f64).collect(),
        replications: done,
        failed,
    })
}
