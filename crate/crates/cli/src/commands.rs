use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use eqsw_core::bootstrap::{self, BootstrapResult};
use eqsw_core::data::{LongitudinalDataset, PointDataset};
use eqsw_core::estimators::{ate_contrast, SnmmSpec};
use eqsw_core::pipeline::{Fit, LongitudinalPipeline, Pipeline, PointEstimator, PointPipeline, TreatmentModelMode};
use eqsw_core::simlab::{self, Generator, MonteCarloResult, ScenarioConfig};
use eqsw_core::variance::{GapStatus, IdentityDiagnostics, VarianceReport};

use crate::config::{EstimatorConfig, RunConfig, SimulateConfig};
use crate::{io, CliError, Common};

enum Loaded {
    Point(PointPipeline, PointDataset),
    Longitudinal(LongitudinalPipeline, LongitudinalDataset),
}

impl Loaded {
    fn name(&self) -> &'static str {
        match self {
            Loaded::Point(p, _) => match p.estimator {
                PointEstimator::Iptw => "iptw",
                PointEstimator::Aipw { .. } => "aipw",
            },
            Loaded::Longitudinal(..) => "snmm",
        }
    }

    fn n(&self) -> usize {
        match self {
            Loaded::Point(_, d) => d.len(),
            Loaded::Longitudinal(_, d) => d.len(),
        }
    }

    fn fit(&self) -> Result<Fit, CliError> {
        Ok(match self {
            Loaded::Point(p, d) => p.fit(d)?,
            Loaded::Longitudinal(p, d) => p.fit(d)?,
        })
    }

    fn bootstrap(&self, b: usize, level: f64, seed: u64) -> Result<BootstrapResult, CliError> {
        Ok(match self {
            Loaded::Point(p, d) => bootstrap::percentile_ci(p, d, b, level, seed)?,
            Loaded::Longitudinal(p, d) => bootstrap::percentile_ci(p, d, b, level, seed)?,
        })
    }
}

fn config_error(e: eqsw_core::Error) -> CliError {
    CliError::Config(e.to_string())
}

fn load(cfg: &RunConfig) -> Result<Loaded, CliError> {
    match &cfg.estimator {
        EstimatorConfig::Iptw { propensity, nuisance } => {
            let data = io::read_point(&cfg.data)?;
            let p = PointPipeline::new(PointEstimator::Iptw, propensity.clone(), nuisance.clone(), data.covariate_names(), cfg.solver)
                .map_err(config_error)?;
            Ok(Loaded::Point(p, data))
        }
        EstimatorConfig::Aipw {
            propensity,
            nuisance,
            outcome,
            xi,
        } => {
            let data = io::read_point(&cfg.data)?;
            let est = PointEstimator::Aipw {
                outcome: outcome.clone(),
                xi: xi.clone(),
            };
            let p = PointPipeline::new(est, propensity.clone(), nuisance.clone(), data.covariate_names(), cfg.solver).map_err(config_error)?;
            Ok(Loaded::Point(p, data))
        }
        EstimatorConfig::Snmm {
            gamma_basis,
            treatment,
            nuisance,
        } => {
            let data = io::read_longitudinal(&cfg.data)?;
            let horizon = data
                .persons()
                .first()
                .map(|p| p.horizon())
                .ok_or_else(|| CliError::Config("longitudinal data has no persons".into()))?;
            let spec = SnmmSpec::new(*gamma_basis, horizon);
            let p = LongitudinalPipeline::new(spec, treatment, nuisance.clone(), data.covariate_names(), cfg.solver).map_err(config_error)?;
            p.functions().check_data(data.persons()).map_err(config_error)?;
            Ok(Loaded::Longitudinal(p, data))
        }
    }
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable output");
    s.push('\n');
    s
}

#[derive(Serialize)]
struct Interval {
    estimate: f64,
    se: f64,
    lower: f64,
    upper: f64,
}

#[derive(Serialize)]
struct Intervals {
    estimator: &'static str,
    components: Vec<Interval>,
}

#[derive(Serialize)]
struct Contrast {
    estimator: &'static str,
    estimate: f64,
    se: f64,
}

#[derive(Serialize)]
struct FitOutput<'a> {
    estimator: &'static str,
    n: usize,
    psi: Vec<f64>,
    theta: Vec<f64>,
    level: f64,
    variance: &'a VarianceReport,
    wald: Vec<Intervals>,
    /// `ψ1 − ψ0` for point-treatment estimators.
    #[serde(skip_serializing_if = "Option::is_none")]
    ate: Option<Vec<Contrast>>,
}

fn wald(fit: &Fit, level: f64) -> Vec<Intervals> {
    let z = simlab::z_value(level);
    fit.report
        .blocks()
        .iter()
        .map(|(name, cov)| Intervals {
            estimator: name,
            components: (0..fit.params.psi.len())
                .map(|j| {
                    let se = cov[(j, j)].max(0.0).sqrt();
                    let est = fit.params.psi[j];
                    Interval {
                        estimate: est,
                        se,
                        lower: est - z * se,
                        upper: est + z * se,
                    }
                })
                .collect(),
        })
        .collect()
}

fn gap_text(g: Option<f64>) -> String {
    g.map_or_else(|| "n/a".to_string(), |v| format!("{v:.3e}"))
}

fn fit_table(out: &FitOutput) -> String {
    let mut t = String::new();
    let _ = writeln!(t, "estimator: {}  n = {}  level = {}", out.estimator, out.n, out.level);
    let _ = writeln!(t, "{:<18}{:>6}{:>14}{:>12}{:>14}{:>14}", "variance", "comp", "estimate", "se", "lower", "upper");
    for block in &out.wald {
        for (j, c) in block.components.iter().enumerate() {
            let _ = writeln!(
                t,
                "{:<18}{:>6}{:>14.6}{:>12.6}{:>14.6}{:>14.6}",
                block.estimator,
                j + 1,
                c.estimate,
                c.se,
                c.lower,
                c.upper
            );
        }
    }
    if let Some(ate) = &out.ate {
        for c in ate {
            let _ = writeln!(t, "ate ({:<15}) {:>14.6}  se {:.6}", c.estimator, c.estimate, c.se);
        }
    }
    for (name, g, status) in out.variance.diagnostics.statuses() {
        let _ = writeln!(t, "{name:<18} {:>12}  {}", gap_text(g), status.as_str());
    }
    t
}

fn seed_of(common: &Common, cfg_seed: u64) -> u64 {
    common.seed.unwrap_or(cfg_seed)
}

pub fn fit(common: &Common, quiet: bool) -> Result<(), CliError> {
    let cfg = RunConfig::load(&common.config)?;
    let loaded = load(&cfg)?;
    let fit = loaded.fit()?;
    let ate = match loaded {
        Loaded::Point(..) => Some(
            fit.report
                .blocks()
                .iter()
                .map(|(name, cov)| {
                    let (estimate, var) = ate_contrast(&fit.params.psi, cov);
                    Contrast {
                        estimator: name,
                        estimate,
                        se: var.max(0.0).sqrt(),
                    }
                })
                .collect(),
        ),
        Loaded::Longitudinal(..) => None,
    };
    let out = FitOutput {
        estimator: loaded.name(),
        n: loaded.n(),
        psi: fit.params.psi.iter().copied().collect(),
        theta: fit.params.theta.iter().copied().collect(),
        level: cfg.level,
        variance: &fit.report,
        wald: wald(&fit, cfg.level),
        ate,
    };
    let table = fit_table(&out);
    write_file(&common.out, "fit.json", &to_json(&out))?;
    write_file(&common.out, "fit.txt", &table)?;
    if !quiet {
        print!("{table}");
    }
    Ok(())
}

#[derive(Serialize)]
struct BootstrapOutput<'a> {
    estimator: &'static str,
    n: usize,
    b: usize,
    seed: u64,
    psi: Vec<f64>,
    result: &'a BootstrapResult,
}

pub fn bootstrap(common: &Common, b: Option<usize>, level: Option<f64>, quiet: bool) -> Result<(), CliError> {
    let cfg = RunConfig::load(&common.config)?;
    let b = b.unwrap_or(cfg.bootstrap.b);
    let level = level.unwrap_or(cfg.bootstrap.level);
    if !(level > 0.0 && level < 1.0) {
        return Err(CliError::Config(format!("level must be in (0, 1), got {level}")));
    }
    if b < bootstrap::MIN_REPLICATES {
        return Err(CliError::Config(format!("--b must be at least {}", bootstrap::MIN_REPLICATES)));
    }
    let seed = seed_of(common, cfg.seed);
    let loaded = load(&cfg)?;
    let fit = loaded.fit()?;
    let result = loaded.bootstrap(b, level, seed)?;
    let out = BootstrapOutput {
        estimator: loaded.name(),
        n: loaded.n(),
        b,
        seed,
        psi: fit.params.psi.iter().copied().collect(),
        result: &result,
    };
    write_file(&common.out, "bootstrap.json", &to_json(&out))?;
    if !quiet {
        println!("percentile intervals at level {level} from {} resamples ({} failed)", b, result.failed_replicates);
        for j in 0..result.ci_lower.len() {
            println!("  psi[{}] = {:.6}  [{:.6}, {:.6}]", j + 1, fit.params.psi[j], result.ci_lower[j], result.ci_upper[j]);
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct GapLine {
    name: &'static str,
    value: Option<f64>,
    status: GapStatus,
}

#[derive(Serialize)]
struct DiagnoseOutput {
    estimator: &'static str,
    n: usize,
    diagnostics: IdentityDiagnostics,
    status: Vec<GapLine>,
}

pub fn diagnose(common: &Common, quiet: bool) -> Result<(), CliError> {
    let cfg = RunConfig::load(&common.config)?;
    let loaded = load(&cfg)?;
    let fit = loaded.fit()?;
    let d = fit.report.diagnostics;
    let status: Vec<GapLine> = d
        .statuses()
        .into_iter()
        .map(|(name, value, status)| GapLine { name, value, status })
        .collect();
    if !quiet {
        for g in &status {
            println!("{:<18} {:>12}  {}", g.name, gap_text(g.value), g.status.as_str());
        }
    }
    let out = DiagnoseOutput {
        estimator: loaded.name(),
        n: loaded.n(),
        diagnostics: d,
        status,
    };
    write_file(&common.out, "diagnose.json", &to_json(&out))
}

#[derive(Serialize)]
struct SimulateOutput<'a> {
    scenario: &'a ScenarioConfig,
    replications: usize,
    failed: usize,
    seed: u64,
    level: f64,
    #[serde(flatten)]
    result: &'a MonteCarloResult,
    coverage_at_level: Vec<simlab::CoverageEntry>,
}

fn estimates_csv(res: &MonteCarloResult) -> Result<String, CliError> {
    let p = res.truth.len();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["replicate".to_string()];
    for prefix in ["psi", "var_naive", "var_corrected_score", "var_general"] {
        header.extend((1..=p).map(|j| format!("{prefix}_{j}")));
    }
    let csv_err = |e: csv::Error| CliError::Config(e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for (i, rep) in res.reports.iter().enumerate() {
        let mut row = vec![i.to_string()];
        row.extend((0..p).map(|j| res.estimates[(i, j)].to_string()));
        for (_, cov) in rep.blocks() {
            row.extend((0..p).map(|j| cov[(j, j)].to_string()));
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("utf-8 csv"))
}

pub fn simulate(common: &Common, quiet: bool) -> Result<(), CliError> {
    let cfg = SimulateConfig::load(&common.config)?;
    let seed = seed_of(common, cfg.seed);
    let mut scenario = match (&cfg.generator, ScenarioConfig::named(&cfg.scenario, cfg.n)) {
        (Some(g), _) => ScenarioConfig {
            name: cfg.scenario.clone(),
            n: cfg.n,
            generator: g.clone(),
            seed,
        },
        (None, Some(s)) => s,
        (None, None) => return Err(CliError::Config(format!("unknown scenario '{}' (expected s1, s2 or s3)", cfg.scenario))),
    };
    scenario.seed = seed;
    scenario.validate().map_err(config_error)?;
    let result = match &scenario.generator {
        Generator::Longitudinal(_) => {
            let pipe = simlab::default_longitudinal_pipeline(&scenario, TreatmentModelMode::Estimated).map_err(config_error)?;
            simlab::run_replications(&scenario, &pipe, cfg.replications, seed)?
        }
        _ => {
            let pipe = simlab::default_point_pipeline(&scenario).map_err(config_error)?;
            simlab::run_replications(&scenario, &pipe, cfg.replications, seed)?
        }
    };
    let out = SimulateOutput {
        scenario: &scenario,
        replications: result.replications(),
        failed: result.failed,
        seed,
        level: cfg.level,
        result: &result,
        coverage_at_level: simlab::coverage(&result, cfg.level),
    };
    write_file(&common.out, "simulate.json", &to_json(&out))?;
    write_file(&common.out, "estimates.csv", &estimates_csv(&result)?)?;
    if !quiet {
        println!("{}: {} replications, n = {}", scenario.name, result.replications(), scenario.n);
        for j in 0..result.truth.len() {
            println!(
                "  psi[{}]: truth {:.4}  bias {:+.4}  empirical var {:.3e}  mean corrected {:.3e}",
                j + 1,
                result.truth[j],
                result.summary.bias[j],
                result.summary.empirical_variance[(j, j)],
                result.summary.mean_corrected_score[(j, j)]
            );
        }
        for c in &out.coverage_at_level {
            println!("  coverage {:<16} psi[{}] = {:.3} (se {:.3})", c.estimator, c.component + 1, c.coverage, c.se);
        }
    }
    Ok(())
}
