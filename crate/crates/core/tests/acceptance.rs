//! Acceptance suite: one line per criterion, non-zero exit if any fails.
//!
//! Runs without the libtest harness so the lines reach stdout uncaptured.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use eqsw_core::data::{PersonHistory, PointDataset, TimeRecord};
use eqsw_core::eecore::{self, MomentEstimates, ParamVector, ScoreRows, SolverConfig};
use eqsw_core::estimators::{snmm_u1, GammaBasis, Iptw, SnmmSpec};
use eqsw_core::nuisance::{LogisticSpec, NuisanceEquations, PooledDesign, PooledLogisticSpec, Propensity};
use eqsw_core::numkit::{self, Matrix, Vector};
use eqsw_core::pipeline::{NuisanceMode, OutcomeMode, PointEstimator, PointPipeline, TreatmentModelMode};
use eqsw_core::simlab::{self, Generator, MonteCarloResult, ScenarioConfig};
use eqsw_core::variance;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn coverage_of(res: &MonteCarloResult, estimator: &str, j: usize) -> f64 {
    res.summary
        .coverage
        .iter()
        .find(|c| c.estimator == estimator && c.component == j)
        .map(|c| c.coverage)
        .expect("coverage entry")
}

fn diag(m: &Matrix) -> Vec<f64> {
    (0..m.nrows()).map(|i| m[(i, i)]).collect()
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(", ")
}

fn s1_params() -> (Vec<f64>, (Vec<f64>, Vec<f64>)) {
    let Generator::PointTreatment(s) = ScenarioConfig::s1(2000).generator else { unreachable!() };
    (s.theta.clone(), s.outcome_truth())
}

fn iptw_pipeline(mode: NuisanceMode) -> PointPipeline {
    let names = vec!["l1".to_string(), "l2".to_string()];
    let spec = LogisticSpec {
        columns: names.clone(),
        intercept: true,
    };
    PointPipeline::new(PointEstimator::Iptw, spec, mode, &names, SolverConfig::default()).unwrap()
}

/// Random valid moment estimates built from random score rows.
fn random_moments(rng: &mut ChaCha8Rng) -> MomentEstimates {
    let p = rng.random_range(1..5);
    let q = rng.random_range(1..5);
    let n = rng.random_range(20..200);
    let u1 = Matrix::from_fn(n, p, |_, _| rng.random_range(-2.0..2.0));
    let mix = Matrix::from_fn(p, q, |_, _| rng.random_range(-1.0..1.0));
    let u2 = Matrix::from_fn(n, q, |_, _| rng.random_range(-2.0..2.0)) + &u1 * mix;
    let bread = Matrix::from_fn(p, p, |_, _| rng.random_range(-0.5..0.5)) - Matrix::identity(p, p) * 2.0;
    let d1 = Matrix::from_fn(p, q, |_, _| rng.random_range(-1.0..1.0));
    let d2 = Matrix::from_fn(q, q, |_, _| rng.random_range(-0.5..0.5)) - Matrix::identity(q, q) * 2.0;
    let nf = n as f64;
    MomentEstimates {
        bread,
        d_theta_u1: d1,
        meat: numkit::symmetrize(&(u1.transpose() * &u1)) / nf,
        cross: u1.transpose() * &u2 / nf,
        fisher: numkit::symmetrize(&(u2.transpose() * &u2)) / nf,
        d_theta_u2: d2,
        n,
    }
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = f64::INFINITY;
    for _ in 0..100 {
        let m = random_moments(&mut rng);
        m.validate().unwrap();
        let naive = variance::sandwich_naive(&m).unwrap();
        let corrected = variance::sandwich_corrected_score(&m).unwrap();
        worst = worst.min(numkit::min_eigenvalue(&numkit::symmetrize(&(naive - corrected))).unwrap());
    }
    check(worst >= -1e-8, format!("min eigenvalue of naive - corrected over 100 draws = {worst:.3e}"))
}

struct S1Runs {
    estimated: MonteCarloResult,
    known: MonteCarloResult,
    elapsed: Duration,
}

fn s1_runs() -> S1Runs {
    let cfg = ScenarioConfig::s1(2000);
    let (theta, _) = s1_params();
    let pipes = [iptw_pipeline(NuisanceMode::Score), iptw_pipeline(NuisanceMode::Known { theta })];
    let t = Instant::now();
    let mut res = simlab::run_paired(&cfg, &pipes, 1000, 101).unwrap();
    let elapsed = t.elapsed();
    let known = res.pop().unwrap();
    S1Runs {
        estimated: res.pop().unwrap(),
        known,
        elapsed,
    }
}

fn criterion_2(runs: &S1Runs) -> Outcome {
    let r = &runs.estimated;
    let naive = diag(&r.summary.mean_naive);
    let emp = diag(&r.summary.empirical_variance);
    let conservative = naive.iter().zip(&emp).all(|(a, b)| a >= b);
    let cov_naive: Vec<f64> = (0..2).map(|j| coverage_of(r, "naive", j)).collect();
    let cov_corr: Vec<f64> = (0..2).map(|j| coverage_of(r, "corrected_score", j)).collect();
    let ordered = cov_naive.iter().zip(&cov_corr).all(|(a, b)| a >= b);
    let nominal = cov_corr.iter().all(|c| (0.93..=0.97).contains(c));
    let fast = runs.elapsed < Duration::from_secs(300);
    check(
        conservative && ordered && nominal && fast,
        format!(
            "mean naive diag [{}] vs empirical [{}]; naive coverage [{}], corrected coverage [{}]; {:.1}s",
            fmt(&naive),
            fmt(&emp),
            fmt(&cov_naive),
            fmt(&cov_corr),
            runs.elapsed.as_secs_f64()
        ),
    )
}

fn criterion_3(runs: &S1Runs) -> Outcome {
    let r = &runs.estimated;
    let ratio: Vec<f64> = diag(&r.summary.mean_corrected_score)
        .iter()
        .zip(diag(&r.summary.empirical_variance))
        .map(|(a, b)| a / b)
        .collect();
    check(
        ratio.iter().all(|x| (0.9..=1.1).contains(x)),
        format!("mean corrected / empirical variance = [{}]", fmt(&ratio)),
    )
}

fn criterion_4(runs: &S1Runs) -> Outcome {
    let est = diag(&runs.estimated.summary.empirical_variance);
    let known = diag(&runs.known.summary.empirical_variance);
    check(
        est.iter().zip(&known).all(|(a, b)| a <= b),
        format!("empirical variance with estimated theta [{}] vs known theta [{}]", fmt(&est), fmt(&known)),
    )
}

fn rel_diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / y).collect()
}

struct AipwRuns {
    estimated: MonteCarloResult,
    known_theta: MonteCarloResult,
    fixed_xi: MonteCarloResult,
}

fn aipw_runs() -> AipwRuns {
    let cfg = ScenarioConfig::s1(2000);
    let (theta, (treated, untreated)) = s1_params();
    let pipes = [
        simlab::aipw_pipeline(&cfg, NuisanceMode::Score, OutcomeMode::Estimated).unwrap(),
        simlab::aipw_pipeline(&cfg, NuisanceMode::Known { theta }, OutcomeMode::Estimated).unwrap(),
        simlab::aipw_pipeline(&cfg, NuisanceMode::Score, OutcomeMode::Fixed { treated, untreated }).unwrap(),
    ];
    let mut res = simlab::run_paired(&cfg, &pipes, 1000, 202).unwrap();
    let fixed_xi = res.pop().unwrap();
    let known_theta = res.pop().unwrap();
    AipwRuns {
        estimated: res.pop().unwrap(),
        known_theta,
        fixed_xi,
    }
}

fn criterion_5(runs: &AipwRuns) -> Outcome {
    let a = diag(&runs.estimated.summary.empirical_variance);
    let b = diag(&runs.known_theta.summary.empirical_variance);
    let rel = rel_diff(&a, &b);
    let ratio = runs
        .estimated
        .reports
        .iter()
        .map(|r| numkit::max_abs(&r.correction) / numkit::max_abs(&r.naive))
        .sum::<f64>()
        / runs.estimated.reports.len() as f64;
    check(
        rel.iter().all(|x| *x < 0.05) && ratio < 0.05,
        format!("relative variance difference theta-hat vs theta* = [{}]; mean |correction|/|naive| = {ratio:.4}", fmt(&rel)),
    )
}

fn criterion_6(runs: &AipwRuns) -> Outcome {
    let a = diag(&runs.estimated.summary.empirical_variance);
    let b = diag(&runs.fixed_xi.summary.empirical_variance);
    let rel = rel_diff(&a, &b);
    check(
        rel.iter().all(|x| *x < 0.05),
        format!("relative variance difference xi-hat vs xi* = [{}]", fmt(&rel)),
    )
}

fn criterion_7() -> Outcome {
    let t = Instant::now();
    let cfg = ScenarioConfig::s1(5000);
    let data: PointDataset = simlab::replicate_dataset(&cfg, 303, 0).unwrap();
    let fit = eqsw_core::pipeline::Pipeline::fit(&iptw_pipeline(NuisanceMode::Score), &data).unwrap();
    let d = fit.report.diagnostics;
    let (g1, g2, g3) = (d.ddtheta_gap.unwrap(), d.fisher_gap.unwrap(), d.orthogonality_gap.unwrap());
    let elapsed = t.elapsed();
    check(
        g1 < 0.05 && g2 < 0.05 && g3 < 1e-10 && elapsed < Duration::from_secs(30),
        format!("ddtheta_gap = {g1:.3e}, fisher_gap = {g2:.3e}, orthogonality_gap = {g3:.3e}; {:.2}s", elapsed.as_secs_f64()),
    )
}

fn criterion_8() -> Outcome {
    let t = Instant::now();
    let cfg = ScenarioConfig::s1(2000);
    let study = simlab::run_bootstrap_study(&cfg, &iptw_pipeline(NuisanceMode::Score), 300, 500, 0.95, 404).unwrap();
    let elapsed = t.elapsed();
    let ratio_ok = study.variance_ratio.iter().all(|x| (0.85..=1.15).contains(x));
    let cov_ok = study.coverage.iter().all(|x| (0.92..=0.98).contains(x));
    check(
        ratio_ok && cov_ok && elapsed < Duration::from_secs(1800),
        format!(
            "bootstrap / corrected variance = [{}]; percentile coverage = [{}]; {} replicates; {:.1}s",
            fmt(&study.variance_ratio),
            fmt(&study.coverage),
            study.replications,
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_9() -> Outcome {
    let cfg = ScenarioConfig::s3(2000);
    let pipe = simlab::default_point_pipeline(&cfg).unwrap();
    let res = simlab::run_replications(&cfg, &pipe, 1000, 505).unwrap();
    let cov: Vec<f64> = (0..2).map(|j| coverage_of(&res, "general", j)).collect();
    let corr: Vec<f64> = (0..2).map(|j| coverage_of(&res, "corrected_score", j)).collect();
    check(
        cov.iter().all(|c| (0.93..=0.97).contains(c)),
        format!("general-formula coverage = [{}] (corrected-score, not applicable here: [{}])", fmt(&cov), fmt(&corr)),
    )
}

fn snmm_fixture() -> (f64, f64) {
    let names = vec!["l1".to_string()];
    let person = |id: &str, l: [f64; 2], a: [u8; 2], y: [f64; 3]| {
        let records = (0..2).map(|k| TimeRecord { k, l: vec![l[k]], a: a[k] }).collect();
        PersonHistory::new(id, records, y.to_vec()).unwrap()
    };
    let people = [
        person("a", [0.2, -0.4], [0, 1], [0.0, 1.0, 3.0]),
        person("b", [1.0, 0.5], [0, 0], [0.5, 1.5, 2.5]),
    ];
    let spec = SnmmSpec::new(GammaBasis::Duration, 1);
    let design = PooledDesign::new(
        &PooledLogisticSpec {
            columns: names.clone(),
            lag_treatment: false,
            intercept: true,
            at_risk_only: true,
        },
        &names,
    )
    .unwrap();
    let psi = Vector::from_element(1, 0.8);
    let theta = Vector::from_vec(vec![-0.5, 1.0]);
    let total: f64 = people.iter().map(|p| snmm_u1(&spec, &psi, &theta, p, &design).unwrap()[0]).sum();
    // Worked by hand: person a gives −5.4·expit(−0.3) + 2.2·(1 − expit(−0.9)),
    // person b gives −6.5·expit(0.5) − 2.5·expit(0).
    (total / 2.0, -3.014953578127044)
}

fn criterion_10() -> Outcome {
    let (code, hand) = snmm_fixture();
    let fixture_ok = (code - hand).abs() < 1e-12;
    let cfg = ScenarioConfig::s2(1000);
    let pipe = simlab::default_longitudinal_pipeline(&cfg, TreatmentModelMode::Estimated).unwrap();
    let res = simlab::run_replications(&cfg, &pipe, 500, 606).unwrap();
    let z: Vec<f64> = (0..3).map(|j| res.summary.bias[j] / res.mean_se(j)).collect();
    let ratio: Vec<f64> = diag(&res.summary.mean_corrected_score)
        .iter()
        .zip(diag(&res.summary.empirical_variance))
        .map(|(a, b)| a / b)
        .collect();
    check(
        fixture_ok && z.iter().all(|v| v.abs() <= 4.0) && ratio.iter().all(|r| (r - 1.0).abs() <= 0.15),
        format!(
            "bias/SE = [{}]; corrected / empirical = [{}]; fixture |diff| = {:.1e}",
            fmt(&z),
            fmt(&ratio),
            (code - hand).abs()
        ),
    )
}

fn criterion_11() -> Outcome {
    let t = Instant::now();
    let cfg = ScenarioConfig::s1(2000);
    let data: PointDataset = simlab::replicate_dataset(&cfg, 707, 0).unwrap();
    let names = data.covariate_names().to_vec();
    let spec = LogisticSpec {
        columns: names.clone(),
        intercept: true,
    };
    let fns = Iptw::new(Propensity::from_spec(&spec, &names, NuisanceEquations::Score).unwrap());
    let solver = SolverConfig::default();
    let init = ParamVector::zeros(2, 3);
    let stacked = eecore::solve_stacked(&fns, data.rows(), &init, &solver).unwrap();
    let profile = eecore::solve_profile(&fns, data.rows(), &init, &solver).unwrap();
    let solve_gap = (stacked.stacked() - profile.stacked()).amax();

    let (m, rows): (MomentEstimates, ScoreRows) = eecore::moments_and_rows(&fns, data.rows(), &profile, solver.fd_step_rel).unwrap();
    let naive = variance::sandwich_naive(&m).unwrap();
    let corrected = variance::sandwich_corrected_score(&m).unwrap();
    let correction = variance::correction_term(&m).unwrap();
    let decomposition = (&naive - (&corrected + &correction)).amax();
    let (_, resid) = variance::projection_residuals(&m, &rows).unwrap();
    let route = (variance::corrected_from_residuals(&m, &resid).unwrap() - &corrected).amax();
    let fit = eqsw_core::nuisance::fit_logistic(&spec, &data).unwrap();
    let fisher_route = (variance::correction_term_from_theta_var(&m, &fit.var_theta).unwrap() - &correction).amax();
    let elapsed = t.elapsed();
    check(
        decomposition < 1e-12 && route < 1e-10 && fisher_route < 1e-10 && solve_gap < 1e-7 && elapsed < Duration::from_secs(10),
        format!(
            "naive - (corrected + correction) = {decomposition:.1e}; moment vs residual route = {route:.1e}; fisher routes = {fisher_route:.1e}; stacked vs profile = {solve_gap:.1e}; {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    // Positional arguments filter criteria by number ("3") or name fragment.
    let filters: Vec<&String> = args.iter().filter(|a| !a.starts_with('-')).collect();
    let wanted = |id: usize, name: &str| {
        filters.is_empty() || filters.iter().any(|f| f.as_str() == id.to_string() || name.contains(f.as_str()) || "acceptance".contains(f.as_str()))
    };
    let s1 = std::cell::OnceCell::new();
    let aipw = std::cell::OnceCell::new();
    type Criterion<'a> = (usize, &'static str, Box<dyn Fn() -> Outcome + 'a>);
    let criteria: Vec<Criterion> = vec![
        (1, "loewner ordering", Box::new(criterion_1)),
        (2, "naive sandwich is conservative", Box::new(|| criterion_2(s1.get_or_init(s1_runs)))),
        (3, "score correction is consistent", Box::new(|| criterion_3(s1.get_or_init(s1_runs)))),
        (4, "estimated nuisance beats known", Box::new(|| criterion_4(s1.get_or_init(s1_runs)))),
        (5, "efficient estimator unaffected", Box::new(|| criterion_5(aipw.get_or_init(aipw_runs)))),
        (6, "outcome-model coefficients irrelevant", Box::new(|| criterion_6(aipw.get_or_init(aipw_runs)))),
        (7, "identity diagnostics", Box::new(criterion_7)),
        (8, "bootstrap agreement", Box::new(criterion_8)),
        (9, "general formula, non-score nuisance", Box::new(criterion_9)),
        (10, "snmm end to end", Box::new(criterion_10)),
        (11, "algebraic route equivalences", Box::new(criterion_11)),
    ];
    let mut failed = Vec::new();
    let mut ran = 0;
    for (id, name, f) in &criteria {
        if !wanted(*id, name) {
            continue;
        }
        let t = Instant::now();
        let o = f();
        ran += 1;
        println!(
            "[{}] criterion {id:>2} {name}: {} ({:.1}s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
        if !o.pass {
            failed.push(*id);
        }
    }
    println!("acceptance: {}/{ran} criteria passed", ran - failed.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
