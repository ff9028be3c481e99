//! Nonparametric bootstrap with percentile intervals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::Units;
use crate::error::{Error, Result};
use crate::numkit::{Matrix, Vector};
use crate::pipeline::Pipeline;
use crate::variance::{matrix_rows, vector_list};

pub const MIN_REPLICATES: usize = 200;
/// Largest tolerated share of failed replicates.
pub const MAX_FAILURE_RATE: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapResult {
    /// Successful replicate estimates of `ψ`, one row each, in replicate order.
    #[serde(with = "matrix_rows")]
    pub replicate_estimates: Matrix,
    #[serde(with = "vector_list")]
    pub ci_lower: Vector,
    #[serde(with = "vector_list")]
    pub ci_upper: Vector,
    pub level: f64,
    pub failed_replicates: usize,
}

impl BootstrapResult {
    /// Sample covariance of the replicate estimates.
    pub fn variance(&self) -> Matrix {
        let r = &self.replicate_estimates;
        let b = r.nrows();
        let mean = r.row_mean();
        let centred = Matrix::from_fn(b, r.ncols(), |i, j| r[(i, j)] - mean[j]);
        centred.transpose() * centred / (b as f64 - 1.0)
    }
}

/// Counter-based stream for replicate `index` under `seed`.
pub fn replicate_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Sample quantile with linear interpolation between order statistics
/// (type 7). `sorted` must be ascending and non-empty.
pub fn quantile_type7(sorted: &[f64], prob: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentile interval at confidence `level` from `b` resamples of the
/// independent units of `data`. Each resample reruns the whole pipeline,
/// warm-started from the full-data estimate.
pub fn percentile_ci<P: Pipeline>(pipeline: &P, data: &P::Data, b: usize, level: f64, seed: u64) -> Result<BootstrapResult> {
    if b < MIN_REPLICATES {
        return Err(Error::InvalidInput(format!("bootstrap needs at least {MIN_REPLICATES} replicates, got {b}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidInput(format!("level must be in (0, 1), got {level}")));
    }
    let n = data.n_units();
    if n == 0 {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    let full = pipeline.estimate(data, None)?;
    let outcomes: Vec<Result<Vector>> = (0..b)
        .into_par_iter()
        .map(|i| {
            let mut rng = replicate_rng(seed, i as u64);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let sample = data.resample(&idx);
            pipeline.estimate(&sample, Some(&full)).map(|f| f.psi)
        })
        .collect();
    let mut failed = 0;
    let mut estimates = Vec::with_capacity(b);
    for o in outcomes {
        match o {
            Ok(psi) => estimates.push(psi),
            Err(e) => {
                log::debug!("bootstrap replicate failed: {e}");
                failed += 1;
            }
        }
    }
    if failed as f64 > MAX_FAILURE_RATE * b as f64 {
        return Err(Error::TooManyFailures { failed, total: b });
    }
    let p = pipeline.dim_psi();
    let reps = Matrix::from_fn(estimates.len(), p, |i, j| estimates[i][j]);
    let alpha = 1.0 - level;
    let mut lower = Vector::zeros(p);
    let mut upper = Vector::zeros(p);
    for j in 0..p {
        let mut col: Vec<f64> = reps.column(j).iter().copied().collect();
        col.sort_by(f64::total_cmp);
        lower[j] = quantile_type7(&col, alpha / 2.0);
        upper[j] = quantile_type7(&col, 1.0 - alpha / 2.0);
    }
    Ok(BootstrapResult {
        replicate_estimates: reps,
        ci_lower: lower,
        ci_upper: upper,
        level,
        failed_replicates: failed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{PointDataset, PointRow};
    use crate::eecore::SolverConfig;
    use crate::nuisance::LogisticSpec;
    use crate::pipeline::{NuisanceMode, PointEstimator, PointPipeline};

    fn iptw(names: &[String]) -> PointPipeline {
        let spec = LogisticSpec {
            columns: names.to_vec(),
            intercept: true,
        };
        PointPipeline::new(PointEstimator::Iptw, spec, NuisanceMode::Score, names, SolverConfig::default()).unwrap()
    }

    #[test]
    fn type7_matches_hand_values() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_type7(&x, 0.0), 1.0);
        assert_eq!(quantile_type7(&x, 1.0), 4.0);
        assert!((quantile_type7(&x, 0.5) - 2.5).abs() < 1e-15);
        assert!((quantile_type7(&x, 0.1) - 1.3).abs() < 1e-15);
    }

    #[test]
    fn degenerate_data_has_zero_width() {
        let rows: Vec<PointRow> = (0..20).map(|i| PointRow::new(3.0, (i % 2) as u8, vec![]).unwrap()).collect();
        let data = PointDataset::new(vec![], rows).unwrap();
        let spec = LogisticSpec {
            columns: vec![],
            intercept: true,
        };
        let known = NuisanceMode::Known { theta: vec![0.0] };
        let pipe = PointPipeline::new(PointEstimator::Iptw, spec, known, &[], SolverConfig::default()).unwrap();
        // Mixed-arm rows with equal outcome: every resample gives ψ* = (3, 3)
        // unless an arm is empty, which fails the solve.
        let res = percentile_ci(&pipe, &data, 200, 0.95, 5).unwrap();
        assert_eq!(res.ci_lower, res.ci_upper);
        assert!((res.ci_lower[0] - 3.0).abs() < 1e-9);
        assert!(res.variance().amax() < 1e-18);
    }

    #[test]
    fn same_seed_same_result() {
        let rows: Vec<PointRow> = (0..60)
            .map(|i| {
                let l = ((i * 7) % 11) as f64 / 5.0 - 1.0;
                PointRow::new(l + (i % 3) as f64, u8::from((i * 13) % 7 < 3 + usize::from(l > 0.0)), vec![l]).unwrap()
            })
            .collect();
        let names = vec!["l1".to_string()];
        let data = PointDataset::new(names.clone(), rows).unwrap();
        let pipe = iptw(&names);
        let a = percentile_ci(&pipe, &data, 200, 0.9, 42).unwrap();
        let b = percentile_ci(&pipe, &data, 200, 0.9, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.ci_lower.iter().zip(a.ci_upper.iter()).all(|(l, u)| l <= u));
        let c = percentile_ci(&pipe, &data, 200, 0.9, 43).unwrap();
        assert_ne!(a.replicate_estimates, c.replicate_estimates);
    }

    #[test]
    fn too_few_replicates() {
        let data = PointDataset::new(vec![], vec![]).unwrap();
        let err = percentile_ci(&iptw(&[]), &data, 50, 0.95, 1).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn failures_are_capped() {
        // Two treated units out of 30: many resamples have no treated unit.
        let rows: Vec<PointRow> = (0..30).map(|i| PointRow::new(i as f64, u8::from(i < 2), vec![]).unwrap()).collect();
        let data = PointDataset::new(vec![], rows).unwrap();
        let err = percentile_ci(&iptw(&[]), &data, 200, 0.95, 3).unwrap_err();
        assert!(matches!(err, Error::TooManyFailures { .. }), "{err:?}");
    }
}
