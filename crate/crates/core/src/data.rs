//! Estimator-visible data. The i.i.d. unit is a [`PointRow`] for point
//! treatment and a [`PersonHistory`] for longitudinal data.

use crate::error::{Error, Result};

/// One subject in a point-treatment study.
#[derive(Debug, Clone, PartialEq)]
pub struct PointRow {
    pub y: f64,
    pub a: u8,
    pub l: Vec<f64>,
}

impl PointRow {
    pub fn new(y: f64, a: u8, l: Vec<f64>) -> Result<Self> {
        if a > 1 {
            return Err(Error::InvalidInput(format!("treatment must be 0 or 1, got {a}")));
        }
        if !y.is_finite() || l.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("outcome and covariates must be finite".into()));
        }
        Ok(Self { y, a, l })
    }

    pub fn treated(&self) -> f64 {
        f64::from(self.a)
    }
}

/// Types whose independent units can be resampled with replacement.
pub trait Units: Sized {
    fn n_units(&self) -> usize;
    fn resample(&self, indices: &[usize]) -> Self;
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointDataset {
    covariate_names: Vec<String>,
    rows: Vec<PointRow>,
}

impl PointDataset {
    pub fn new(covariate_names: Vec<String>, rows: Vec<PointRow>) -> Result<Self> {
        let m = covariate_names.len();
        if let Some(bad) = rows.iter().find(|r| r.l.len() != m) {
            return Err(Error::DimensionMismatch {
                expected: m,
                actual: bad.l.len(),
                context: "covariate vector length",
            });
        }
        Ok(Self { covariate_names, rows })
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn rows(&self) -> &[PointRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

impl Units for PointDataset {
    fn n_units(&self) -> usize {
        self.rows.len()
    }

    fn resample(&self, indices: &[usize]) -> Self {
        Self {
            covariate_names: self.covariate_names.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }
}

/// Covariates and treatment observed at time `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeRecord {
    pub k: usize,
    pub l: Vec<f64>,
    pub a: u8,
}

/// One person's treatment history over times `0..=K` with outcomes
/// `Y_0..Y_{K+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonHistory {
    id: String,
    records: Vec<TimeRecord>,
    outcomes: Vec<f64>,
}

impl PersonHistory {
    pub fn new(id: impl Into<String>, records: Vec<TimeRecord>, outcomes: Vec<f64>) -> Result<Self> {
        let id = id.into();
        if records.is_empty() {
            return Err(Error::InvalidInput(format!("person {id} has no records")));
        }
        for (idx, rec) in records.iter().enumerate() {
            if rec.k != idx {
                return Err(Error::UnorderedRecords { id });
            }
            if rec.a > 1 {
                return Err(Error::InvalidInput(format!("person {id}: treatment must be 0 or 1")));
            }
            if rec.l.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("person {id}: non-finite covariate")));
            }
        }
        if let Some(first) = records.first() {
            if records.iter().any(|r| r.l.len() != first.l.len()) {
                return Err(Error::InvalidInput(format!("person {id}: ragged covariates")));
            }
        }
        if outcomes.len() != records.len() + 1 {
            return Err(Error::DimensionMismatch {
                expected: records.len() + 1,
                actual: outcomes.len(),
                context: "outcomes Y_0..Y_{K+1}",
            });
        }
        if outcomes.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("person {id}: non-finite outcome")));
        }
        Ok(Self { id, records, outcomes })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn records(&self) -> &[TimeRecord] {
        &self.records
    }

    /// Horizon `K`: the last time at which treatment can start.
    pub fn horizon(&self) -> usize {
        self.records.len() - 1
    }

    /// `Y_k` for `k = 0..=K+1`.
    pub fn outcome(&self, k: usize) -> f64 {
        self.outcomes[k]
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    /// First time with `A_k = 1`, or `None` when never treated.
    pub fn t_start(&self) -> Option<usize> {
        self.records.iter().position(|r| r.a == 1)
    }

    /// Treatment never stops once started.
    pub fn is_absorbing(&self) -> bool {
        match self.t_start() {
            None => true,
            Some(t) => self.records[t..].iter().all(|r| r.a == 1),
        }
    }

    /// `1{Ā_{m−1} = 0}`: untreated before time `m`.
    pub fn at_risk(&self, m: usize) -> bool {
        self.records[..m].iter().all(|r| r.a == 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset {
    covariate_names: Vec<String>,
    persons: Vec<PersonHistory>,
}

impl LongitudinalDataset {
    pub fn new(covariate_names: Vec<String>, persons: Vec<PersonHistory>) -> Result<Self> {
        let m = covariate_names.len();
        for p in &persons {
            if let Some(r) = p.records.iter().find(|r| r.l.len() != m) {
                return Err(Error::DimensionMismatch {
                    expected: m,
                    actual: r.l.len(),
                    context: "longitudinal covariate length",
                });
            }
        }
        Ok(Self { covariate_names, persons })
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn persons(&self) -> &[PersonHistory] {
        &self.persons
    }

    pub fn len(&self) -> usize {
        self.persons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.persons.is_empty()
    }
}

impl Units for LongitudinalDataset {
    fn n_units(&self) -> usize {
        self.persons.len()
    }

    fn resample(&self, indices: &[usize]) -> Self {
        Self {
            covariate_names: self.covariate_names.clone(),
            persons: indices.iter().map(|&i| self.persons[i].clone()).collect(),
        }
    }
}

/// Position of each named column, or an error naming the first missing one.
pub fn resolve_columns(names: &[String], wanted: &[String]) -> Result<Vec<usize>> {
    wanted
        .iter()
        .map(|w| {
            names
                .iter()
                .position(|n| n == w)
                .ok_or_else(|| Error::InvalidInput(format!("unknown covariate column '{w}'")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(k: usize, a: u8) -> TimeRecord {
        TimeRecord { k, l: vec![0.0], a }
    }

    #[test]
    fn person_validation() {
        let p = PersonHistory::new("p", vec![rec(0, 0), rec(1, 1), rec(2, 1)], vec![0.0; 4]).unwrap();
        assert_eq!(p.t_start(), Some(1));
        assert!(p.is_absorbing());
        assert!(p.at_risk(0) && p.at_risk(1) && !p.at_risk(2));
        assert_eq!(p.horizon(), 2);

        let err = PersonHistory::new("q", vec![rec(0, 0), rec(2, 0)], vec![0.0; 3]).unwrap_err();
        assert_eq!(err, Error::UnorderedRecords { id: "q".into() });
        let err = PersonHistory::new("r", vec![rec(0, 0)], vec![0.0; 1]).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));

        let p = PersonHistory::new("s", vec![rec(0, 1), rec(1, 0)], vec![0.0; 3]).unwrap();
        assert!(!p.is_absorbing());
    }

    #[test]
    fn resample_preserves_size() {
        let rows = (0..5).map(|i| PointRow::new(i as f64, (i % 2) as u8, vec![]).unwrap()).collect();
        let d = PointDataset::new(vec![], rows).unwrap();
        let r = d.resample(&[0, 0, 4, 2, 2]);
        assert_eq!(r.n_units(), 5);
        assert_eq!(r.rows()[1].y, 0.0);
        assert_eq!(r.rows()[2].y, 4.0);
    }

    #[test]
    fn bad_rows_rejected() {
        assert!(PointRow::new(1.0, 2, vec![]).is_err());
        assert!(PointRow::new(f64::NAN, 0, vec![]).is_err());
        let rows = vec![PointRow::new(1.0, 0, vec![1.0]).unwrap()];
        assert!(PointDataset::new(vec![], rows).is_err());
    }
}
