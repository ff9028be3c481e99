//! CSV input. Point data: `y, a, <covariates…>`; longitudinal data in long
//! format `id, k, a, y, <covariates…>`, sorted by `(id, k)`, with rows
//! `k = 0..=K+1` per person (the last row contributes only `Y_{K+1}`).

use std::collections::HashSet;
use std::path::Path;

use eqsw_core::data::{LongitudinalDataset, PersonHistory, PointDataset, PointRow, TimeRecord};
use eqsw_core::Error;

use crate::CliError;

fn open(path: &Path) -> Result<csv::Reader<std::fs::File>, CliError> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize, CliError> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| CliError::Config(format!("missing column '{name}'")))
}

fn number(field: &str, line: u64, name: &str) -> Result<f64, CliError> {
    field
        .parse()
        .map_err(|_| CliError::Config(format!("line {line}: column '{name}' is not a number: '{field}'")))
}

fn treatment(field: &str, line: u64) -> Result<u8, CliError> {
    match field {
        "0" => Ok(0),
        "1" => Ok(1),
        _ => Err(CliError::Config(format!("line {line}: treatment must be 0 or 1, got '{field}'"))),
    }
}

fn data_error(e: Error) -> CliError {
    CliError::Config(e.to_string())
}

pub fn read_point(path: &Path) -> Result<PointDataset, CliError> {
    let mut rdr = open(path)?;
    let headers = rdr.headers().map_err(|e| CliError::Config(e.to_string()))?.clone();
    let (iy, ia) = (column(&headers, "y")?, column(&headers, "a")?);
    let cov: Vec<usize> = (0..headers.len()).filter(|&i| i != iy && i != ia).collect();
    let names: Vec<String> = cov.iter().map(|&i| headers[i].to_string()).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::Config(e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let y = number(&rec[iy], line, "y")?;
        let a = treatment(&rec[ia], line)?;
        let l = cov.iter().map(|&i| number(&rec[i], line, &headers[i])).collect::<Result<Vec<_>, _>>()?;
        rows.push(PointRow::new(y, a, l).map_err(data_error)?);
    }
    PointDataset::new(names, rows).map_err(data_error)
}

struct LongRow {
    k: usize,
    a: u8,
    y: f64,
    l: Vec<f64>,
}

fn person(id: String, rows: Vec<LongRow>) -> Result<PersonHistory, CliError> {
    if rows.len() < 2 {
        return Err(CliError::Config(format!("person {id} needs rows k = 0..=K+1")));
    }
    if rows.last().map(|r| r.k) != Some(rows.len() - 1) {
        return Err(data_error(Error::UnorderedRecords { id }));
    }
    let outcomes = rows.iter().map(|r| r.y).collect();
    let records = rows[..rows.len() - 1]
        .iter()
        .map(|r| TimeRecord {
            k: r.k,
            l: r.l.clone(),
            a: r.a,
        })
        .collect();
    PersonHistory::new(id, records, outcomes).map_err(data_error)
}

pub fn read_longitudinal(path: &Path) -> Result<LongitudinalDataset, CliError> {
    let mut rdr = open(path)?;
    let headers = rdr.headers().map_err(|e| CliError::Config(e.to_string()))?.clone();
    let (iid, ik, ia, iy) = (column(&headers, "id")?, column(&headers, "k")?, column(&headers, "a")?, column(&headers, "y")?);
    let cov: Vec<usize> = (0..headers.len()).filter(|i| ![iid, ik, ia, iy].contains(i)).collect();
    let names: Vec<String> = cov.iter().map(|&i| headers[i].to_string()).collect();
    let mut persons = Vec::new();
    let mut seen = HashSet::new();
    let mut current: Option<(String, Vec<LongRow>)> = None;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::Config(e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let id = rec[iid].to_string();
        let k = rec[ik]
            .parse::<usize>()
            .map_err(|_| CliError::Config(format!("line {line}: k must be a non-negative integer")))?;
        let row = LongRow {
            k,
            a: treatment(&rec[ia], line)?,
            y: number(&rec[iy], line, "y")?,
            l: cov.iter().map(|&i| number(&rec[i], line, &headers[i])).collect::<Result<Vec<_>, _>>()?,
        };
        match &mut current {
            Some((cur, rows)) if *cur == id => rows.push(row),
            _ => {
                if let Some((done, rows)) = current.take() {
                    persons.push(person(done, rows)?);
                }
                if !seen.insert(id.clone()) {
                    return Err(data_error(Error::UnorderedRecords { id }));
                }
                current = Some((id, vec![row]));
            }
        }
    }
    if let Some((done, rows)) = current {
        persons.push(person(done, rows)?);
    }
    LongitudinalDataset::new(names, persons).map_err(data_error)
}
