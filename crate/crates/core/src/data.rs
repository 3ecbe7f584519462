//! CSV interchange: indicator/input tables in, datasets and trajectories out.
//!
//! Data files are comma-separated with a header row `y1..yk,x1..xr`.
//! Rows with a missing value are rejected; the filter has no missing-data path.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simgen::{Dataset, ScenarioConfig, TvpPath};

pub fn expected_header(k: usize, r: usize) -> Vec<String> {
    (1..=k).map(|i| format!("y{i}")).chain((1..=r).map(|j| format!("x{j}"))).collect()
}

fn is_missing(field: &str) -> bool {
    let f = field.trim();
    f.is_empty() || f.eq_ignore_ascii_case("na") || f.eq_ignore_ascii_case("nan") || f == "."
}

/// Reads a `y1..yk,x1..xr` table into `(T×k observations, T×r inputs)`.
pub fn read_data_csv(path: &Path, k: usize, r: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let want = expected_header(k, r);
    if header != want {
        return Err(Error::Data(format!(
            "header {:?} does not match the model (expected {:?})",
            header, want
        )));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row_no = i + 1;
        if rec.len() != k + r {
            return Err(Error::Data(format!("row {row_no} has {} fields, expected {}", rec.len(), k + r)));
        }
        let mut vals = Vec::with_capacity(k + r);
        for (j, field) in rec.iter().enumerate() {
            if is_missing(field) {
                return Err(Error::MissingData {
                    row: row_no,
                    column: want[j].clone(),
                });
            }
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Data(format!("row {row_no}, column {}: '{field}' is not a number", want[j]))
            })?;
            if !v.is_finite() {
                return Err(Error::MissingData {
                    row: row_no,
                    column: want[j].clone(),
                });
            }
            vals.push(v);
        }
        rows.push(vals);
    }
    if rows.is_empty() {
        return Err(Error::Data("no data rows".into()));
    }
    let t_len = rows.len();
    let obs = DMatrix::from_fn(t_len, k, |t, i| rows[t][i]);
    let inputs = DMatrix::from_fn(t_len, r, |t, j| rows[t][k + j]);
    Ok((obs, inputs))
}

/// Writes a matrix with a header row; an optional leading `t` column is 1-based.
pub fn write_table(path: &Path, header: &[String], rows: &DMatrix<f64>, with_time: bool) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut h: Vec<String> = Vec::new();
    if with_time {
        h.push("t".into());
    }
    h.extend(header.iter().cloned());
    w.write_record(&h)?;
    for t in 0..rows.nrows() {
        let mut rec: Vec<String> = Vec::with_capacity(h.len());
        if with_time {
            rec.push((t + 1).to_string());
        }
        rec.extend(rows.row(t).iter().map(|v| format!("{v:e}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// JSON sidecar describing how a dataset was generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub scenario: ScenarioConfig,
    pub generating_values: BTreeMap<String, f64>,
    pub truth_paths: Vec<TvpPath>,
}

/// Writes `data.csv` (`y1..y6,x1`) and `truth.json` into `dir`.
pub fn write_dataset(d: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let k = d.observations.ncols();
    let r = d.inputs.ncols();
    let mut joined = DMatrix::zeros(d.observations.nrows(), k + r);
    joined.columns_mut(0, k).copy_from(&d.observations);
    joined.columns_mut(k, r).copy_from(&d.inputs);
    write_table(&dir.join("data.csv"), &expected_header(k, r), &joined, false)?;
    let sidecar = DatasetSidecar {
        scenario: d.scenario.clone(),
        generating_values: d.generating_values.clone(),
        truth_paths: d.truth_paths.clone(),
    };
    fs::write(dir.join("truth.json"), serde_json::to_string_pretty(&sidecar)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::{gen_dataset, Simulation, SubCondition};

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = gen_dataset(&ScenarioConfig::new(Simulation::Intervention, SubCondition::A, 30, 2)).unwrap();
        write_dataset(&d, dir.path()).unwrap();
        let (y, x) = read_data_csv(&dir.path().join("data.csv"), 6, 1).unwrap();
        assert_eq!(y, d.observations);
        assert_eq!(x, d.inputs);
        let side: DatasetSidecar =
            serde_json::from_str(&fs::read_to_string(dir.path().join("truth.json")).unwrap()).unwrap();
        assert_eq!(side.truth_paths, d.truth_paths);
    }

    #[test]
    fn rejects_missing_and_bad_headers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        fs::write(&p, "y1,y2,x1\n1,2,0\n1,,0\n").unwrap();
        match read_data_csv(&p, 2, 1) {
            Err(Error::MissingData { row, column }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "y2");
            }
            other => panic!("{other:?}"),
        }
        fs::write(&p, "y1,x1,y2\n1,2,0\n").unwrap();
        assert!(matches!(read_data_csv(&p, 2, 1), Err(Error::Data(_))));
        fs::write(&p, "y1,y2,x1\n1,NA,0\n").unwrap();
        assert!(matches!(read_data_csv(&p, 2, 1), Err(Error::MissingData { .. })));
    }
}
