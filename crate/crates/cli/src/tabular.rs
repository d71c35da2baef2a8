//! Offline fits over CSV files: a line through launch data and a KNN query
//! over labelled fruit readings.

use std::path::Path;

use bricks_core::mlcore::{
    fit_line, knn_classify, loss, FeaturePoint, FruitLabel, LaunchPoint, LineModel, MlError,
    Sample, SampleId,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Deserialize)]
struct LaunchRow {
    speed: f64,
    distance: f64,
}

#[derive(Debug, Deserialize)]
struct FruitRow {
    color: f64,
    length: f64,
    label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub slope: f64,
    pub intercept: f64,
    pub loss: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyReport {
    pub label: FruitLabel,
    /// Row indices (0-based, header excluded) of the voters, nearest first.
    pub neighbors: Vec<u64>,
    pub k: usize,
}

fn data_error(path: &Path, line: Option<u64>, msg: impl std::fmt::Display) -> CliError {
    match line {
        Some(l) => CliError::Data(format!("{}:{l}: {msg}", path.display())),
        None => CliError::Data(format!("{}: {msg}", path.display())),
    }
}

/// Reads every row, passing each through `convert` with its line number.
fn read_rows<R, T>(
    path: &Path,
    mut convert: impl FnMut(R) -> Result<T, String>,
) -> Result<Vec<T>, CliError>
where
    R: DeserializeOwned,
{
    let bytes = std::fs::read(path).map_err(|e| data_error(path, None, e))?;
    // Physical line of a byte offset; the reader's own count skips blank lines.
    let line_at = |pos: Option<&csv::Position>| {
        pos.map(|p| {
            let mut end = (p.byte() as usize).min(bytes.len());
            while end < bytes.len() && matches!(bytes[end], b'\n' | b'\r') {
                end += 1;
            }
            1 + bytes[..end].iter().filter(|b| **b == b'\n').count() as u64
        })
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(bytes.as_slice());
    let headers = reader
        .headers()
        .map_err(|e| data_error(path, Some(1), e))?
        .clone();
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| data_error(path, line_at(e.position()), e))?;
        let line = line_at(record.position());
        let row: R = record.deserialize(Some(&headers)).map_err(|e| {
            let msg = match e.kind() {
                csv::ErrorKind::Deserialize { err, .. } => err.to_string(),
                _ => e.to_string(),
            };
            data_error(path, line, msg)
        })?;
        out.push(convert(row).map_err(|m| data_error(path, line, m))?);
    }
    if out.is_empty() {
        return Err(data_error(path, None, "no data rows"));
    }
    Ok(out)
}

fn ml_to_cli(path: &Path, e: MlError) -> CliError {
    match e {
        MlError::InvalidK { .. } => CliError::Usage(e.to_string()),
        _ => data_error(path, None, e),
    }
}

pub fn fit(path: &Path) -> Result<FitReport, CliError> {
    let points = read_rows(path, |r: LaunchRow| {
        LaunchPoint::new(r.speed, r.distance).map_err(|e| e.to_string())
    })?;
    let line: LineModel = fit_line(&points).map_err(|e| ml_to_cli(path, e))?;
    let l = loss(&points, &line).map_err(|e| ml_to_cli(path, e))?;
    Ok(FitReport {
        slope: line.slope,
        intercept: line.intercept,
        loss: l,
        points: points.len(),
    })
}

pub fn classify(
    path: &Path,
    color: f64,
    length: f64,
    k: usize,
) -> Result<ClassifyReport, CliError> {
    let query = FeaturePoint::new(color, length).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut next = 0;
    let samples = read_rows(path, |r: FruitRow| {
        let label = r.label.parse::<FruitLabel>()?;
        let point = FeaturePoint::new(r.color, r.length).map_err(|e| e.to_string())?;
        let sample = Sample {
            id: SampleId(next),
            point,
            label,
        };
        next += 1;
        Ok(sample)
    })?;
    let result = knn_classify(&samples, query, k).map_err(|e| ml_to_cli(path, e))?;
    Ok(ClassifyReport {
        label: result.label,
        neighbors: result.neighbors.iter().map(|id| id.0).collect(),
        k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn csv_file(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn fits_exact_line() {
        let f = csv_file("speed,distance\n40,50\n60,90\n80,130\n");
        let r = fit(f.path()).unwrap();
        assert_eq!(
            (r.slope, r.intercept, r.loss, r.points),
            (2.0, -30.0, 0.0, 3)
        );
    }

    #[test]
    fn bad_cell_reports_line() {
        let f = csv_file("speed,distance\n40,50\n60,abc\n");
        let Err(CliError::Data(msg)) = fit(f.path()) else {
            panic!("expected a data error")
        };
        assert!(msg.contains(":3:"), "{msg}");
        let f = csv_file("speed,distance\n40,50\n70,1,2\n");
        let Err(CliError::Data(msg)) = fit(f.path()) else {
            panic!("expected a data error")
        };
        assert!(msg.contains(":3:"), "{msg}");
    }

    #[test]
    fn out_of_range_row_reports_line() {
        let f = csv_file("speed,distance\n40,50\n\n140,90\n");
        let Err(CliError::Data(msg)) = fit(f.path()) else {
            panic!("expected a data error")
        };
        assert!(msg.contains(":4:"), "{msg}");
    }

    #[test]
    fn classify_uses_row_indices() {
        let f = csv_file("color,length,label\n200,80,apple\n60,190,Banana\n210,75,APPLE\n");
        let r = classify(f.path(), 205.0, 78.0, 1).unwrap();
        assert_eq!(r.label, FruitLabel::Apple);
        assert_eq!(r.neighbors.len(), 1);
        assert!(matches!(
            classify(f.path(), 205.0, 78.0, 4),
            Err(CliError::Usage(_))
        ));
        let bad = csv_file("color,length,label\n200,80,pear\n");
        assert!(matches!(
            classify(bad.path(), 1.0, 1.0, 1),
            Err(CliError::Data(_))
        ));
    }
}
