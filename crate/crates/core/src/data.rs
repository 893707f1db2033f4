//! Column-oriented sample tables and their CSV codec.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("expected {expected} column names, got {found}")]
    NameCount { expected: usize, found: usize },
    #[error("row count mismatch: {left} vs {right}")]
    RowMismatch { left: usize, right: usize },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("row {row}: expected {expected} fields, found {found}")]
    Ragged {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("row {row}, column {col}: cannot parse {value:?} as a number")]
    Parse {
        row: usize,
        col: usize,
        value: String,
    },
}

/// An `n × d` table of samples, one named column per variable.
///
/// Storage is column-major (nalgebra's layout), so `column(j)` is a contiguous
/// slice. Used both for concepts `C` and for machine representations `M`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMatrix {
    values: DMatrix<f64>,
    names: Vec<String>,
}

impl SampleMatrix {
    pub fn new(values: DMatrix<f64>, names: Vec<String>) -> Result<Self, DataError> {
        if names.len() != values.ncols() {
            return Err(DataError::NameCount {
                expected: values.ncols(),
                found: names.len(),
            });
        }
        Ok(Self { values, names })
    }

    /// Wraps a matrix, naming columns `{prefix}0, {prefix}1, ...`.
    pub fn with_prefix(values: DMatrix<f64>, prefix: &str) -> Self {
        let names = (0..values.ncols()).map(|j| format!("{prefix}{j}")).collect();
        Self { values, names }
    }

    pub fn from_columns(columns: &[DVector<f64>], prefix: &str) -> Self {
        let n = columns.first().map_or(0, |c| c.len());
        let values = DMatrix::from_fn(n, columns.len(), |i, j| columns[j][i]);
        Self::with_prefix(values, prefix)
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, j: usize) -> &[f64] {
        let n = self.nrows();
        &self.values.as_slice()[j * n..(j + 1) * n]
    }

    pub fn column_vector(&self, j: usize) -> DVector<f64> {
        DVector::from_column_slice(self.column(j))
    }

    /// Rows `range` as a new table with the same names.
    pub fn rows(&self, start: usize, end: usize) -> Self {
        Self {
            values: self.values.rows(start, end - start).into_owned(),
            names: self.names.clone(),
        }
    }

    /// Column subset in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> Self {
        Self {
            values: self.values.select_columns(cols),
            names: cols.iter().map(|&j| self.names[j].clone()).collect(),
        }
    }

    /// Stack `self` above `other`; column names are taken from `self`.
    pub fn vstack(&self, other: &SampleMatrix) -> Result<Self, DataError> {
        if self.ncols() != other.ncols() {
            return Err(DataError::NameCount {
                expected: self.ncols(),
                found: other.ncols(),
            });
        }
        let n1 = self.nrows();
        let values = DMatrix::from_fn(n1 + other.nrows(), self.ncols(), |i, j| {
            if i < n1 {
                self.values[(i, j)]
            } else {
                other.values[(i - n1, j)]
            }
        });
        Ok(Self {
            values,
            names: self.names.clone(),
        })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(&self.names)?;
        for i in 0..self.nrows() {
            w.write_record(self.values.row(i).iter().map(|v| format_f64(*v)))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, DataError> {
        let mut r = csv::Reader::from_reader(reader);
        let names: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
        let d = names.len();
        let mut flat = Vec::new();
        for (row, record) in r.records().enumerate() {
            let record = record?;
            if record.len() != d {
                return Err(DataError::Ragged {
                    row,
                    expected: d,
                    found: record.len(),
                });
            }
            for (col, field) in record.iter().enumerate() {
                let v = field.trim().parse::<f64>().map_err(|_| DataError::Parse {
                    row,
                    col,
                    value: field.to_owned(),
                })?;
                flat.push(v);
            }
        }
        let n = flat.len().checked_div(d).unwrap_or(0);
        Ok(Self {
            values: DMatrix::from_row_slice(n, d, &flat),
            names,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        self.write_csv(File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        Self::read_csv(File::open(path)?)
    }
}

/// Shortest representation that parses back to the same `f64`.
pub(crate) fn format_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_owned()
    } else {
        format!("{v:?}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let m = DMatrix::from_row_slice(3, 2, &[0.1, -2.5, 1e-300, 3.0, f64::MAX, 1.0 / 3.0]);
        let s = SampleMatrix::with_prefix(m, "M");
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let back = SampleMatrix::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn column_slices_are_column_major() {
        let s = SampleMatrix::with_prefix(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]), "x");
        assert_eq!(s.column(1), &[2.0, 4.0]);
        assert_eq!(s.names(), &["x0", "x1"]);
    }

    #[test]
    fn bad_field_reports_position() {
        let err = SampleMatrix::read_csv("a,b\n1,2\n3,zz\n".as_bytes()).unwrap_err();
        assert!(matches!(err, DataError::Parse { row: 1, col: 1, .. }));
    }
}
