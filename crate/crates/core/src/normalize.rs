//! Per-column min-max scaling.

use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnRange {
    pub name: String,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub columns: Vec<ColumnRange>,
}

impl MinMaxScaler {
    /// Records the extrema of every column. `names` labels the columns in the
    /// exported JSON; missing names default to the column index.
    pub fn fit(matrix: &Array2<f64>, names: &[&str]) -> Result<Self> {
        if matrix.nrows() == 0 {
            return Err(Error::Validation("cannot fit a scaler on an empty matrix".into()));
        }
        let columns = matrix
            .axis_iter(Axis(1))
            .enumerate()
            .map(|(j, col)| {
                let (min, max) = col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v), hi.max(v))
                });
                ColumnRange {
                    name: names.get(j).map_or_else(|| j.to_string(), |s| s.to_string()),
                    min,
                    max,
                }
            })
            .collect();
        Ok(MinMaxScaler { columns })
    }

    /// `(x - min) / (max - min)`, clamped to `[0, 1]`. Constant columns map to 0.
    pub fn transform(&self, matrix: &Array2<f64>) -> Result<Array2<f64>> {
        if matrix.ncols() != self.columns.len() {
            return Err(Error::Validation(format!(
                "matrix has {} columns, scaler was fitted on {}",
                matrix.ncols(),
                self.columns.len()
            )));
        }
        let mut out = matrix.clone();
        for (mut col, range) in out.axis_iter_mut(Axis(1)).zip(&self.columns) {
            let span = range.max - range.min;
            col.mapv_inplace(|x| {
                if span > 0.0 {
                    ((x - range.min) / span).clamp(0.0, 1.0)
                } else {
                    0.0
                }
            });
        }
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scaler serializes") + "\n"
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.into(),
            source,
        })
    }
}
