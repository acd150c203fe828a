use crate::error::{Error, Result};
use nalgebra::DMatrix;

/// An observation matrix: dependent variable, regressors, and optional
/// instrument columns, with names and row identifiers for reporting.
#[derive(Debug, Clone)]
pub struct Dataset {
    y: Vec<f64>,
    x: DMatrix<f64>,
    z: Option<DMatrix<f64>>,
    y_name: String,
    x_names: Vec<String>,
    z_names: Vec<String>,
    row_ids: Vec<String>,
}

impl Dataset {
    pub fn new(y: Vec<f64>, x: DMatrix<f64>) -> Result<Self> {
        let k = x.ncols();
        let x_names = (0..k).map(|j| format!("x{}", j + 1)).collect();
        let row_ids = (0..y.len()).map(|i| i.to_string()).collect();
        Self::with_names(y, x, None, "y".into(), x_names, vec![], row_ids)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_names(
        y: Vec<f64>,
        x: DMatrix<f64>,
        z: Option<DMatrix<f64>>,
        y_name: String,
        x_names: Vec<String>,
        z_names: Vec<String>,
        row_ids: Vec<String>,
    ) -> Result<Self> {
        let n = y.len();
        let k = x.ncols();
        if x.nrows() != n {
            return Err(Error::InvalidData(format!(
                "y has {n} rows but X has {}",
                x.nrows()
            )));
        }
        // A lone observation is a legal degenerate case (the fit interpolates
        // it exactly); anything between 2 and k requires more data.
        if n != 1 && n < k + 1 {
            return Err(Error::InvalidData(format!(
                "need at least k+1 = {} observations for {k} regressors, got {n}",
                k + 1
            )));
        }
        if let Some(bad) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!(
                "non-finite value in column '{y_name}' at row '{}'",
                row_id_or_index(&row_ids, bad)
            )));
        }
        for j in 0..k {
            for i in 0..n {
                if !x[(i, j)].is_finite() {
                    return Err(Error::InvalidData(format!(
                        "non-finite value in column '{}' at row '{}'",
                        x_names.get(j).map(String::as_str).unwrap_or("?"),
                        row_id_or_index(&row_ids, i)
                    )));
                }
            }
        }
        if let Some(zm) = &z {
            if zm.nrows() != n {
                return Err(Error::InvalidData(format!(
                    "instrument matrix has {} rows for {n} observations",
                    zm.nrows()
                )));
            }
            if zm.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidData("non-finite instrument value".into()));
            }
        }
        if x_names.len() != k {
            return Err(Error::InvalidData(format!(
                "{} names for {k} regressor columns",
                x_names.len()
            )));
        }
        if row_ids.len() != n {
            return Err(Error::InvalidData(format!(
                "{} row ids for {n} observations",
                row_ids.len()
            )));
        }
        Ok(Self { y, x, z, y_name, x_names, z_names, row_ids })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn k(&self) -> usize {
        self.x.ncols()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn z(&self) -> Option<&DMatrix<f64>> {
        self.z.as_ref()
    }

    pub fn y_name(&self) -> &str {
        &self.y_name
    }

    pub fn x_names(&self) -> &[String] {
        &self.x_names
    }

    pub fn z_names(&self) -> &[String] {
        &self.z_names
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn x_row(&self, i: usize) -> Vec<f64> {
        (0..self.k()).map(|j| self.x[(i, j)]).collect()
    }

    /// Columnwise [min, max] over the regressors.
    pub fn x_ranges(&self) -> Vec<(f64, f64)> {
        (0..self.k())
            .map(|j| {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for i in 0..self.n() {
                    lo = lo.min(self.x[(i, j)]);
                    hi = hi.max(self.x[(i, j)]);
                }
                (lo, hi)
            })
            .collect()
    }

    /// Index of the first non-positive y entry, if any. The multiplicative
    /// model requires strictly positive outputs.
    pub fn first_nonpositive_y(&self) -> Option<usize> {
        self.y.iter().position(|&v| v <= 0.0)
    }

    /// Row subset (with repetition allowed) used by the pairs bootstrap.
    pub fn select_rows(&self, idx: &[usize]) -> Result<Self> {
        let y = idx.iter().map(|&i| self.y[i]).collect();
        let x = DMatrix::from_fn(idx.len(), self.k(), |r, c| self.x[(idx[r], c)]);
        let z = self
            .z
            .as_ref()
            .map(|zm| DMatrix::from_fn(idx.len(), zm.ncols(), |r, c| zm[(idx[r], c)]));
        let row_ids = idx.iter().map(|&i| self.row_ids[i].clone()).collect();
        Self::with_names(
            y,
            x,
            z,
            self.y_name.clone(),
            self.x_names.clone(),
            self.z_names.clone(),
            row_ids,
        )
    }
}

fn row_id_or_index(ids: &[String], i: usize) -> String {
    ids.get(i).cloned().unwrap_or_else(|| i.to_string())
}
