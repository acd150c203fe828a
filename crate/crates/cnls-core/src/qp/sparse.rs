use nalgebra::DMatrix;

/// Row-major sparse matrix used for QP constraint blocks.
///
/// Afriat constraint matrices have a handful of nonzeros per row while the
/// row count grows as n(n-1), so the solver never materializes them densely.
#[derive(Debug, Clone, PartialEq)]
pub struct RowMatrix {
    ncols: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl RowMatrix {
    pub fn new(ncols: usize) -> Self {
        Self { ncols, rows: Vec::new() }
    }

    pub fn with_capacity(ncols: usize, nrows: usize) -> Self {
        Self { ncols, rows: Vec::with_capacity(nrows) }
    }

    pub fn from_dense(dense: &DMatrix<f64>) -> Self {
        let mut m = Self::with_capacity(dense.ncols(), dense.nrows());
        for i in 0..dense.nrows() {
            let entries: Vec<(usize, f64)> = (0..dense.ncols())
                .filter(|&j| dense[(i, j)] != 0.0)
                .map(|j| (j, dense[(i, j)]))
                .collect();
            m.rows.push(entries);
        }
        m
    }

    /// Append a row given as (column, value) pairs. Entries are sorted by
    /// column; duplicate columns are summed.
    pub fn push_row(&mut self, entries: &[(usize, f64)]) {
        let mut row: Vec<(usize, f64)> = entries.to_vec();
        row.sort_unstable_by_key(|&(c, _)| c);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(row.len());
        for (c, v) in row {
            debug_assert!(c < self.ncols, "column {c} out of bounds");
            match merged.last_mut() {
                Some(last) if last.0 == c => last.1 += v,
                _ => merged.push((c, v)),
            }
        }
        merged.retain(|&(_, v)| v != 0.0);
        self.rows.push(merged);
    }

    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut dense = DMatrix::zeros(self.nrows(), self.ncols);
        for (i, row) in self.rows.iter().enumerate() {
            for &(j, v) in row {
                dense[(i, j)] = v;
            }
        }
        dense
    }

    /// out = A x
    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(out.len(), self.nrows());
        for (o, row) in out.iter_mut().zip(&self.rows) {
            let mut acc = 0.0;
            for &(j, v) in row {
                acc += v * x[j];
            }
            *o = acc;
        }
    }

    /// out = Aᵀ v (out is overwritten)
    pub fn matvec_t(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.nrows());
        debug_assert_eq!(out.len(), self.ncols);
        out.fill(0.0);
        for (vi, row) in v.iter().zip(&self.rows) {
            if *vi != 0.0 {
                for &(j, a) in row {
                    out[j] += a * vi;
                }
            }
        }
    }

    pub fn row_dot(&self, i: usize, x: &[f64]) -> f64 {
        self.rows[i].iter().map(|&(j, v)| v * x[j]).sum()
    }

    /// Overwrite (or insert) a single entry.
    pub(crate) fn set_entry(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(j < self.ncols);
        let row = &mut self.rows[i];
        match row.binary_search_by_key(&j, |&(c, _)| c) {
            Ok(pos) => row[pos].1 = v,
            Err(pos) => row.insert(pos, (j, v)),
        }
    }

    /// Scale row i by s in place.
    pub(crate) fn scale_row(&mut self, i: usize, s: f64) {
        for (_, v) in &mut self.rows[i] {
            *v *= s;
        }
    }

    /// Scale column j of every row by col_scale[j] in place.
    pub(crate) fn scale_cols(&mut self, col_scale: &[f64]) {
        for row in &mut self.rows {
            for (j, v) in row {
                *v *= col_scale[*j];
            }
        }
    }

    pub(crate) fn row_inf_norm(&self, i: usize) -> f64 {
        self.rows[i].iter().fold(0.0, |m, &(_, v)| m.max(v.abs()))
    }

    /// Per-column infinity norms accumulated into `out` (not cleared).
    pub(crate) fn col_inf_norms(&self, out: &mut [f64]) {
        for row in &self.rows {
            for &(j, v) in row {
                out[j] = out[j].max(v.abs());
            }
        }
    }
}
