//! Minimal compressed-row matrix used inside the solver.

use nalgebra::DMatrix;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Csr {
    pub nrows: usize,
    pub ncols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl Csr {
    pub fn empty(ncols: usize) -> Self {
        Self {
            nrows: 0,
            ncols,
            indptr: vec![0],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Nonzero entries of `m`, row by row. One contiguous pass over the
    /// column-major storage; the nonzeros are then bucketed by row.
    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut triplets = Vec::new();
        for (j, col) in m.column_iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                if v != 0.0 {
                    triplets.push((i, j, v));
                }
            }
        }
        Self::from_triplets(m.nrows(), m.ncols(), &triplets)
    }

    /// `(m + m^T) / 2` for square `m`, from a single pass over `m`.
    pub fn symmetric_part(m: &DMatrix<f64>) -> Self {
        let mut triplets = Vec::new();
        for (j, col) in m.column_iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                if v != 0.0 {
                    triplets.push((i, j, 0.5 * v));
                    triplets.push((j, i, 0.5 * v));
                }
            }
        }
        Self::from_triplets(m.nrows(), m.ncols(), &triplets)
    }

    /// Counting sort by row; duplicates are summed and exact zeros dropped.
    fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut start = vec![0; nrows + 1];
        for &(i, _, _) in triplets {
            start[i + 1] += 1;
        }
        for i in 0..nrows {
            start[i + 1] += start[i];
        }
        let mut next = start.clone();
        let mut bucket = vec![(0, 0.0); triplets.len()];
        for &(i, j, v) in triplets {
            bucket[next[i]] = (j, v);
            next[i] += 1;
        }
        let mut out = Self::empty(ncols);
        for i in 0..nrows {
            let row = &mut bucket[start[i]..start[i + 1]];
            row.sort_by_key(|&(j, _)| j);
            let mut k = 0;
            while k < row.len() {
                let (j, mut v) = row[k];
                k += 1;
                while k < row.len() && row[k].0 == j {
                    v += row[k].1;
                    k += 1;
                }
                if v != 0.0 {
                    out.indices.push(j);
                    out.values.push(v);
                }
            }
            out.indptr.push(out.indices.len());
            out.nrows += 1;
        }
        out
    }

    /// Appends every row of `other`.
    pub fn append(&mut self, other: &Csr) {
        debug_assert_eq!(self.ncols, other.ncols);
        let base = self.indices.len();
        self.indices.extend_from_slice(&other.indices);
        self.values.extend_from_slice(&other.values);
        self.indptr.extend(other.indptr[1..].iter().map(|p| p + base));
        self.nrows += other.nrows;
    }

    pub fn push_row(&mut self, entries: impl IntoIterator<Item = (usize, f64)>) {
        for (j, v) in entries {
            self.indices.push(j);
            self.values.push(v);
        }
        self.indptr.push(self.indices.len());
        self.nrows += 1;
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.indptr[i]..self.indptr[i + 1];
        self.indices[r.clone()]
            .iter()
            .copied()
            .zip(self.values[r].iter().copied())
    }

    /// `out = self * x`.
    pub fn mul(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate().take(self.nrows) {
            *o = self.row(i).map(|(j, v)| v * x[j]).sum();
        }
    }

    /// `out = self^T * y`.
    pub fn tr_mul(&self, y: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, &yi) in y.iter().enumerate().take(self.nrows) {
            if yi != 0.0 {
                for (j, v) in self.row(i) {
                    out[j] += v * yi;
                }
            }
        }
    }

    /// `self[i][j] *= row[i] * col[j]`.
    pub fn scale(&mut self, row: &[f64], col: &[f64]) {
        for i in 0..self.nrows {
            for p in self.indptr[i]..self.indptr[i + 1] {
                self.values[p] *= row[i] * col[self.indices[p]];
            }
        }
    }

    pub fn row_inf_norms(&self) -> Vec<f64> {
        (0..self.nrows)
            .map(|i| self.row(i).fold(0.0, |acc: f64, (_, v)| acc.max(v.abs())))
            .collect()
    }

    pub fn col_inf_norms(&self) -> Vec<f64> {
        let mut out = vec![0.0f64; self.ncols];
        for (j, v) in self.indices.iter().zip(&self.values) {
            out[*j] = out[*j].max(v.abs());
        }
        out
    }
}

pub(crate) fn inf_norm(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |acc: f64, v| acc.max(v.abs()))
}
