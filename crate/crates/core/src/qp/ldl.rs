//! Sparse LDL^T factorization for symmetric quasi-definite matrices.
//!
//! Up-looking elimination-tree algorithm on a fill-reducing (AMD) symmetric
//! permutation. Quasi-definite matrices admit an LDL^T factorization under
//! any symmetric permutation, so no pivoting is needed.

use thiserror::Error;

const NONE: usize = usize::MAX;

#[derive(Debug, Error, PartialEq)]
pub enum LdlError {
    #[error("zero pivot at column {0}")]
    ZeroPivot(usize),
    #[error("ordering failed: {0}")]
    Ordering(String),
    #[error("entry ({row}, {col}) is outside a {n}x{n} upper triangle")]
    BadEntry { row: usize, col: usize, n: usize },
}

/// Symbolic analysis plus numeric factor of `P K P^T = L D L^T`.
#[derive(Debug, Clone)]
pub struct SparseLdl {
    n: usize,
    /// `perm[new] = old`.
    perm: Vec<usize>,
    // Permuted upper triangle in CSC form.
    ap: Vec<usize>,
    ai: Vec<usize>,
    ax: Vec<f64>,
    /// Input triplet index -> slot in `ax`.
    map: Vec<usize>,
    etree: Vec<usize>,
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<f64>,
    d: Vec<f64>,
    dinv: Vec<f64>,
    // Workspace for the numeric phase.
    y_vals: Vec<f64>,
    y_idx: Vec<usize>,
    y_markers: Vec<bool>,
    elim_buffer: Vec<usize>,
    next_space: Vec<usize>,
    work: Vec<f64>,
}

impl SparseLdl {
    /// Analyze an upper-triangular pattern given as `(row, col)` pairs with
    /// `row <= col`. Duplicates are summed. Every diagonal must be present.
    pub fn analyze(n: usize, rows: &[usize], cols: &[usize]) -> Result<Self, LdlError> {
        for (&r, &c) in rows.iter().zip(cols) {
            if r > c || c >= n {
                return Err(LdlError::BadEntry { row: r, col: c, n });
            }
        }
        let perm = amd_order(n, rows, cols)?;
        let mut pinv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            pinv[old] = new;
        }

        // Permuted upper entries: (row, col) with row <= col.
        let mut entries: Vec<(usize, usize, usize)> = rows
            .iter()
            .zip(cols)
            .enumerate()
            .map(|(k, (&r, &c))| {
                let (pr, pc) = (pinv[r], pinv[c]);
                (pr.min(pc), pr.max(pc), k)
            })
            .collect();
        entries.sort_unstable_by_key(|&(r, c, _)| (c, r));

        let mut ap = vec![0; n + 1];
        let mut ai = Vec::with_capacity(entries.len());
        let mut map = vec![0; rows.len()];
        let mut last: Option<(usize, usize)> = None;
        for &(r, c, k) in &entries {
            if last != Some((r, c)) {
                ai.push(r);
                ap[c + 1] += 1;
                last = Some((r, c));
            }
            map[k] = ai.len() - 1;
        }
        for j in 0..n {
            ap[j + 1] += ap[j];
        }

        let (etree, lnz) = elimination_tree(n, &ap, &ai);
        let mut lp = vec![0; n + 1];
        for i in 0..n {
            lp[i + 1] = lp[i] + lnz[i];
        }
        let nnz_l = lp[n];
        let nnz_a = ai.len();
        Ok(Self {
            n,
            perm,
            ap,
            ai,
            ax: vec![0.0; nnz_a],
            map,
            etree,
            lp,
            li: vec![0; nnz_l],
            lx: vec![0.0; nnz_l],
            d: vec![0.0; n],
            dinv: vec![0.0; n],
            y_vals: vec![0.0; n],
            y_idx: vec![0; n],
            y_markers: vec![false; n],
            elim_buffer: vec![0; n],
            next_space: vec![0; n],
            work: vec![0.0; n],
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Numeric factorization; `values[k]` belongs to the k-th analyzed entry.
    pub fn factor(&mut self, values: &[f64]) -> Result<(), LdlError> {
        self.ax.iter_mut().for_each(|v| *v = 0.0);
        for (k, &v) in values.iter().enumerate() {
            self.ax[self.map[k]] += v;
        }
        let n = self.n;
        self.next_space.copy_from_slice(&self.lp[..n]);
        self.y_markers.iter_mut().for_each(|m| *m = false);
        self.y_vals.iter_mut().for_each(|v| *v = 0.0);

        for k in 0..n {
            let mut nnz_y = 0;
            self.d[k] = 0.0;
            for p in self.ap[k]..self.ap[k + 1] {
                let bidx = self.ai[p];
                if bidx == k {
                    self.d[k] = self.ax[p];
                    continue;
                }
                self.y_vals[bidx] = self.ax[p];
                if !self.y_markers[bidx] {
                    self.y_markers[bidx] = true;
                    self.elim_buffer[0] = bidx;
                    let mut nnz_e = 1;
                    let mut next = self.etree[bidx];
                    while next != NONE && next < k {
                        if self.y_markers[next] {
                            break;
                        }
                        self.y_markers[next] = true;
                        self.elim_buffer[nnz_e] = next;
                        nnz_e += 1;
                        next = self.etree[next];
                    }
                    while nnz_e > 0 {
                        nnz_e -= 1;
                        self.y_idx[nnz_y] = self.elim_buffer[nnz_e];
                        nnz_y += 1;
                    }
                }
            }

            for i in (0..nnz_y).rev() {
                let cidx = self.y_idx[i];
                let tmp = self.next_space[cidx];
                let y = self.y_vals[cidx];
                for j in self.lp[cidx]..tmp {
                    self.y_vals[self.li[j]] -= self.lx[j] * y;
                }
                self.li[tmp] = k;
                let l = y * self.dinv[cidx];
                self.lx[tmp] = l;
                self.d[k] -= y * l;
                self.next_space[cidx] += 1;
                self.y_vals[cidx] = 0.0;
                self.y_markers[cidx] = false;
            }
            if self.d[k] == 0.0 || !self.d[k].is_finite() {
                return Err(LdlError::ZeroPivot(k));
            }
            self.dinv[k] = 1.0 / self.d[k];
        }
        Ok(())
    }

    /// Overwrites `b` with `K^{-1} b`.
    pub fn solve(&mut self, b: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            self.work[i] = b[self.perm[i]];
        }
        let x = &mut self.work;
        for i in 0..n {
            let xi = x[i];
            for j in self.lp[i]..self.lp[i + 1] {
                x[self.li[j]] -= self.lx[j] * xi;
            }
        }
        for i in 0..n {
            x[i] *= self.dinv[i];
        }
        for i in (0..n).rev() {
            let mut acc = x[i];
            for j in self.lp[i]..self.lp[i + 1] {
                acc -= self.lx[j] * x[self.li[j]];
            }
            x[i] = acc;
        }
        for i in 0..n {
            b[self.perm[i]] = self.work[i];
        }
    }

    /// Number of positive entries in `D` (inertia check).
    pub fn positive_pivots(&self) -> usize {
        self.d.iter().filter(|&&d| d > 0.0).count()
    }
}

fn amd_order(n: usize, rows: &[usize], cols: &[usize]) -> Result<Vec<usize>, LdlError> {
    if n == 0 {
        return Ok(Vec::new());
    }
    // Upper pattern in CSC; AMD orders A + A^T. The diagonal is included
    // because amd assumes at least n entries.
    let mut pairs: Vec<(usize, usize)> = rows
        .iter()
        .zip(cols)
        .map(|(&r, &c)| (c, r))
        .chain((0..n).map(|i| (i, i)))
        .collect();
    pairs.sort_unstable();
    pairs.dedup();
    let mut ap = vec![0usize; n + 1];
    let mut ai = Vec::with_capacity(pairs.len());
    for &(c, r) in &pairs {
        ap[c + 1] += 1;
        ai.push(r);
    }
    for j in 0..n {
        ap[j + 1] += ap[j];
    }
    let control = amd::Control::default();
    let (perm, _, _) = amd::order(n, &ap, &ai, &control).map_err(|s| LdlError::Ordering(format!("{s:?}")))?;
    Ok(perm)
}

/// Elimination tree and per-column nonzero counts of `L`.
fn elimination_tree(n: usize, ap: &[usize], ai: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut work = vec![NONE; n];
    let mut lnz = vec![0; n];
    let mut etree = vec![NONE; n];
    for j in 0..n {
        work[j] = j;
        for &row in &ai[ap[j]..ap[j + 1]] {
            let mut i = row;
            while work[i] != j {
                if etree[i] == NONE {
                    etree[i] = j;
                }
                lnz[i] += 1;
                work[i] = j;
                i = etree[i];
            }
        }
    }
    (etree, lnz)
}
