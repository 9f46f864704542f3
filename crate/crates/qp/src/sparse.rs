//! Minimal compressed sparse column matrices.
//!
//! Only the operations the solver needs: triplet assembly (with duplicate
//! summation), matrix-vector products, and symmetric upper-triangle storage
//! for quadratic forms and KKT systems.

/// Compressed sparse column matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix {
    nrows: usize,
    ncols: usize,
    colptr: Vec<usize>,
    rowidx: Vec<usize>,
    values: Vec<f64>,
}

impl CscMatrix {
    /// Build from coordinate triplets; duplicate entries are summed.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        for &(r, c, _) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r},{c}) out of bounds");
        }
        // Count entries per column, then bucket-sort by (col, row).
        let mut count = vec![0usize; ncols + 1];
        for &(_, c, _) in triplets {
            count[c + 1] += 1;
        }
        for c in 0..ncols {
            count[c + 1] += count[c];
        }
        let mut rows = vec![0usize; triplets.len()];
        let mut vals = vec![0f64; triplets.len()];
        let mut next = count.clone();
        for &(r, c, v) in triplets {
            let p = next[c];
            rows[p] = r;
            vals[p] = v;
            next[c] += 1;
        }
        // Sort each column by row and merge duplicates.
        let mut colptr = vec![0usize; ncols + 1];
        let mut out_rows = Vec::with_capacity(triplets.len());
        let mut out_vals = Vec::with_capacity(triplets.len());
        let mut scratch: Vec<(usize, f64)> = Vec::new();
        for c in 0..ncols {
            scratch.clear();
            scratch.extend(
                rows[count[c]..count[c + 1]]
                    .iter()
                    .copied()
                    .zip(vals[count[c]..count[c + 1]].iter().copied()),
            );
            scratch.sort_unstable_by_key(|&(r, _)| r);
            for &(r, v) in scratch.iter() {
                if let Some(last) = out_rows.last() {
                    if *last == r && out_rows.len() > colptr[c] {
                        let n = out_vals.len();
                        out_vals[n - 1] += v;
                        continue;
                    }
                }
                out_rows.push(r);
                out_vals.push(v);
            }
            colptr[c + 1] = out_rows.len();
        }
        CscMatrix {
            nrows,
            ncols,
            colptr,
            rowidx: out_rows,
            values: out_vals,
        }
    }

    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        CscMatrix {
            nrows,
            ncols,
            colptr: vec![0; ncols + 1],
            rowidx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        CscMatrix {
            nrows: n,
            ncols: n,
            colptr: (0..=n).collect(),
            rowidx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.rowidx.len()
    }

    pub fn colptr(&self) -> &[usize] {
        &self.colptr
    }

    pub fn rowidx(&self) -> &[usize] {
        &self.rowidx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Entries of column `c` as `(row, value)` pairs.
    pub fn col_iter(&self, c: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.colptr[c];
        let hi = self.colptr[c + 1];
        self.rowidx[lo..hi]
            .iter()
            .copied()
            .zip(self.values[lo..hi].iter().copied())
    }

    /// Coordinate triplets in column-major order.
    pub fn triplets(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(self.nnz());
        for c in 0..self.ncols {
            for (r, v) in self.col_iter(c) {
                out.push((r, c, v));
            }
        }
        out
    }

    /// y += A x
    pub fn matvec_acc(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.ncols);
        assert_eq!(y.len(), self.nrows);
        for c in 0..self.ncols {
            let xc = x[c];
            if xc == 0.0 {
                continue;
            }
            for p in self.colptr[c]..self.colptr[c + 1] {
                y[self.rowidx[p]] += self.values[p] * xc;
            }
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        self.matvec_acc(x, &mut y);
        y
    }

    /// y += Aᵀ x
    pub fn matvec_t_acc(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.nrows);
        assert_eq!(y.len(), self.ncols);
        for c in 0..self.ncols {
            let mut acc = 0.0;
            for p in self.colptr[c]..self.colptr[c + 1] {
                acc += self.values[p] * x[self.rowidx[p]];
            }
            y[c] += acc;
        }
    }

    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.ncols];
        self.matvec_t_acc(x, &mut y);
        y
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.nrows, self.ncols);
        for c in 0..self.ncols {
            for (r, v) in self.col_iter(c) {
                m[(r, c)] += v;
            }
        }
        m
    }
}

/// Symmetric matrix stored as the upper triangle (row ≤ col) in CSC form.
#[derive(Debug, Clone, PartialEq)]
pub struct SymCscMatrix {
    upper: CscMatrix,
}

impl SymCscMatrix {
    /// Build from triplets of the upper triangle; entries with `r > c` are
    /// mirrored into the upper triangle first. Duplicates are summed.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let upper: Vec<(usize, usize, f64)> = triplets
            .iter()
            .map(|&(r, c, v)| if r <= c { (r, c, v) } else { (c, r, v) })
            .collect();
        SymCscMatrix {
            upper: CscMatrix::from_triplets(n, n, &upper),
        }
    }

    pub fn zeros(n: usize) -> Self {
        SymCscMatrix {
            upper: CscMatrix::zeros(n, n),
        }
    }

    pub fn n(&self) -> usize {
        self.upper.ncols()
    }

    pub fn nnz_upper(&self) -> usize {
        self.upper.nnz()
    }

    pub fn upper(&self) -> &CscMatrix {
        &self.upper
    }

    pub fn upper_values_mut(&mut self) -> &mut [f64] {
        self.upper.values_mut()
    }

    /// y = A x using the symmetric structure.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n();
        assert_eq!(x.len(), n);
        let mut y = vec![0.0; n];
        for c in 0..n {
            for (r, v) in self.upper.col_iter(c) {
                y[r] += v * x[c];
                if r != c {
                    y[c] += v * x[r];
                }
            }
        }
        y
    }

    /// ½ xᵀ A x
    pub fn quad_form_half(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for c in 0..self.n() {
            for (r, v) in self.upper.col_iter(c) {
                if r == c {
                    acc += 0.5 * v * x[c] * x[c];
                } else {
                    acc += v * x[r] * x[c];
                }
            }
        }
        acc
    }

    /// A + shift·I as a new matrix (all diagonal entries become explicit).
    pub fn add_diagonal(&self, shift: f64) -> SymCscMatrix {
        let mut t = self.upper.triplets();
        for i in 0..self.n() {
            t.push((i, i, shift));
        }
        SymCscMatrix::from_triplets(self.n(), &t)
    }

    /// Infinity norm of each column of the full (mirrored) matrix.
    pub fn col_inf_norms(&self) -> Vec<f64> {
        let n = self.n();
        let mut norms = vec![0.0f64; n];
        for c in 0..n {
            for (r, v) in self.upper.col_iter(c) {
                let a = v.abs();
                if a > norms[c] {
                    norms[c] = a;
                }
                if r != c && a > norms[r] {
                    norms[r] = a;
                }
            }
        }
        norms
    }

    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let n = self.n();
        let mut m = nalgebra::DMatrix::zeros(n, n);
        for c in 0..n {
            for (r, v) in self.upper.col_iter(c) {
                m[(r, c)] += v;
                if r != c {
                    m[(c, r)] += v;
                }
            }
        }
        m
    }

    /// Scale symmetrically: A ← D A D with D = diag(d).
    pub fn scale_sym(&mut self, d: &[f64]) {
        let colptr = self.upper.colptr().to_vec();
        let rowidx = self.upper.rowidx().to_vec();
        let vals = self.upper.values_mut();
        for c in 0..colptr.len() - 1 {
            for p in colptr[c]..colptr[c + 1] {
                vals[p] *= d[rowidx[p]] * d[c];
            }
        }
    }
}
