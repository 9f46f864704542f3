//! Sparse LDLᵀ factorization, up-looking with an elimination tree.
//!
//! Input is the upper triangle of a symmetric matrix in CSC form. No pivoting
//! is performed; the intended inputs are quasi-definite KKT matrices, which
//! admit an LDLᵀ factorization with nonzero diagonal for any symmetric
//! permutation. The symbolic analysis is reused across numeric refactors with
//! an unchanged sparsity pattern.

use crate::sparse::CscMatrix;

#[derive(Debug, thiserror::Error)]
pub enum LdlError {
    #[error("zero pivot at column {0}; matrix is not quasi-definite")]
    ZeroPivot(usize),
    #[error("matrix must be square, got {0}x{1}")]
    NotSquare(usize, usize),
}

/// Elimination tree and column counts for a fixed sparsity pattern.
#[derive(Debug, Clone)]
pub struct LdlSymbolic {
    n: usize,
    parent: Vec<i64>,
    lcolptr: Vec<usize>,
}

impl LdlSymbolic {
    /// Analyze the pattern of `a` (upper triangle, CSC).
    pub fn analyze(a: &CscMatrix) -> Result<Self, LdlError> {
        if a.nrows() != a.ncols() {
            return Err(LdlError::NotSquare(a.nrows(), a.ncols()));
        }
        let n = a.ncols();
        let mut parent = vec![-1i64; n];
        let mut flag = vec![usize::MAX; n];
        let mut lnz = vec![0usize; n];
        for k in 0..n {
            flag[k] = k;
            for (mut i, _) in a.col_iter(k) {
                debug_assert!(i <= k, "input must be upper triangular");
                while flag[i] != k {
                    if parent[i] == -1 {
                        parent[i] = k as i64;
                    }
                    lnz[i] += 1;
                    flag[i] = k;
                    i = parent[i] as usize;
                }
            }
        }
        let mut lcolptr = vec![0usize; n + 1];
        for k in 0..n {
            lcolptr[k + 1] = lcolptr[k] + lnz[k];
        }
        Ok(LdlSymbolic {
            n,
            parent,
            lcolptr,
        })
    }

    pub fn l_nnz(&self) -> usize {
        self.lcolptr[self.n]
    }

    /// Numeric factorization of `a`, which must have the analyzed pattern.
    pub fn factor(&self, a: &CscMatrix) -> Result<LdlFactor, LdlError> {
        let mut f = LdlFactor {
            symbolic: self.clone(),
            lrowidx: vec![0usize; self.l_nnz()],
            lvalues: vec![0f64; self.l_nnz()],
            d: vec![0f64; self.n],
        };
        f.refactor(a)?;
        Ok(f)
    }
}

/// Numeric LDLᵀ factor: unit lower-triangular L (CSC) and diagonal D.
#[derive(Debug, Clone)]
pub struct LdlFactor {
    symbolic: LdlSymbolic,
    lrowidx: Vec<usize>,
    lvalues: Vec<f64>,
    d: Vec<f64>,
}

impl LdlFactor {
    /// Recompute the numeric factor for a matrix with the analyzed pattern.
    pub fn refactor(&mut self, a: &CscMatrix) -> Result<(), LdlError> {
        let n = self.symbolic.n;
        let parent = &self.symbolic.parent;
        let lcolptr = &self.symbolic.lcolptr;
        let mut y = vec![0f64; n];
        let mut pattern = vec![0usize; n];
        let mut flag = vec![usize::MAX; n];
        let mut lnz = vec![0usize; n];
        for k in 0..n {
            let mut top = n;
            flag[k] = k;
            y[k] = 0.0;
            for (idx, v) in a.col_iter(k) {
                let mut i = idx;
                y[i] += v;
                let mut len = 0usize;
                while flag[i] != k {
                    pattern[len] = i;
                    len += 1;
                    flag[i] = k;
                    i = parent[i] as usize;
                }
                while len > 0 {
                    len -= 1;
                    top -= 1;
                    pattern[top] = pattern[len];
                }
            }
            let mut dk = y[k];
            y[k] = 0.0;
            for s in top..n {
                let i = pattern[s];
                let yi = y[i];
                y[i] = 0.0;
                let p2 = lcolptr[i] + lnz[i];
                for p in lcolptr[i]..p2 {
                    y[self.lrowidx[p]] -= self.lvalues[p] * yi;
                }
                let lki = yi / self.d[i];
                dk -= lki * yi;
                self.lrowidx[p2] = k;
                self.lvalues[p2] = lki;
                lnz[i] += 1;
            }
            if dk == 0.0 {
                return Err(LdlError::ZeroPivot(k));
            }
            self.d[k] = dk;
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.symbolic.n
    }

    pub fn d(&self) -> &[f64] {
        &self.d
    }

    /// Solve L D Lᵀ x = b in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let n = self.symbolic.n;
        assert_eq!(b.len(), n);
        let lp = &self.symbolic.lcolptr;
        for j in 0..n {
            let bj = b[j];
            if bj != 0.0 {
                for p in lp[j]..lp[j + 1] {
                    b[self.lrowidx[p]] -= self.lvalues[p] * bj;
                }
            }
        }
        for j in 0..n {
            b[j] /= self.d[j];
        }
        for j in (0..n).rev() {
            let mut acc = b[j];
            for p in lp[j]..lp[j + 1] {
                acc -= self.lvalues[p] * b[self.lrowidx[p]];
            }
            b[j] = acc;
        }
    }
}
