//! Ruiz equilibration of the stacked problem
//!
//!   min ½ xᵀQx + cᵀx  s.t.  l ≤ Ax ≤ u,
//!
//! scaled as Q̄ = γ·DQD, c̄ = γ·Dc, Ā = EAD, l̄ = El, ū = Eu. Termination
//! checks in the solver undo the scaling, so equilibration only affects
//! conditioning, not the reported residuals.

use crate::sparse::{CscMatrix, SymCscMatrix};

const MIN_SCALE: f64 = 1e-4;
const MAX_SCALE: f64 = 1e4;

#[derive(Debug, Clone)]
pub struct Scaling {
    pub d: Vec<f64>,
    pub e: Vec<f64>,
    pub cost: f64,
}

impl Scaling {
    pub fn identity(n: usize, m: usize) -> Self {
        Scaling {
            d: vec![1.0; n],
            e: vec![1.0; m],
            cost: 1.0,
        }
    }
}

fn clamp_scale(norm: f64) -> f64 {
    if norm < 1e-8 {
        1.0
    } else {
        (1.0 / norm.sqrt()).clamp(MIN_SCALE, MAX_SCALE)
    }
}

/// Equilibrate (Q, c, A, l, u) in place over `iters` rounds and return the
/// accumulated scaling.
pub fn ruiz_equilibrate(
    q: &mut SymCscMatrix,
    c: &mut [f64],
    a: &mut CscMatrix,
    l: &mut [f64],
    u: &mut [f64],
    iters: usize,
) -> Scaling {
    let n = q.n();
    let m = a.nrows();
    assert_eq!(a.ncols(), n);
    let mut sc = Scaling::identity(n, m);
    for _ in 0..iters {
        let nq = q.col_inf_norms();
        let mut a_col = vec![0.0f64; n];
        let mut a_row = vec![0.0f64; m];
        for (r, col, v) in a.triplets() {
            let av = v.abs();
            if av > a_col[col] {
                a_col[col] = av;
            }
            if av > a_row[r] {
                a_row[r] = av;
            }
        }
        let dx: Vec<f64> = (0..n).map(|j| clamp_scale(nq[j].max(a_col[j]))).collect();
        let dz: Vec<f64> = (0..m).map(|i| clamp_scale(a_row[i])).collect();
        q.scale_sym(&dx);
        for j in 0..n {
            c[j] *= dx[j];
            sc.d[j] *= dx[j];
        }
        {
            let colptr = a.colptr().to_vec();
            let rowidx = a.rowidx().to_vec();
            let vals = a.values_mut();
            for col in 0..n {
                for p in colptr[col]..colptr[col + 1] {
                    vals[p] *= dz[rowidx[p]] * dx[col];
                }
            }
        }
        for i in 0..m {
            l[i] *= dz[i];
            u[i] *= dz[i];
            sc.e[i] *= dz[i];
        }
    }
    // Cost scaling keeps the objective terms O(1).
    let nq = q.col_inf_norms();
    let mean_nq = if n > 0 { nq.iter().sum::<f64>() / n as f64 } else { 0.0 };
    let c_inf = c.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let denom = mean_nq.max(c_inf);
    let cost = if denom < 1e-8 { 1.0 } else { (1.0 / denom).clamp(MIN_SCALE, MAX_SCALE) };
    for v in q.upper_values_mut() {
        *v *= cost;
    }
    for v in c.iter_mut() {
        *v *= cost;
    }
    sc.cost = cost;
    sc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaled_matrices_relate_by_diagonal_factors() {
        let q0 = SymCscMatrix::from_triplets(2, &[(0, 0, 100.0), (1, 1, 0.01), (0, 1, 1.0)]);
        let a0 = CscMatrix::from_triplets(2, 2, &[(0, 0, 3.0), (1, 1, 0.2)]);
        let c0 = [5.0, -2.0];
        let l0 = [0.0, -1.0];
        let u0 = [10.0, 1.0];

        let mut q = q0.clone();
        let mut a = a0.clone();
        let mut c = c0.to_vec();
        let mut l = l0.to_vec();
        let mut u = u0.to_vec();
        let sc = ruiz_equilibrate(&mut q, &mut c, &mut a, &mut l, &mut u, 10);

        let qd = q0.to_dense();
        let qs = q.to_dense();
        for i in 0..2 {
            for j in 0..2 {
                let expect = sc.cost * sc.d[i] * qd[(i, j)] * sc.d[j];
                assert!((qs[(i, j)] - expect).abs() < 1e-12);
            }
        }
        let ad = a0.to_dense();
        let as_ = a.to_dense();
        for i in 0..2 {
            for j in 0..2 {
                let expect = sc.e[i] * ad[(i, j)] * sc.d[j];
                assert!((as_[(i, j)] - expect).abs() < 1e-12);
            }
            assert!((l[i] - sc.e[i] * l0[i]).abs() < 1e-12);
            assert!((u[i] - sc.e[i] * u0[i]).abs() < 1e-12);
        }
        for j in 0..2 {
            assert!((c[j] - sc.cost * sc.d[j] * c0[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn equilibration_tightens_norm_spread() {
        let mut q = SymCscMatrix::from_triplets(2, &[(0, 0, 1e4), (1, 1, 1e-4)]);
        let mut a = CscMatrix::from_triplets(1, 2, &[(0, 0, 1.0), (0, 1, 1.0)]);
        let mut c = vec![0.0, 0.0];
        let mut l = vec![1.0];
        let mut u = vec![1.0];
        ruiz_equilibrate(&mut q, &mut c, &mut a, &mut l, &mut u, 10);
        // Column norms of the stacked [[Q, Aᵀ],[A, 0]] matrix even out, which
        // is what conditions the KKT system.
        let nq = q.col_inf_norms();
        let ad = a.to_dense();
        let cols = [
            nq[0].max(ad[(0, 0)].abs()),
            nq[1].max(ad[(0, 1)].abs()),
            ad[(0, 0)].abs().max(ad[(0, 1)].abs()),
        ];
        let hi = cols.iter().fold(0.0f64, |a, &b| a.max(b));
        let lo = cols.iter().fold(f64::INFINITY, |a, &b| a.min(b));
        assert!(hi / lo < 10.0, "spread = {}", hi / lo);
    }
}
