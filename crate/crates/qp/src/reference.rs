//! Exhaustive active-set reference solver for small QPs.
//!
//! Enumerates every subset of the one-sided inequality and box constraints as
//! a candidate active set (equalities are always active), solves the dense
//! KKT system of each candidate, keeps the primal-feasible ones, and returns
//! the best. Exponential in the constraint count; intended as a test oracle
//! for n up to roughly a dozen variables, and only meaningful when the
//! reduced Hessian is nonsingular on each candidate set.

use nalgebra::{DMatrix, DVector};

use crate::problem::QpProblem;

const FEAS_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct ReferenceSolution {
    pub x: Vec<f64>,
    pub objective: f64,
}

/// One-sided constraint row a·x ≤ b in dense form.
struct OneSided {
    a: DVector<f64>,
    b: f64,
}

fn one_sided_rows(p: &QpProblem) -> Vec<OneSided> {
    let n = p.n;
    let a_in = p.a_in.to_dense();
    let mut rows = Vec::new();
    for i in 0..p.m_in() {
        rows.push(OneSided {
            a: a_in.row(i).transpose().clone_owned(),
            b: p.b_in[i],
        });
    }
    for j in 0..n {
        if p.ub[j].is_finite() {
            let mut a = DVector::zeros(n);
            a[j] = 1.0;
            rows.push(OneSided { a, b: p.ub[j] });
        }
        if p.lb[j].is_finite() {
            let mut a = DVector::zeros(n);
            a[j] = -1.0;
            rows.push(OneSided { a, b: -p.lb[j] });
        }
    }
    rows
}

fn is_feasible(p: &QpProblem, x: &[f64], rows: &[OneSided]) -> bool {
    let xv = DVector::from_row_slice(x);
    let eq = p.a_eq.to_dense() * &xv;
    for (i, &b) in p.b_eq.iter().enumerate() {
        if (eq[i] - b).abs() > FEAS_TOL {
            return false;
        }
    }
    for r in rows {
        if r.a.dot(&xv) - r.b > FEAS_TOL {
            return false;
        }
    }
    true
}

/// Solve by active-set enumeration. Returns `None` when no candidate active
/// set yields a feasible stationary point (e.g. the problem is infeasible).
///
/// Panics if the enumeration space exceeds 2^24 subsets; callers control the
/// instance size.
pub fn solve_reference(p: &QpProblem) -> Option<ReferenceSolution> {
    p.validate().expect("reference solver requires a valid problem");
    let n = p.n;
    let rows = one_sided_rows(p);
    assert!(rows.len() <= 24, "too many candidate constraints for enumeration");
    let q = p.q.to_dense();
    let c = DVector::from_row_slice(&p.c);
    let a_eq = p.a_eq.to_dense();
    let m_eq = p.m_eq();

    let mut best: Option<ReferenceSolution> = None;
    for mask in 0u32..(1u32 << rows.len()) {
        let act: Vec<usize> = (0..rows.len()).filter(|&i| mask >> i & 1 == 1).collect();
        if m_eq + act.len() > n {
            continue;
        }
        let ma = m_eq + act.len();
        let dim = n + ma;
        let mut kkt = DMatrix::zeros(dim, dim);
        kkt.view_mut((0, 0), (n, n)).copy_from(&q);
        for r in 0..m_eq {
            for j in 0..n {
                kkt[(n + r, j)] = a_eq[(r, j)];
                kkt[(j, n + r)] = a_eq[(r, j)];
            }
        }
        for (k, &i) in act.iter().enumerate() {
            for j in 0..n {
                kkt[(n + m_eq + k, j)] = rows[i].a[j];
                kkt[(j, n + m_eq + k)] = rows[i].a[j];
            }
        }
        let mut rhs = DVector::zeros(dim);
        for j in 0..n {
            rhs[j] = -c[j];
        }
        for r in 0..m_eq {
            rhs[n + r] = p.b_eq[r];
        }
        for (k, &i) in act.iter().enumerate() {
            rhs[n + m_eq + k] = rows[i].b;
        }
        let lu = kkt.clone().full_piv_lu();
        let Some(sol) = lu.solve(&rhs) else { continue };
        // Reject numerically-singular candidates.
        let resid = (&kkt * &sol - &rhs).amax();
        if resid > 1e-6 * rhs.amax().max(1.0) {
            continue;
        }
        let x: Vec<f64> = sol.iter().take(n).copied().collect();
        if !is_feasible(p, &x, &rows) {
            continue;
        }
        let obj = p.objective(&x);
        if best.as_ref().map_or(true, |b| obj < b.objective - 0.0) {
            best = Some(ReferenceSolution { x, objective: obj });
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::{CscMatrix, SymCscMatrix};

    #[test]
    fn line_projection() {
        let q = SymCscMatrix::from_triplets(2, &[(0, 0, 1.0), (1, 1, 1.0)]);
        let p = QpProblem {
            n: 2,
            q,
            c: vec![0.0, 0.0],
            a_eq: CscMatrix::from_triplets(1, 2, &[(0, 0, 1.0), (0, 1, 1.0)]),
            b_eq: vec![1.0],
            a_in: CscMatrix::zeros(0, 2),
            b_in: vec![],
            lb: vec![f64::NEG_INFINITY; 2],
            ub: vec![f64::INFINITY; 2],
        };
        let sol = solve_reference(&p).unwrap();
        assert!((sol.x[0] - 0.5).abs() < 1e-10);
        assert!((sol.x[1] - 0.5).abs() < 1e-10);
        assert!((sol.objective - 0.25).abs() < 1e-10);
    }

    #[test]
    fn active_lower_bound() {
        let q = SymCscMatrix::from_triplets(1, &[(0, 0, 1.0)]);
        let p = QpProblem {
            n: 1,
            q,
            c: vec![0.0],
            a_eq: CscMatrix::zeros(0, 1),
            b_eq: vec![],
            a_in: CscMatrix::zeros(0, 1),
            b_in: vec![],
            lb: vec![3.0],
            ub: vec![f64::INFINITY],
        };
        let sol = solve_reference(&p).unwrap();
        assert!((sol.x[0] - 3.0).abs() < 1e-10);
    }

    #[test]
    fn infeasible_box_returns_none() {
        let q = SymCscMatrix::from_triplets(1, &[(0, 0, 1.0)]);
        let p = QpProblem {
            n: 1,
            q,
            c: vec![0.0],
            a_eq: CscMatrix::zeros(0, 1),
            b_eq: vec![],
            a_in: CscMatrix::from_triplets(1, 1, &[(0, 0, 1.0)]),
            b_in: vec![-1.0],
            lb: vec![0.0],
            ub: vec![5.0],
        };
        assert!(solve_reference(&p).is_none());
    }
}
