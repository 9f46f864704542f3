//! Operator-splitting QP solver.
//!
//! The problem is stacked into min ½xᵀQx + cᵀx s.t. l ≤ Ax ≤ u with
//! A = [A_eq; A_in; I]. Each iteration solves one quasi-definite KKT system
//!
//!   [Q + σI   Aᵀ ] [x̃]   [σx − c]
//!   [A       −R⁻¹] [ν] = [z − R⁻¹y]
//!
//! with R = diag(ρ_i), then projects onto the constraint box and updates the
//! duals with over-relaxation. The factorization is cached and only rebuilt
//! when the penalty ρ is rescaled. Residual checks and the infeasibility
//! certificate operate on unscaled quantities, so Ruiz equilibration cannot
//! change what "converged" means.

use std::time::Instant;

use crate::ldl::{LdlFactor, LdlSymbolic};
use crate::order::{invert_perm, rcm_dense_tail};
use crate::problem::{
    complementarity, kkt_residuals, QpError, QpProblem, QpSolution, Residuals, SolveStatus,
    SolverSettings,
};
use crate::scale::{ruiz_equilibrate, Scaling};
use crate::sparse::{CscMatrix, SymCscMatrix};

const ALPHA: f64 = 1.6;
const CHECK_INTERVAL: usize = 25;
const RHO_EQ_FACTOR: f64 = 1e3;
const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const RHO_ADAPT_TRIGGER: f64 = 5.0;
const EPS_PINF: f64 = 1e-6;
const SCALING_ITERS: usize = 10;
const POLISH_DELTA: f64 = 1e-7;
const POLISH_REFINE_STEPS: usize = 3;

/// Residual history entry: (iteration, unscaled primal, unscaled dual).
pub type ResidualTrace = Vec<(usize, f64, f64)>;

#[derive(Clone, Copy, PartialEq)]
enum RowKind {
    Equality,
    Inequality,
    Free,
}

impl RowKind {
    fn rho(self, base: f64) -> f64 {
        match self {
            RowKind::Equality => (base * RHO_EQ_FACTOR).clamp(RHO_MIN, RHO_MAX),
            RowKind::Inequality => base.clamp(RHO_MIN, RHO_MAX),
            RowKind::Free => RHO_MIN,
        }
    }
}

struct Workspace {
    n: usize,
    m: usize,
    // Scaled data.
    q: SymCscMatrix,
    c: Vec<f64>,
    a: CscMatrix,
    l: Vec<f64>,
    u: Vec<f64>,
    scaling: Scaling,
    // Unscaled stacked bounds, for the infeasibility certificate and polish.
    l0: Vec<f64>,
    u0: Vec<f64>,
    stacked: Vec<(usize, usize, f64)>,
    kinds: Vec<RowKind>,
    // KKT machinery.
    perm: Vec<usize>,
    inv: Vec<usize>,
    factor: LdlFactor,
    sigma: f64,
}

impl Workspace {
    fn kkt_matrix(&self, rho: &[f64]) -> CscMatrix {
        build_kkt(
            self.n,
            self.m,
            &self.q,
            &self.a,
            self.sigma,
            rho,
            &self.inv,
        )
    }
}

fn build_kkt(
    n: usize,
    m: usize,
    q: &SymCscMatrix,
    a: &CscMatrix,
    sigma: f64,
    rho: &[f64],
    inv: &[usize],
) -> CscMatrix {
    let mut t: Vec<(usize, usize, f64)> =
        Vec::with_capacity(q.nnz_upper() + a.nnz() + n + m);
    let put = |t: &mut Vec<(usize, usize, f64)>, i: usize, j: usize, v: f64| {
        let (pi, pj) = (inv[i], inv[j]);
        if pi <= pj {
            t.push((pi, pj, v));
        } else {
            t.push((pj, pi, v));
        }
    };
    for (i, j, v) in q.upper().triplets() {
        put(&mut t, i, j, v);
    }
    for i in 0..n {
        put(&mut t, i, i, sigma);
    }
    for (r, col, v) in a.triplets() {
        put(&mut t, col, n + r, v);
    }
    for i in 0..m {
        put(&mut t, n + i, n + i, -1.0 / rho[i]);
    }
    CscMatrix::from_triplets(n + m, n + m, &t)
}

/// Check that the permuted D has the quasi-definite sign pattern: positive on
/// primal positions, negative on dual positions.
fn check_qd_signs(factor: &LdlFactor, perm: &[usize], n: usize) -> Result<(), QpError> {
    for (k, &old) in perm.iter().enumerate() {
        let dk = factor.d()[k];
        if old < n {
            if dk <= 0.0 {
                return Err(QpError::NotConvex);
            }
        } else if dk >= 0.0 {
            return Err(QpError::NotConvex);
        }
    }
    Ok(())
}

fn setup(problem: &QpProblem, settings: &SolverSettings) -> Result<Workspace, QpError> {
    let n = problem.n;
    let m_eq = problem.m_eq();
    let m_in = problem.m_in();
    let m = m_eq + m_in + n;

    let mut stacked: Vec<(usize, usize, f64)> =
        Vec::with_capacity(problem.a_eq.nnz() + problem.a_in.nnz() + n);
    for (r, c, v) in problem.a_eq.triplets() {
        stacked.push((r, c, v));
    }
    for (r, c, v) in problem.a_in.triplets() {
        stacked.push((m_eq + r, c, v));
    }
    for i in 0..n {
        stacked.push((m_eq + m_in + i, i, 1.0));
    }
    let mut l0 = Vec::with_capacity(m);
    let mut u0 = Vec::with_capacity(m);
    l0.extend_from_slice(&problem.b_eq);
    u0.extend_from_slice(&problem.b_eq);
    for &b in &problem.b_in {
        l0.push(f64::NEG_INFINITY);
        u0.push(b);
    }
    l0.extend_from_slice(&problem.lb);
    u0.extend_from_slice(&problem.ub);
    let kinds: Vec<RowKind> = (0..m)
        .map(|i| {
            if l0[i] == u0[i] {
                RowKind::Equality
            } else if l0[i] == f64::NEG_INFINITY && u0[i] == f64::INFINITY {
                RowKind::Free
            } else {
                RowKind::Inequality
            }
        })
        .collect();

    let mut q = problem.q.clone();
    let mut c = problem.c.clone();
    let mut a = CscMatrix::from_triplets(m, n, &stacked);
    let mut l = l0.clone();
    let mut u = u0.clone();
    let scaling = ruiz_equilibrate(&mut q, &mut c, &mut a, &mut l, &mut u, SCALING_ITERS);

    // Ordering over the KKT graph; shared statistic rows are dense and go to
    // the back of the permutation.
    let nm = n + m;
    let mut edges: Vec<(usize, usize)> = Vec::with_capacity(q.nnz_upper() + a.nnz());
    for (i, j, _) in q.upper().triplets() {
        if i != j {
            edges.push((i, j));
        }
    }
    for (r, col, _) in a.triplets() {
        edges.push((col, n + r));
    }
    let avg_deg = (2 * edges.len()).max(1) / nm.max(1);
    let cutoff = (4 * avg_deg + 16).max(16);
    let perm = rcm_dense_tail(nm, edges.iter().copied(), cutoff);
    let inv = invert_perm(&perm);

    let rho0: Vec<f64> = kinds.iter().map(|k| k.rho(settings.rho)).collect();
    let kkt = build_kkt(n, m, &q, &a, settings.sigma_reg.max(1e-12), &rho0, &inv);
    let factor = LdlSymbolic::analyze(&kkt)?.factor(&kkt)?;
    let ws = Workspace {
        n,
        m,
        q,
        c,
        a,
        l,
        u,
        scaling,
        l0,
        u0,
        stacked,
        kinds,
        perm,
        inv,
        factor,
        sigma: settings.sigma_reg.max(1e-12),
    };
    check_qd_signs(&ws.factor, &ws.perm, n)?;
    Ok(ws)
}

pub fn solve_qp(problem: &QpProblem, settings: &SolverSettings) -> Result<QpSolution, QpError> {
    solve_qp_warm(problem, settings, None)
}

/// Solve with an optional warm start `(x0, y0)` in unscaled coordinates;
/// `y0` is stacked as [y_eq; y_in; y_box].
pub fn solve_qp_warm(
    problem: &QpProblem,
    settings: &SolverSettings,
    warm: Option<(&[f64], &[f64])>,
) -> Result<QpSolution, QpError> {
    solve_qp_traced(problem, settings, warm).map(|(sol, _)| sol)
}

/// As `solve_qp_warm`, additionally returning the unscaled residuals recorded
/// at every convergence check.
pub fn solve_qp_traced(
    problem: &QpProblem,
    settings: &SolverSettings,
    warm: Option<(&[f64], &[f64])>,
) -> Result<(QpSolution, ResidualTrace), QpError> {
    let start = Instant::now();
    settings.validate()?;
    problem.validate()?;
    let n = problem.n;
    if n == 0 {
        let sol = QpSolution {
            x: vec![],
            y: vec![],
            status: SolveStatus::Optimal,
            residuals: Residuals::default(),
            iterations: 0,
            objective: 0.0,
            solve_time: start.elapsed().as_secs_f64(),
        };
        return Ok((sol, vec![]));
    }

    let mut ws = setup(problem, settings)?;
    let m = ws.m;
    let d = ws.scaling.d.clone();
    let e = ws.scaling.e.clone();
    let cost = ws.scaling.cost;

    let mut rho_base = settings.rho;
    let mut rho: Vec<f64> = ws.kinds.iter().map(|k| k.rho(rho_base)).collect();

    let mut x = vec![0.0f64; n];
    let mut z = vec![0.0f64; m];
    let mut y = vec![0.0f64; m];
    if let Some((x0, y0)) = warm {
        assert_eq!(x0.len(), n, "warm start x has wrong length");
        assert_eq!(y0.len(), m, "warm start y has wrong length");
        for j in 0..n {
            x[j] = x0[j] / d[j];
        }
        for i in 0..m {
            y[i] = cost * y0[i] / e[i];
        }
        z = ws.a.matvec(&x);
        for i in 0..m {
            z[i] = z[i].clamp(ws.l[i], ws.u[i]);
        }
    } else {
        for i in 0..m {
            z[i] = 0.0f64.clamp(ws.l[i], ws.u[i]);
        }
    }

    let mut rhs = vec![0.0f64; n + m];
    let mut sol_buf = vec![0.0f64; n + m];
    let mut y_last_check = y.clone();
    let mut trace: ResidualTrace = Vec::new();
    let mut status = SolveStatus::MaxIter;
    let mut iterations = settings.max_iter;
    let mut cert_dy: Option<Vec<f64>> = None;

    for k in 1..=settings.max_iter {
        // KKT right-hand side in permuted order.
        for j in 0..n {
            rhs[ws.inv[j]] = ws.sigma * x[j] - ws.c[j];
        }
        for i in 0..m {
            rhs[ws.inv[n + i]] = z[i] - y[i] / rho[i];
        }
        ws.factor.solve_in_place(&mut rhs);
        for j in 0..n {
            sol_buf[j] = rhs[ws.inv[j]];
        }
        for i in 0..m {
            sol_buf[n + i] = rhs[ws.inv[n + i]];
        }
        let (x_tilde, nu) = sol_buf.split_at(n);

        for j in 0..n {
            x[j] = ALPHA * x_tilde[j] + (1.0 - ALPHA) * x[j];
        }
        for i in 0..m {
            let z_tilde = z[i] + (nu[i] - y[i]) / rho[i];
            let w = ALPHA * z_tilde + (1.0 - ALPHA) * z[i] + y[i] / rho[i];
            let z_new = w.clamp(ws.l[i], ws.u[i]);
            y[i] += rho[i] * (w - y[i] / rho[i] - z_new);
            z[i] = z_new;
        }

        if k % CHECK_INTERVAL != 0 && k != settings.max_iter {
            continue;
        }

        // Unscaled residuals.
        let ax = ws.a.matvec(&x);
        let qx = ws.q.matvec(&x);
        let aty = ws.a.matvec_t(&y);
        let mut r_p = 0.0f64;
        let mut scale_p = 0.0f64;
        for i in 0..m {
            let axi = ax[i] / e[i];
            let zi = z[i] / e[i];
            r_p = r_p.max((axi - zi).abs());
            scale_p = scale_p.max(axi.abs()).max(zi.abs());
        }
        let mut r_d = 0.0f64;
        let mut s_qx = 0.0f64;
        let mut s_aty = 0.0f64;
        let mut s_c = 0.0f64;
        for j in 0..n {
            r_d = r_d.max(((qx[j] + ws.c[j] + aty[j]) / d[j]).abs());
            s_qx = s_qx.max((qx[j] / d[j]).abs());
            s_aty = s_aty.max((aty[j] / d[j]).abs());
            s_c = s_c.max((ws.c[j] / d[j]).abs());
        }
        r_d /= cost;
        let scale_d = s_qx.max(s_aty).max(s_c) / cost;
        trace.push((k, r_p, r_d));

        if r_p <= settings.eps_abs + settings.eps_rel * scale_p
            && r_d <= settings.eps_abs + settings.eps_rel * scale_d
        {
            status = SolveStatus::Optimal;
            iterations = k;
            break;
        }

        // Primal infeasibility certificate from the dual change over the
        // last check window.
        let mut dy = vec![0.0f64; m];
        let mut dy_norm = 0.0f64;
        for i in 0..m {
            dy[i] = (y[i] - y_last_check[i]) * e[i] / cost;
            dy_norm = dy_norm.max(dy[i].abs());
        }
        if dy_norm > 1e-12 {
            // Aᵀδy in unscaled terms, via the scaled matrix.
            let mut dy_scaled = vec![0.0f64; m];
            for i in 0..m {
                dy_scaled[i] = (y[i] - y_last_check[i]) / cost;
            }
            let at_dy = ws.a.matvec_t(&dy_scaled);
            let at_norm = (0..n).fold(0.0f64, |acc, j| acc.max((at_dy[j] / d[j]).abs()));
            let mut support = 0.0f64;
            let mut valid = true;
            for i in 0..m {
                let pos = dy[i].max(0.0);
                let neg = dy[i].min(0.0);
                if pos > 0.0 {
                    if ws.u0[i] == f64::INFINITY {
                        if pos > EPS_PINF * dy_norm {
                            valid = false;
                            break;
                        }
                    } else {
                        support += ws.u0[i] * pos;
                    }
                }
                if neg < 0.0 {
                    if ws.l0[i] == f64::NEG_INFINITY {
                        if -neg > EPS_PINF * dy_norm {
                            valid = false;
                            break;
                        }
                    } else {
                        support += ws.l0[i] * neg;
                    }
                }
            }
            if valid && at_norm <= EPS_PINF * dy_norm && support <= -EPS_PINF * dy_norm {
                status = SolveStatus::Infeasible;
                iterations = k;
                cert_dy = Some(dy);
                break;
            }
        }
        y_last_check.copy_from_slice(&y);

        if settings.adaptive_rho && k < settings.max_iter {
            let ratio =
                (r_p / scale_p.max(1e-12)) / (r_d / scale_d.max(1e-12)).max(1e-12);
            let candidate = (rho_base * ratio.sqrt()).clamp(RHO_MIN, RHO_MAX);
            if candidate > rho_base * RHO_ADAPT_TRIGGER
                || candidate < rho_base / RHO_ADAPT_TRIGGER
            {
                rho_base = candidate;
                for (ri, kind) in rho.iter_mut().zip(&ws.kinds) {
                    *ri = kind.rho(rho_base);
                }
                let kkt = ws.kkt_matrix(&rho);
                ws.factor.refactor(&kkt)?;
                check_qd_signs(&ws.factor, &ws.perm, n)?;
            }
        }
    }

    // Unscale.
    let mut x_out = vec![0.0f64; n];
    for j in 0..n {
        x_out[j] = d[j] * x[j];
    }
    let mut y_out = vec![0.0f64; m];
    for i in 0..m {
        y_out[i] = e[i] * y[i] / cost;
    }
    if let Some(dy) = cert_dy {
        // On infeasibility the duals carry the certificate direction.
        y_out = dy;
    }

    if status == SolveStatus::Optimal && settings.polish {
        if let Some((px, py)) = polish(problem, &ws, &x_out, &y_out, settings) {
            x_out = px;
            y_out = py;
        }
    }

    let (rp, rd) = kkt_residuals(problem, &x_out, &y_out);
    let comp = complementarity(problem, &x_out, &y_out);
    let sol = QpSolution {
        objective: problem.objective(&x_out),
        x: x_out,
        y: y_out,
        status,
        residuals: Residuals {
            primal: rp,
            dual: rd,
            complementarity: comp,
        },
        iterations,
        solve_time: start.elapsed().as_secs_f64(),
    };
    Ok((sol, trace))
}

/// Active-set refinement. Solves the equality-constrained QP on the detected
/// active rows with a regularized KKT system plus iterative refinement, and
/// returns the refined point only if it is no worse than the input in
/// objective and feasibility.
fn polish(
    problem: &QpProblem,
    ws: &Workspace,
    x_in: &[f64],
    y_in: &[f64],
    settings: &SolverSettings,
) -> Option<(Vec<f64>, Vec<f64>)> {
    let n = ws.n;
    let m = ws.m;
    let mut active: Vec<(usize, f64)> = Vec::new();
    for i in 0..m {
        match ws.kinds[i] {
            RowKind::Equality => active.push((i, ws.l0[i])),
            RowKind::Free => {}
            RowKind::Inequality => {
                if y_in[i] < 0.0 && ws.l0[i].is_finite() {
                    active.push((i, ws.l0[i]));
                } else if y_in[i] > 0.0 && ws.u0[i].is_finite() {
                    active.push((i, ws.u0[i]));
                }
            }
        }
    }
    let ma = active.len();
    let row_of: std::collections::HashMap<usize, usize> = active
        .iter()
        .enumerate()
        .map(|(new, &(old, _))| (old, new))
        .collect();

    // Reduced KKT in unscaled coordinates.
    let mut g_triplets: Vec<(usize, usize, f64)> = Vec::new();
    for &(r, c, v) in &ws.stacked {
        if let Some(&new) = row_of.get(&r) {
            g_triplets.push((new, c, v));
        }
    }
    let nm = n + ma;
    let mut edges: Vec<(usize, usize)> = Vec::new();
    for (i, j, _) in problem.q.upper().triplets() {
        if i != j {
            edges.push((i, j));
        }
    }
    for &(r, c, _) in &g_triplets {
        edges.push((c, n + r));
    }
    let perm = rcm_dense_tail(nm, edges.iter().copied(), 64.max(4 * (2 * edges.len() / nm.max(1))));
    let inv = invert_perm(&perm);
    let put = |t: &mut Vec<(usize, usize, f64)>, i: usize, j: usize, v: f64| {
        let (pi, pj) = (inv[i], inv[j]);
        if pi <= pj {
            t.push((pi, pj, v));
        } else {
            t.push((pj, pi, v));
        }
    };
    let mut kt: Vec<(usize, usize, f64)> = Vec::new();
    for (i, j, v) in problem.q.upper().triplets() {
        put(&mut kt, i, j, v);
    }
    for j in 0..n {
        put(&mut kt, j, j, POLISH_DELTA);
    }
    for &(r, c, v) in &g_triplets {
        put(&mut kt, c, n + r, v);
    }
    for r in 0..ma {
        put(&mut kt, n + r, n + r, -POLISH_DELTA);
    }
    let kkt = CscMatrix::from_triplets(nm, nm, &kt);
    let symbolic = LdlSymbolic::analyze(&kkt).ok()?;
    let factor = symbolic.factor(&kkt).ok()?;

    let g = CscMatrix::from_triplets(ma, n, &g_triplets);
    let mut rhs_true = vec![0.0f64; nm];
    for j in 0..n {
        rhs_true[j] = -problem.c[j];
    }
    for (r, &(_, b)) in active.iter().enumerate() {
        rhs_true[n + r] = b;
    }

    // Iterative refinement against the unregularized KKT operator.
    let mut sol = vec![0.0f64; nm];
    let mut resid = vec![0.0f64; nm];
    let mut permuted = vec![0.0f64; nm];
    for _ in 0..=POLISH_REFINE_STEPS {
        // resid = rhs_true - K_true * sol
        let (sx, sy) = sol.split_at(n);
        let mut kx = problem.q.matvec(sx);
        g.matvec_t_acc(sy, &mut kx);
        let gx = g.matvec(sx);
        for j in 0..n {
            resid[j] = rhs_true[j] - kx[j];
        }
        for r in 0..ma {
            resid[n + r] = rhs_true[n + r] - gx[r];
        }
        for i in 0..nm {
            permuted[inv[i]] = resid[i];
        }
        factor.solve_in_place(&mut permuted);
        for i in 0..nm {
            sol[i] += permuted[inv[i]];
        }
    }

    let x_pol = sol[..n].to_vec();
    let mut y_pol = vec![0.0f64; m];
    for (r, &(old, _)) in active.iter().enumerate() {
        y_pol[old] = sol[n + r];
    }

    let (rp0, rd0) = kkt_residuals(problem, x_in, y_in);
    let (rp1, rd1) = kkt_residuals(problem, &x_pol, &y_pol);
    let obj0 = problem.objective(x_in);
    let obj1 = problem.objective(&x_pol);
    let feas_ok = rp1 <= rp0.max(settings.eps_abs);
    let dual_ok = rd1 <= rd0.max(settings.eps_abs);
    let obj_ok = obj1 <= obj0 + 1e-12 * obj0.abs().max(1.0);
    if feas_ok && dual_ok && obj_ok {
        Some((x_pol, y_pol))
    } else {
        None
    }
}
