//! Problem and solution types for the convex QP
//!
//!   minimize   ½ xᵀQx + cᵀx
//!   subject to A_eq x = b_eq,  A_in x ≤ b_in,  lb ≤ x ≤ ub.
//!
//! Dual multipliers are stacked as [y_eq; y_in; y_box] with one box
//! multiplier per variable (positive at the upper bound, negative at the
//! lower bound).

use crate::sparse::{CscMatrix, SymCscMatrix};

#[derive(Debug, thiserror::Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("bounds crossed at variable {0}: lb {1} > ub {2}")]
    BoundsCrossed(usize, f64, f64),
    #[error("non-finite input: {0}")]
    NonFinite(String),
    #[error("invalid settings: {0}")]
    Settings(String),
    #[error("Q is not positive semidefinite (indefinite KKT factorization)")]
    NotConvex,
    #[error("KKT factorization failed: {0}")]
    Factorization(#[from] crate::ldl::LdlError),
    #[error("problem dump parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub n: usize,
    pub q: SymCscMatrix,
    pub c: Vec<f64>,
    pub a_eq: CscMatrix,
    pub b_eq: Vec<f64>,
    pub a_in: CscMatrix,
    pub b_in: Vec<f64>,
    pub lb: Vec<f64>,
    pub ub: Vec<f64>,
}

impl QpProblem {
    /// Unconstrained-box template: equalities and inequalities empty,
    /// bounds at ±∞.
    pub fn unconstrained(q: SymCscMatrix, c: Vec<f64>) -> Self {
        let n = q.n();
        QpProblem {
            n,
            q,
            c,
            a_eq: CscMatrix::zeros(0, n),
            b_eq: Vec::new(),
            a_in: CscMatrix::zeros(0, n),
            b_in: Vec::new(),
            lb: vec![f64::NEG_INFINITY; n],
            ub: vec![f64::INFINITY; n],
        }
    }

    pub fn m_eq(&self) -> usize {
        self.b_eq.len()
    }

    pub fn m_in(&self) -> usize {
        self.b_in.len()
    }

    /// Total dual length: equalities, inequalities, then one box row per
    /// variable.
    pub fn m_total(&self) -> usize {
        self.m_eq() + self.m_in() + self.n
    }

    pub fn validate(&self) -> Result<(), QpError> {
        let n = self.n;
        if self.q.n() != n {
            return Err(QpError::Dimension(format!("Q is {}x{}, n={n}", self.q.n(), self.q.n())));
        }
        if self.c.len() != n {
            return Err(QpError::Dimension(format!("c has length {}, n={n}", self.c.len())));
        }
        if self.a_eq.ncols() != n || self.a_eq.nrows() != self.b_eq.len() {
            return Err(QpError::Dimension(format!(
                "A_eq is {}x{}, b_eq has length {}",
                self.a_eq.nrows(),
                self.a_eq.ncols(),
                self.b_eq.len()
            )));
        }
        if self.a_in.ncols() != n || self.a_in.nrows() != self.b_in.len() {
            return Err(QpError::Dimension(format!(
                "A_in is {}x{}, b_in has length {}",
                self.a_in.nrows(),
                self.a_in.ncols(),
                self.b_in.len()
            )));
        }
        if self.lb.len() != n || self.ub.len() != n {
            return Err(QpError::Dimension(format!(
                "bounds have lengths {}/{}, n={n}",
                self.lb.len(),
                self.ub.len()
            )));
        }
        for i in 0..n {
            if self.lb[i] > self.ub[i] {
                return Err(QpError::BoundsCrossed(i, self.lb[i], self.ub[i]));
            }
            if self.lb[i].is_nan() || self.ub[i].is_nan() {
                return Err(QpError::NonFinite(format!("bound at variable {i}")));
            }
        }
        for (name, v) in [("c", &self.c), ("b_eq", &self.b_eq), ("b_in", &self.b_in)] {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(QpError::NonFinite(format!("vector {name}")));
            }
        }
        if self.q.upper().values().iter().any(|x| !x.is_finite())
            || self.a_eq.values().iter().any(|x| !x.is_finite())
            || self.a_in.values().iter().any(|x| !x.is_finite())
        {
            return Err(QpError::NonFinite("matrix entries".into()));
        }
        Ok(())
    }

    /// ½ xᵀQx + cᵀx
    pub fn objective(&self, x: &[f64]) -> f64 {
        self.q.quad_form_half(x) + self.c.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SolveStatus::Optimal => write!(f, "optimal"),
            SolveStatus::MaxIter => write!(f, "max_iter"),
            SolveStatus::Infeasible => write!(f, "infeasible"),
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Residuals {
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: Vec<f64>,
    /// Stacked duals [y_eq; y_in; y_box].
    pub y: Vec<f64>,
    pub status: SolveStatus,
    pub residuals: Residuals,
    pub iterations: usize,
    pub objective: f64,
    pub solve_time: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct SolverSettings {
    pub rho: f64,
    pub sigma_reg: f64,
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub max_iter: usize,
    pub adaptive_rho: bool,
    pub polish: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            rho: 0.1,
            sigma_reg: 1e-6,
            eps_abs: 1e-6,
            eps_rel: 1e-6,
            max_iter: 20_000,
            adaptive_rho: true,
            polish: true,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<(), QpError> {
        if !(self.rho > 0.0) {
            return Err(QpError::Settings(format!("rho must be > 0, got {}", self.rho)));
        }
        if !(self.sigma_reg >= 0.0) {
            return Err(QpError::Settings(format!(
                "sigma_reg must be >= 0, got {}",
                self.sigma_reg
            )));
        }
        if !(self.eps_abs > 0.0) || !(self.eps_rel > 0.0) {
            return Err(QpError::Settings("tolerances must be > 0".into()));
        }
        if self.max_iter == 0 {
            return Err(QpError::Settings("max_iter must be >= 1".into()));
        }
        Ok(())
    }
}

/// Worst primal and dual KKT violation at (x, y).
///
/// Primal: max violation over equalities, inequalities, and boxes.
/// Dual: ‖Qx + c + A_eqᵀy_eq + A_inᵀy_in + y_box‖_∞, plus any negative part
/// of inequality multipliers (which must be ≥ 0).
pub fn kkt_residuals(problem: &QpProblem, x: &[f64], y: &[f64]) -> (f64, f64) {
    assert_eq!(x.len(), problem.n);
    assert_eq!(y.len(), problem.m_total());
    let (m_eq, m_in) = (problem.m_eq(), problem.m_in());
    let y_eq = &y[..m_eq];
    let y_in = &y[m_eq..m_eq + m_in];
    let y_box = &y[m_eq + m_in..];

    let mut r_primal = 0.0f64;
    for (ri, &bi) in problem.a_eq.matvec(x).iter().zip(&problem.b_eq) {
        r_primal = r_primal.max((ri - bi).abs());
    }
    for (ri, &bi) in problem.a_in.matvec(x).iter().zip(&problem.b_in) {
        r_primal = r_primal.max(ri - bi);
    }
    for i in 0..problem.n {
        r_primal = r_primal.max(problem.lb[i] - x[i]).max(x[i] - problem.ub[i]);
    }
    r_primal = r_primal.max(0.0);

    let mut grad = problem.q.matvec(x);
    for (g, &ci) in grad.iter_mut().zip(&problem.c) {
        *g += ci;
    }
    problem.a_eq.matvec_t_acc(y_eq, &mut grad);
    problem.a_in.matvec_t_acc(y_in, &mut grad);
    for (g, &yb) in grad.iter_mut().zip(y_box) {
        *g += yb;
    }
    let mut r_dual = grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
    for &yi in y_in {
        r_dual = r_dual.max(-yi);
    }
    (r_primal, r_dual)
}

/// Worst complementarity violation: |y_i|·dist-to-active-bound per one-sided
/// multiplier. A one-sided multiplier against an infinite bound counts as its
/// own magnitude.
pub fn complementarity(problem: &QpProblem, x: &[f64], y: &[f64]) -> f64 {
    let (m_eq, m_in) = (problem.m_eq(), problem.m_in());
    let y_in = &y[m_eq..m_eq + m_in];
    let y_box = &y[m_eq + m_in..];
    let mut worst = 0.0f64;
    for (ri, (&bi, &yi)) in problem
        .a_in
        .matvec(x)
        .iter()
        .zip(problem.b_in.iter().zip(y_in))
    {
        worst = worst.max(yi.max(0.0) * (bi - ri).abs());
    }
    for i in 0..problem.n {
        let y_up = y_box[i].max(0.0);
        let y_lo = (-y_box[i]).max(0.0);
        if problem.ub[i].is_finite() {
            worst = worst.max(y_up * (problem.ub[i] - x[i]).abs());
        } else {
            worst = worst.max(y_up);
        }
        if problem.lb[i].is_finite() {
            worst = worst.max(y_lo * (x[i] - problem.lb[i]).abs());
        } else {
            worst = worst.max(y_lo);
        }
    }
    worst
}
