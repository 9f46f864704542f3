//! Self-contained convex quadratic programming.
//!
//! Solves
//!
//!   minimize   ½ xᵀQx + cᵀx
//!   subject to A_eq x = b_eq,  A_in x ≤ b_in,  lb ≤ x ≤ ub
//!
//! with an ADMM operator-splitting method backed by a cached sparse LDLᵀ
//! factorization of the quasi-definite KKT matrix. Built for the large,
//! repeatedly re-solved programs of the disaggregation pipeline: fixed
//! sparsity across re-solves, warm starts, and a handful of dense coupling
//! rows handled by ordering them last.
//!
//! [`reference`] holds a dense active-set enumeration solver used as a test
//! oracle; [`dump`] a text format for shipping problems to external solvers.

pub mod dump;
pub mod ldl;
pub mod order;
pub mod problem;
pub mod reference;
pub mod scale;
pub mod solver;
pub mod sparse;

pub use problem::{
    complementarity, kkt_residuals, QpError, QpProblem, QpSolution, Residuals, SolveStatus,
    SolverSettings,
};
pub use solver::{solve_qp, solve_qp_traced, solve_qp_warm, ResidualTrace};
pub use sparse::{CscMatrix, SymCscMatrix};
