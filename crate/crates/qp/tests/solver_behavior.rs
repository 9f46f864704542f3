use disagg_qp::sparse::{CscMatrix, SymCscMatrix};
use disagg_qp::{kkt_residuals, solve_qp, solve_qp_traced, QpProblem, SolveStatus, SolverSettings};

fn line_projection() -> QpProblem {
    // min ½(x² + y²) s.t. x + y = 1
    QpProblem {
        n: 2,
        q: SymCscMatrix::from_triplets(2, &[(0, 0, 1.0), (1, 1, 1.0)]),
        c: vec![0.0, 0.0],
        a_eq: CscMatrix::from_triplets(1, 2, &[(0, 0, 1.0), (0, 1, 1.0)]),
        b_eq: vec![1.0],
        a_in: CscMatrix::zeros(0, 2),
        b_in: vec![],
        lb: vec![f64::NEG_INFINITY; 2],
        ub: vec![f64::INFINITY; 2],
    }
}

#[test]
fn projects_onto_line() {
    let sol = solve_qp(&line_projection(), &SolverSettings::default()).unwrap();
    assert_eq!(sol.status, SolveStatus::Optimal);
    assert!((sol.x[0] - 0.5).abs() < 1e-6, "x = {:?}", sol.x);
    assert!((sol.x[1] - 0.5).abs() < 1e-6);
    assert!((sol.objective - 0.25).abs() < 1e-6);
}

#[test]
fn active_bound_is_found() {
    // min ½x² s.t. x ≥ 3
    let p = QpProblem {
        n: 1,
        q: SymCscMatrix::from_triplets(1, &[(0, 0, 1.0)]),
        c: vec![0.0],
        a_eq: CscMatrix::zeros(0, 1),
        b_eq: vec![],
        a_in: CscMatrix::zeros(0, 1),
        b_in: vec![],
        lb: vec![3.0],
        ub: vec![f64::INFINITY],
    };
    let sol = solve_qp(&p, &SolverSettings::default()).unwrap();
    assert_eq!(sol.status, SolveStatus::Optimal);
    assert!((sol.x[0] - 3.0).abs() < 1e-6, "x = {:?}", sol.x);
}

#[test]
fn contradictory_constraints_are_flagged_infeasible() {
    // x ≤ -1 conflicts with x ≥ 0.
    let p = QpProblem {
        n: 1,
        q: SymCscMatrix::from_triplets(1, &[(0, 0, 1.0)]),
        c: vec![0.0],
        a_eq: CscMatrix::zeros(0, 1),
        b_eq: vec![],
        a_in: CscMatrix::from_triplets(1, 1, &[(0, 0, 1.0)]),
        b_in: vec![-1.0],
        lb: vec![0.0],
        ub: vec![5.0],
    };
    let sol = solve_qp(&p, &SolverSettings::default()).unwrap();
    assert_eq!(sol.status, SolveStatus::Infeasible);
}

#[test]
fn contradictory_equalities_are_flagged_infeasible() {
    let p = QpProblem {
        n: 2,
        q: SymCscMatrix::from_triplets(2, &[(0, 0, 1.0), (1, 1, 1.0)]),
        c: vec![0.0, 0.0],
        a_eq: CscMatrix::from_triplets(
            2,
            2,
            &[(0, 0, 1.0), (0, 1, 1.0), (1, 0, 1.0), (1, 1, 1.0)],
        ),
        b_eq: vec![1.0, 3.0],
        a_in: CscMatrix::zeros(0, 2),
        b_in: vec![],
        lb: vec![f64::NEG_INFINITY; 2],
        ub: vec![f64::INFINITY; 2],
    };
    let sol = solve_qp(&p, &SolverSettings::default()).unwrap();
    assert_eq!(sol.status, SolveStatus::Infeasible);
}

#[test]
fn indefinite_objective_is_rejected() {
    let p = QpProblem {
        n: 2,
        q: SymCscMatrix::from_triplets(2, &[(0, 0, 1.0), (1, 1, -1.0)]),
        c: vec![0.0, 0.0],
        a_eq: CscMatrix::zeros(0, 2),
        b_eq: vec![],
        a_in: CscMatrix::zeros(0, 2),
        b_in: vec![],
        lb: vec![0.0, 0.0],
        ub: vec![1.0, 1.0],
    };
    assert!(solve_qp(&p, &SolverSettings::default()).is_err());
}

#[test]
fn warm_start_cuts_iterations() {
    // A banded strictly convex problem with boxes, perturbed slightly.
    let n = 40;
    let mut qt = Vec::new();
    for i in 0..n {
        qt.push((i, i, 4.0));
        if i + 1 < n {
            qt.push((i, i + 1, -1.0));
        }
    }
    let c: Vec<f64> = (0..n).map(|i| ((i * 7 % 13) as f64) - 6.0).collect();
    let base = QpProblem {
        n,
        q: SymCscMatrix::from_triplets(n, &qt),
        c,
        a_eq: CscMatrix::from_triplets(1, n, &[(0, 0, 1.0), (0, n - 1, 1.0)]),
        b_eq: vec![1.0],
        a_in: CscMatrix::zeros(0, n),
        b_in: vec![],
        lb: vec![-2.0; n],
        ub: vec![2.0; n],
    };
    let settings = SolverSettings::default();
    let cold = solve_qp(&base, &settings).unwrap();
    assert_eq!(cold.status, SolveStatus::Optimal);

    let mut perturbed = base.clone();
    for v in perturbed.c.iter_mut() {
        *v += 0.01;
    }
    let cold2 = solve_qp(&perturbed, &settings).unwrap();
    let warm = disagg_qp::solve_qp_warm(&perturbed, &settings, Some((&cold.x, &cold.y))).unwrap();
    assert_eq!(warm.status, SolveStatus::Optimal);
    assert!(
        warm.iterations <= cold2.iterations,
        "warm {} vs cold {}",
        warm.iterations,
        cold2.iterations
    );
}

#[test]
fn dual_residual_positive_at_feasible_nonoptimal_point_and_decreasing() {
    let p = line_projection();
    // Feasible but not optimal.
    let (rp, rd) = kkt_residuals(&p, &[1.0, 0.0], &[0.0, 0.0, 0.0]);
    assert!(rp < 1e-12);
    assert!(rd > 0.1);

    let (sol, trace) = solve_qp_traced(&p, &SolverSettings::default(), None).unwrap();
    assert_eq!(sol.status, SolveStatus::Optimal);
    assert!(trace.len() >= 1);
    let first = trace.first().unwrap();
    let last = trace.last().unwrap();
    assert!(last.2 <= first.2, "dual residual rose: {trace:?}");
}

#[test]
fn smoothed_residuals_trend_down() {
    // Larger problem so the trace has enough checkpoints to smooth.
    let n = 60;
    let mut qt = Vec::new();
    for i in 0..n {
        qt.push((i, i, 2.0));
        if i + 1 < n {
            qt.push((i, i + 1, 0.5));
        }
    }
    let c: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
    let mut eq = Vec::new();
    for j in 0..n {
        eq.push((0, j, 1.0));
    }
    let p = QpProblem {
        n,
        q: SymCscMatrix::from_triplets(n, &qt),
        c,
        a_eq: CscMatrix::from_triplets(1, n, &eq),
        b_eq: vec![5.0],
        a_in: CscMatrix::zeros(0, n),
        b_in: vec![],
        lb: vec![0.0; n],
        ub: vec![1.0; n],
    };
    let mut settings = SolverSettings::default();
    settings.eps_abs = 1e-9;
    settings.eps_rel = 1e-9;
    let (_, trace) = solve_qp_traced(&p, &settings, None).unwrap();
    let combined: Vec<f64> = trace.iter().map(|&(_, rp, rd)| rp + rd).collect();
    let window = 10usize;
    if combined.len() > window {
        let smooth: Vec<f64> = combined
            .windows(window)
            .map(|w| w.iter().sum::<f64>() / window as f64)
            .collect();
        for k in 1..smooth.len() {
            assert!(
                smooth[k] <= smooth[k - 1] * (1.0 + 1e-9) + 1e-12,
                "smoothed residual rose at checkpoint {k}: {} -> {}",
                smooth[k - 1],
                smooth[k]
            );
        }
    }
}
