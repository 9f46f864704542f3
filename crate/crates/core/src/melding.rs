//! Method objectives over the relaxed variables.
//!
//! All three methods minimize a negative log posterior of the form
//! ½xᵀQx + cᵀx + constant over the constraint polytope:
//!
//! - the additive likelihood ties the mains reading to Σᵢ SᵢᵀμᵢN + U,
//! - the chain prior is linear in (S, H),
//! - the unknown-load prior penalizes |U_{t+1} − U_t| through epigraph
//!   slacks,
//! - `Pr` adds quadratic penalties pulling each statistic toward its
//!   population mean,
//! - `Lbm` melds the population regression of each statistic against the
//!   prior the HMM itself induces on it, geometrically weighted by 1 − α.
//!
//! Constants fold in every term that depends on the noise variances so the
//! objective is comparable across variance updates.

use crate::hmm::{ApplianceHmm, NoiseState, RelaxedAssignment, PROB_FLOOR};
use crate::layout::{build_constraints, ConstraintSpec, VariableLayout};
use crate::stats::{
    eval_statistic, statistic_form, PopulationModel, StatisticKind, StatsError,
};
use crate::hmm::HmmError;
use disagg_qp::SymCscMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum MeldingError {
    #[error("method requires a population model but none was supplied")]
    MissingPopulation,
    #[error("bad method configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Hmm(#[from] HmmError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// Which objective to assemble.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum MethodVariant {
    Afhmm,
    /// Quadratic penalties toward population means; `lambda` overrides the
    /// per-statistic weight (default 1 / (2 · population variance)).
    Pr { lambda: Option<Vec<f64>> },
    /// Latent melding with geometric weight 1 − α on the melded terms.
    Lbm { alpha: f64 },
}

/// How the cycle-count weights ξ are optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XiMode {
    /// ξ relaxed onto its simplex and solved jointly with everything else.
    Joint,
    /// ξ pinned to its best one-hot choice before each solve.
    Enumerate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodConfig {
    pub variant: MethodVariant,
    pub stats: Vec<StatisticKind>,
    /// Scale v² of the Laplacian prior on U increments.
    pub u_prior_v2: f64,
    /// Gamma prior (shape a, rate b) on the precisions.
    pub gamma_a: f64,
    pub gamma_b: f64,
    pub xi_mode: XiMode,
}

pub const DEFAULT_U_PRIOR_V2: f64 = 1e4;
pub const DEFAULT_GAMMA_A: f64 = 1.000001;
pub const DEFAULT_GAMMA_B: f64 = 1e-6;
pub const DEFAULT_ALPHA: f64 = 0.5;

impl MethodConfig {
    fn with_variant(variant: MethodVariant, stats: Vec<StatisticKind>) -> Self {
        MethodConfig {
            variant,
            stats,
            u_prior_v2: DEFAULT_U_PRIOR_V2,
            gamma_a: DEFAULT_GAMMA_A,
            gamma_b: DEFAULT_GAMMA_B,
            xi_mode: XiMode::Joint,
        }
    }

    pub fn afhmm() -> Self {
        Self::with_variant(MethodVariant::Afhmm, Vec::new())
    }

    pub fn pr(stats: Vec<StatisticKind>) -> Self {
        Self::with_variant(MethodVariant::Pr { lambda: None }, stats)
    }

    pub fn lbm(alpha: f64, stats: Vec<StatisticKind>) -> Self {
        Self::with_variant(MethodVariant::Lbm { alpha }, stats)
    }

    pub fn label(&self) -> &'static str {
        match self.variant {
            MethodVariant::Afhmm => "afhmm",
            MethodVariant::Pr { .. } => "pr",
            MethodVariant::Lbm { .. } => "lbm",
        }
    }

    pub fn needs_population(&self) -> bool {
        match self.variant {
            MethodVariant::Afhmm => false,
            MethodVariant::Pr { .. } | MethodVariant::Lbm { .. } => !self.stats.is_empty(),
        }
    }

    pub fn validate(&self) -> Result<(), MeldingError> {
        if self.u_prior_v2 <= 0.0 || self.gamma_a <= 1.0 || self.gamma_b <= 0.0 {
            return Err(MeldingError::Config(
                "need v² > 0, gamma shape > 1, gamma rate > 0".into(),
            ));
        }
        let mut seen = [false; 3];
        for kind in &self.stats {
            if std::mem::replace(&mut seen[kind.index()], true) {
                return Err(MeldingError::Config(format!(
                    "statistic {} listed twice",
                    kind.label()
                )));
            }
        }
        match &self.variant {
            MethodVariant::Afhmm => Ok(()),
            MethodVariant::Pr { lambda } => {
                if let Some(l) = lambda {
                    if l.len() != self.stats.len() || l.iter().any(|&v| v < 0.0 || !v.is_finite())
                    {
                        return Err(MeldingError::Config(
                            "lambda overrides must be non-negative, one per statistic".into(),
                        ));
                    }
                }
                Ok(())
            }
            MethodVariant::Lbm { alpha } => {
                if !(0.0..=1.0).contains(alpha) {
                    return Err(MeldingError::Config(format!("alpha {alpha} outside [0, 1]")));
                }
                Ok(())
            }
        }
    }
}

/// PSD status of an assembled quadratic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum PsdStatus {
    VerifiedPsd,
    Repaired { shift: f64 },
    IndefiniteRejected,
}

/// ½xᵀQx + cᵀx + constant.
#[derive(Debug, Clone)]
pub struct QuadraticObjective {
    pub q: SymCscMatrix,
    pub c: Vec<f64>,
    pub constant: f64,
    pub psd_status: PsdStatus,
}

impl QuadraticObjective {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.q.quad_form_half(x)
            + self.c.iter().zip(x).map(|(&ci, &xi)| ci * xi).sum::<f64>()
            + self.constant
    }
}

fn ln_2pi_var(var: f64) -> f64 {
    (2.0 * std::f64::consts::PI * var).ln()
}

/// Default posterior-regularization weight: 1 / (2 · population variance).
fn resolve_lambda(
    lambda: &Option<Vec<f64>>,
    pop: &PopulationModel,
    i: usize,
    m: usize,
    kind: &StatisticKind,
) -> f64 {
    match lambda {
        Some(values) => values[m],
        None => 1.0 / (2.0 * pop.appliances[i].population_variance(kind)),
    }
}

fn validate_inputs(
    method: &MethodConfig,
    y: &[f64],
    hmms: &[ApplianceHmm],
    population: Option<&PopulationModel>,
    noise: &NoiseState,
    layout: &VariableLayout,
) -> Result<(), MeldingError> {
    method.validate()?;
    noise.validate()?;
    if y.len() != layout.t() {
        return Err(MeldingError::Shape(format!(
            "{} readings for a layout of {} samples",
            y.len(),
            layout.t()
        )));
    }
    if hmms.len() != layout.appliances() {
        return Err(MeldingError::Shape(format!(
            "{} models for {} appliance blocks",
            hmms.len(),
            layout.appliances()
        )));
    }
    for (i, hmm) in hmms.iter().enumerate() {
        if hmm.k() != layout.k(i) {
            return Err(MeldingError::Shape(format!(
                "{}: K={} but layout block has {}",
                hmm.name(),
                hmm.k(),
                layout.k(i)
            )));
        }
    }
    if layout.stats() != method.stats {
        return Err(MeldingError::Shape(
            "layout was built for a different statistic set".into(),
        ));
    }
    if method.needs_population() || matches!(method.variant, MethodVariant::Lbm { .. }) {
        let pop = population.ok_or(MeldingError::MissingPopulation)?;
        if pop.appliances.len() != hmms.len() {
            return Err(MeldingError::Shape(
                "population model covers a different appliance set".into(),
            ));
        }
        for (i, app) in pop.appliances.iter().enumerate() {
            if app.cycle_prior.len() != app.c || app.c != layout.c(i) {
                return Err(MeldingError::Shape(format!(
                    "{}: cycle support {} does not match layout {}",
                    app.appliance_name,
                    app.c,
                    layout.c(i)
                )));
            }
        }
    }
    let needs_stat_noise = matches!(method.variant, MethodVariant::Lbm { .. });
    if needs_stat_noise
        && (noise.sigma2_stat.len() != hmms.len()
            || noise
                .sigma2_stat
                .iter()
                .any(|row| row.len() != method.stats.len()))
    {
        return Err(MeldingError::Shape(
            "noise state lacks per-statistic variances".into(),
        ));
    }
    Ok(())
}

/// Assemble the objective without any PSD repair; `psd_status` reports the
/// verdict of the eigenvalue check on the raw Q.
pub fn assemble_raw(
    method: &MethodConfig,
    y: &[f64],
    hmms: &[ApplianceHmm],
    population: Option<&PopulationModel>,
    noise: &NoiseState,
    layout: &VariableLayout,
) -> Result<QuadraticObjective, MeldingError> {
    assemble_raw_impl(method, y, hmms, population, noise, layout, None)
}

/// Same objective with each appliance's component weights fixed at a single
/// component. The weight columns drop out of the quadratic (their rows are
/// box-pinned by the caller), which keeps the matrix positive semidefinite
/// under the statistic variance caps instead of carrying the indefinite
/// joint weight block.
pub fn assemble_raw_pinned(
    method: &MethodConfig,
    y: &[f64],
    hmms: &[ApplianceHmm],
    population: Option<&PopulationModel>,
    noise: &NoiseState,
    layout: &VariableLayout,
    pinned_xi: &[usize],
) -> Result<QuadraticObjective, MeldingError> {
    assemble_raw_impl(method, y, hmms, population, noise, layout, Some(pinned_xi))
}

fn assemble_raw_impl(
    method: &MethodConfig,
    y: &[f64],
    hmms: &[ApplianceHmm],
    population: Option<&PopulationModel>,
    noise: &NoiseState,
    layout: &VariableLayout,
    pinned_xi: Option<&[usize]>,
) -> Result<QuadraticObjective, MeldingError> {
    validate_inputs(method, y, hmms, population, noise, layout)?;
    if let Some(pins) = pinned_xi {
        if pins.len() != hmms.len() {
            return Err(MeldingError::Shape(format!(
                "pinned weight choices: got {}, expected one per appliance ({})",
                pins.len(),
                hmms.len()
            )));
        }
        for (i, &choice) in pins.iter().enumerate() {
            if choice >= layout.c(i) {
                return Err(MeldingError::Shape(format!(
                    "appliance {i}: pinned component {choice} out of range (C = {})",
                    layout.c(i)
                )));
            }
        }
    }
    let t = layout.t();
    let n = layout.n();
    let mut q: Vec<(usize, usize, f64)> = Vec::new();
    let mut c = vec![0.0; n];
    let mut constant = 0.0;

    // Likelihood: (1/2σ²) Σ_t (y_t − Σ_{i,k} μ_ik S_itk − U_t)².
    let sigma2 = noise.sigma2;
    let mut row: Vec<(usize, f64)> = Vec::new();
    for tt in 0..t {
        row.clear();
        for (i, hmm) in hmms.iter().enumerate() {
            for k in 1..hmm.k() {
                row.push((layout.s_idx(i, tt, k), hmm.mu()[k]));
            }
        }
        row.push((layout.u_idx(tt), 1.0));
        for (a_pos, &(pa, va)) in row.iter().enumerate() {
            for &(pb, vb) in &row[a_pos..] {
                let (lo, hi) = if pa <= pb { (pa, pb) } else { (pb, pa) };
                q.push((lo, hi, va * vb / sigma2));
            }
            c[pa] -= y[tt] * va / sigma2;
        }
        constant += y[tt] * y[tt] / (2.0 * sigma2);
    }
    constant += t as f64 / 2.0 * ln_2pi_var(sigma2);

    // Chain prior, linear in (S, H).
    for (i, hmm) in hmms.iter().enumerate() {
        for k in 0..hmm.k() {
            c[layout.s_idx(i, 0, k)] -= hmm.log_pi(k);
        }
        for tt in 0..t - 1 {
            for to in 0..hmm.k() {
                for from in 0..hmm.k() {
                    c[layout.h_idx(i, tt, to, from)] -= hmm.log_p(to, from);
                }
            }
        }
    }

    // Laplacian prior on U increments through the slacks.
    let v2 = method.u_prior_v2;
    for tt in 0..t - 1 {
        c[layout.slack_idx(tt)] += 1.0 / (2.0 * v2);
    }
    constant += (t as f64 - 1.0) * (4.0 * v2).ln();

    // Gamma prior on the observation precision.
    let (ga, gb) = (method.gamma_a, method.gamma_b);
    constant += gb / sigma2 + (ga - 1.0) * sigma2.ln();

    match &method.variant {
        MethodVariant::Afhmm => {}
        MethodVariant::Pr { lambda } => {
            let pop = population.ok_or(MeldingError::MissingPopulation)?;
            for i in 0..hmms.len() {
                for (m, kind) in method.stats.iter().enumerate() {
                    let lam = resolve_lambda(lambda, pop, i, m, kind);
                    let target = pop.appliances[i].population_mean(kind);
                    let f = layout.f_idx(i, m);
                    q.push((f, f, 2.0 * lam));
                    c[f] -= 2.0 * lam * target;
                    constant += lam * target * target;
                }
            }
        }
        MethodVariant::Lbm { alpha } => {
            let pop = population.ok_or(MeldingError::MissingPopulation)?;
            let w = 1.0 - alpha;
            for (i, app) in pop.appliances.iter().enumerate() {
                for (m, kind) in method.stats.iter().enumerate() {
                    let s2 = noise.sigma2_stat[i][m];
                    let s2_hat = app.induced.sigma2_hat[kind.index()];
                    let mu_hat = app.induced.mu_hat[kind.index()];
                    let mu_bar = &app.stats.get(kind).mu_bar;
                    let f = layout.f_idx(i, m);

                    // (f − ξᵀμ̄)² / 2σ² minus the induced (f − μ̂)² / 2σ̂²,
                    // with ξᵀμ̄ either a free linear form or a pinned scalar.
                    q.push((f, f, w * (1.0 / s2 - 1.0 / s2_hat)));
                    match pinned_xi {
                        Some(pins) => {
                            let mb = mu_bar[pins[i]];
                            c[f] -= w * mb / s2;
                            constant += w * mb * mb / (2.0 * s2);
                        }
                        None => {
                            for (cc, &mb) in mu_bar.iter().enumerate() {
                                if mb != 0.0 {
                                    let xi = layout.xi_idx(i, cc);
                                    let (lo, hi) = if f <= xi { (f, xi) } else { (xi, f) };
                                    q.push((lo, hi, -w * mb / s2));
                                }
                            }
                            for (ca, &ma) in mu_bar.iter().enumerate() {
                                if ma == 0.0 {
                                    continue;
                                }
                                for (cb, &mbv) in mu_bar.iter().enumerate().skip(ca) {
                                    if mbv != 0.0 {
                                        q.push((
                                            layout.xi_idx(i, ca),
                                            layout.xi_idx(i, cb),
                                            w * ma * mbv / s2,
                                        ));
                                    }
                                }
                            }
                        }
                    }
                    c[f] += w * mu_hat / s2_hat;
                    constant += w
                        * (0.5 * ln_2pi_var(s2)
                            - mu_hat * mu_hat / (2.0 * s2_hat)
                            - 0.5 * ln_2pi_var(s2_hat));
                    // Gamma prior on this precision (not melded).
                    constant += gb / s2 + (ga - 1.0) * s2.ln();
                }
                // Component-count prior on the weights, once per appliance.
                match pinned_xi {
                    Some(pins) => {
                        constant -= w * app.cycle_prior[pins[i]].max(PROB_FLOOR).ln();
                    }
                    None => {
                        for (cc, &p) in app.cycle_prior.iter().enumerate() {
                            c[layout.xi_idx(i, cc)] -= w * p.max(PROB_FLOOR).ln();
                        }
                    }
                }
            }
        }
    }

    // Zero-weighted terms (α = 1, zero regression means) add nothing; drop
    // them so the pattern matches the plain additive objective exactly.
    q.retain(|&(_, _, v)| v != 0.0);
    let q = SymCscMatrix::from_triplets(n, &q);
    let psd_status = if min_eigenvalue(&q) >= -PSD_TOL {
        PsdStatus::VerifiedPsd
    } else {
        PsdStatus::IndefiniteRejected
    };
    Ok(QuadraticObjective {
        q,
        c,
        constant,
        psd_status,
    })
}

/// Assemble and repair the objective, returning it with the constraint
/// system of the layout.
pub fn assemble_objective(
    method: &MethodConfig,
    y: &[f64],
    hmms: &[ApplianceHmm],
    population: Option<&PopulationModel>,
    noise: &NoiseState,
    layout: &VariableLayout,
) -> Result<(QuadraticObjective, ConstraintSpec), MeldingError> {
    let raw = assemble_raw(method, y, hmms, population, noise, layout)?;
    let (q, psd_status) = psd_repair(&raw.q);
    let constraints = build_constraints(layout, hmms)?;
    Ok((
        QuadraticObjective {
            q,
            c: raw.c,
            constant: raw.constant,
            psd_status,
        },
        constraints,
    ))
}

const PSD_TOL: f64 = 1e-10;
const PSD_MARGIN: f64 = 1e-8;

/// Smallest eigenvalue of Q, computed per connected component of the
/// sparsity graph. Components stay small by construction: one per time step
/// for the likelihood, one per appliance for the (f, ξ) coupling, and
/// isolated columns everywhere else.
pub fn min_eigenvalue(q: &SymCscMatrix) -> f64 {
    let n = q.n();
    if n == 0 {
        return 0.0;
    }
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, mut a: usize) -> usize {
        while parent[a] != a {
            parent[a] = parent[parent[a]];
            a = parent[a];
        }
        a
    }
    let triplets = q.upper().triplets();
    for &(r, c, _) in &triplets {
        if r != c {
            let (ra, rb) = (find(&mut parent, r), find(&mut parent, c));
            if ra != rb {
                parent[ra] = rb;
            }
        }
    }
    let mut members: std::collections::HashMap<usize, Vec<usize>> = std::collections::HashMap::new();
    for v in 0..n {
        let root = find(&mut parent, v);
        members.entry(root).or_default().push(v);
    }
    let mut entries: std::collections::HashMap<usize, Vec<(usize, usize, f64)>> =
        std::collections::HashMap::new();
    for &(r, c, v) in &triplets {
        let root = find(&mut parent, r);
        entries.entry(root).or_default().push((r, c, v));
    }

    let mut min_eig = 0.0f64;
    for (root, verts) in &members {
        let comp_entries = entries.get(root);
        if verts.len() == 1 {
            let diag = comp_entries
                .map(|es| es.iter().map(|e| e.2).sum::<f64>())
                .unwrap_or(0.0);
            min_eig = min_eig.min(diag);
            continue;
        }
        let mut local = std::collections::HashMap::new();
        for (pos, &v) in verts.iter().enumerate() {
            local.insert(v, pos);
        }
        let d = verts.len();
        let locals: Vec<(usize, usize, f64)> = comp_entries
            .map(|es| {
                es.iter()
                    .map(|&(r, c, v)| (local[&r], local[&c], v))
                    .collect()
            })
            .unwrap_or_default();
        if d <= DENSE_EIG_LIMIT {
            let mut dense: nalgebra::DMatrix<f64> = nalgebra::DMatrix::zeros(d, d);
            for &(lr, lc, v) in &locals {
                dense[(lr, lc)] += v;
                if lr != lc {
                    dense[(lc, lr)] += v;
                }
            }
            let eig = nalgebra::SymmetricEigen::new(dense);
            min_eig = min_eig.min(eig.eigenvalues.min());
        } else {
            min_eig = min_eig.min(lanczos_min_eigenvalue(d, &locals));
        }
    }
    min_eig
}

/// Components too large to decompose densely.
const DENSE_EIG_LIMIT: usize = 512;

/// Smallest eigenvalue of a large sparse symmetric component, estimated by a
/// fully reorthogonalized Lanczos run on the Gershgorin-shifted matrix. The
/// start vector is a fixed pseudo-random pattern, so the estimate is
/// deterministic.
fn lanczos_min_eigenvalue(d: usize, entries: &[(usize, usize, f64)]) -> f64 {
    // Gershgorin upper bound: every eigenvalue is <= max_i (a_ii + r_i).
    let mut diag = vec![0.0f64; d];
    let mut radius = vec![0.0f64; d];
    for &(r, c, v) in entries {
        if r == c {
            diag[r] += v;
        } else {
            radius[r] += v.abs();
            radius[c] += v.abs();
        }
    }
    let hi = diag
        .iter()
        .zip(&radius)
        .map(|(a, r)| a + r)
        .fold(f64::NEG_INFINITY, f64::max);

    // B = hi*I - A is PSD with largest eigenvalue hi - min_eig(A).
    let matvec = |x: &[f64], out: &mut [f64]| {
        for (o, &xv) in out.iter_mut().zip(x) {
            *o = hi * xv;
        }
        for &(r, c, v) in entries {
            out[r] -= v * x[c];
            if r != c {
                out[c] -= v * x[r];
            }
        }
    };

    // Deterministic +-1 start vector from a small linear congruential step.
    let mut state = 0x9e3779b97f4a7c15u64;
    let mut v: Vec<f64> = (0..d)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            if state >> 63 == 0 {
                1.0
            } else {
                -1.0
            }
        })
        .collect();
    let norm = (d as f64).sqrt();
    for x in v.iter_mut() {
        *x /= norm;
    }

    let m = d.min(72);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut alphas = Vec::with_capacity(m);
    let mut betas = Vec::with_capacity(m);
    let mut w = vec![0.0f64; d];
    let mut prev_beta = 0.0f64;
    let mut prev: Vec<f64> = vec![0.0; d];
    for _ in 0..m {
        matvec(&v, &mut w);
        let alpha: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
        for ((wv, &vv), &pv) in w.iter_mut().zip(&v).zip(&prev) {
            *wv -= alpha * vv + prev_beta * pv;
        }
        // Full reorthogonalization keeps the extreme Ritz values honest.
        for b in &basis {
            let dot: f64 = w.iter().zip(b).map(|(a, c)| a * c).sum();
            for (wv, &bv) in w.iter_mut().zip(b) {
                *wv -= dot * bv;
            }
        }
        alphas.push(alpha);
        basis.push(v.clone());
        let beta = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if beta < 1e-12 {
            break;
        }
        betas.push(beta);
        prev = std::mem::replace(&mut v, w.iter().map(|x| x / beta).collect());
        prev_beta = beta;
        w.iter_mut().for_each(|x| *x = 0.0);
    }

    let k = alphas.len();
    let mut tri: nalgebra::DMatrix<f64> = nalgebra::DMatrix::zeros(k, k);
    for i in 0..k {
        tri[(i, i)] = alphas[i];
        if i + 1 < k {
            tri[(i, i + 1)] = betas[i];
            tri[(i + 1, i)] = betas[i];
        }
    }
    let eig = nalgebra::SymmetricEigen::new(tri);
    hi - eig.eigenvalues.max()
}

/// Repair Q to be PSD. If the smallest eigenvalue is above −1e-10 the matrix
/// passes as is; otherwise the whole diagonal is shifted just past it.
pub fn psd_repair(q: &SymCscMatrix) -> (SymCscMatrix, PsdStatus) {
    let min_eig = min_eigenvalue(q);
    if min_eig >= -PSD_TOL {
        (q.clone(), PsdStatus::VerifiedPsd)
    } else {
        let shift = min_eig.abs() + PSD_MARGIN;
        (q.add_diagonal(shift), PsdStatus::Repaired { shift })
    }
}

/// The exact negative log posterior at an assignment, computed term by term
/// without any quadratic assembly. Statistics are evaluated through their
/// forms and |ΔU| is exact, so at points whose slacks are tight this equals
/// the assembled objective.
pub fn evaluate_nlp(
    method: &MethodConfig,
    y: &[f64],
    hmms: &[ApplianceHmm],
    population: Option<&PopulationModel>,
    noise: &NoiseState,
    a: &RelaxedAssignment,
) -> Result<f64, MeldingError> {
    method.validate()?;
    noise.validate()?;
    a.validate(hmms)?;
    let t = a.t;
    if y.len() != t {
        return Err(MeldingError::Shape("trace length".into()));
    }
    let mut total = 0.0;

    for (tt, &yt) in y.iter().enumerate() {
        let mut pred = a.u[tt];
        for (i, hmm) in hmms.iter().enumerate() {
            for k in 0..hmm.k() {
                pred += a.s[i][tt * hmm.k() + k] * hmm.mu()[k];
            }
        }
        total += (yt - pred) * (yt - pred) / (2.0 * noise.sigma2);
    }
    total += t as f64 / 2.0 * ln_2pi_var(noise.sigma2);

    total -= crate::hmm::log_prior_states(a, hmms)?;

    let v2 = method.u_prior_v2;
    for tt in 0..t - 1 {
        total += (a.u[tt + 1] - a.u[tt]).abs() / (2.0 * v2);
    }
    total += (t as f64 - 1.0) * (4.0 * v2).ln();

    let (ga, gb) = (method.gamma_a, method.gamma_b);
    total += gb / noise.sigma2 + (ga - 1.0) * noise.sigma2.ln();

    match &method.variant {
        MethodVariant::Afhmm => {}
        MethodVariant::Pr { lambda } => {
            let pop = population.ok_or(MeldingError::MissingPopulation)?;
            for (i, hmm) in hmms.iter().enumerate() {
                for (m, kind) in method.stats.iter().enumerate() {
                    let form = statistic_form(kind, hmm, t)?;
                    let f = eval_statistic(&form, &a.s[i], &a.h[i])?;
                    let lam = resolve_lambda(lambda, pop, i, m, kind);
                    let target = pop.appliances[i].population_mean(kind);
                    total += lam * (f - target) * (f - target);
                }
            }
        }
        MethodVariant::Lbm { alpha } => {
            let pop = population.ok_or(MeldingError::MissingPopulation)?;
            let w = 1.0 - alpha;
            for (i, hmm) in hmms.iter().enumerate() {
                let app = &pop.appliances[i];
                for (m, kind) in method.stats.iter().enumerate() {
                    let form = statistic_form(kind, hmm, t)?;
                    let f = eval_statistic(&form, &a.s[i], &a.h[i])?;
                    let s2 = noise.sigma2_stat[i][m];
                    let s2_hat = app.induced.sigma2_hat[kind.index()];
                    let mu_hat = app.induced.mu_hat[kind.index()];
                    let g: f64 = a.xi[i]
                        .iter()
                        .zip(&app.stats.get(kind).mu_bar)
                        .map(|(&xi, &mb)| xi * mb)
                        .sum();
                    total += w
                        * ((f - g) * (f - g) / (2.0 * s2) + 0.5 * ln_2pi_var(s2)
                            - (f - mu_hat) * (f - mu_hat) / (2.0 * s2_hat)
                            - 0.5 * ln_2pi_var(s2_hat));
                    total += gb / s2 + (ga - 1.0) * s2.ln();
                }
                for (&xi, &p) in a.xi[i].iter().zip(&app.cycle_prior) {
                    total -= w * xi * p.max(PROB_FLOOR).ln();
                }
            }
        }
    }
    Ok(total)
}

/// Logarithmic opinion pool over a finite grid: the pooled log density is
/// Σ_j w_j · log p_j, renormalized to sum to one.
pub fn log_pool(log_densities: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    assert_eq!(log_densities.len(), weights.len());
    assert!(!log_densities.is_empty());
    let grid = log_densities[0].len();
    assert!(log_densities.iter().all(|d| d.len() == grid));
    let mut pooled = vec![0.0; grid];
    for (dens, &w) in log_densities.iter().zip(weights) {
        for (out, &lp) in pooled.iter_mut().zip(dens) {
            *out += w * lp;
        }
    }
    let max = pooled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max
        + pooled
            .iter()
            .map(|&v| (v - max).exp())
            .sum::<f64>()
            .ln();
    for v in pooled.iter_mut() {
        *v -= log_z;
    }
    pooled
}

/// Fully discrete toy model for normalization checks of the melded prior.
/// `f` holds distinct statistic values per latent state; `p_tau_given_xi`
/// rows are conditional pmfs over those values.
#[derive(Debug, Clone)]
pub struct DiscreteMeldingToy {
    pub p_s: Vec<f64>,
    pub f: Vec<f64>,
    pub p_xi: Vec<f64>,
    /// `[s][xi]` = p_τ(f(s) | ξ).
    pub p_tau_given_xi: Vec<Vec<f64>>,
    /// `[s]` = p*_τ(f(s)).
    pub p_star: Vec<f64>,
}

impl DiscreteMeldingToy {
    fn check(&self) {
        assert_eq!(self.p_s.len(), self.f.len());
        assert_eq!(self.p_s.len(), self.p_tau_given_xi.len());
        assert_eq!(self.p_s.len(), self.p_star.len());
        assert!(self.p_star.iter().all(|&p| p > 0.0));
        assert!(self
            .p_tau_given_xi
            .iter()
            .all(|row| row.len() == self.p_xi.len()));
    }
}

/// Normalizer Z(α) of the melded joint prior over (s, ξ) and its constant
/// c_α = 1/Z. ξ carries the uniform reference measure 1/|Ξ| so that α = 1
/// gives Z = 1 exactly.
pub fn melding_normalization_check(toy: &DiscreteMeldingToy, alpha: f64) -> (f64, f64) {
    toy.check();
    let n_xi = toy.p_xi.len() as f64;
    let w = 1.0 - alpha;
    let mut z = 0.0;
    for (s, &ps) in toy.p_s.iter().enumerate() {
        for (xi, &pxi) in toy.p_xi.iter().enumerate() {
            let base = n_xi * pxi * toy.p_tau_given_xi[s][xi] / toy.p_star[s];
            z += ps / n_xi * base.powf(w);
        }
    }
    (z, 1.0 / z)
}

/// Independent right-hand side of the Jensen bound:
/// Z ≤ [E_{p_S}(p̄_τ(f(S)) / p*(f(S)))]^{1−α} with p̄_τ the ξ-marginal.
pub fn melding_jensen_bound(toy: &DiscreteMeldingToy, alpha: f64) -> f64 {
    toy.check();
    let mut expectation = 0.0;
    for (s, &ps) in toy.p_s.iter().enumerate() {
        let marginal: f64 = toy
            .p_xi
            .iter()
            .zip(&toy.p_tau_given_xi[s])
            .map(|(&pxi, &d)| pxi * d)
            .sum();
        expectation += ps * marginal / toy.p_star[s];
    }
    expectation.powf(1.0 - alpha)
}

fn simpson<F: Fn(f64) -> f64>(f: &F, lo: f64, hi: f64, intervals: usize) -> f64 {
    assert!(intervals >= 2 && intervals % 2 == 0);
    let h = (hi - lo) / intervals as f64;
    let mut acc = f(lo) + f(hi);
    for i in 1..intervals {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(lo + i as f64 * h);
    }
    acc * h / 3.0
}

/// Uniform-smoothing estimates of the melding ratio at `f_value`:
/// the exact-statistic limit replaces the statistic's point evaluation with
/// a Uniform(±δ) window, and the induced prior in the ratio's denominator is
/// smoothed by the same window. Returns one estimate per δ; as δ → 0 they
/// approach p_τ(f)/p*(f).
pub fn melding_limit_check<F, G>(f_value: f64, p_tau: F, p_star: G, deltas: &[f64]) -> Vec<f64>
where
    F: Fn(f64) -> f64,
    G: Fn(f64) -> f64,
{
    const INTERVALS: usize = 200;
    deltas
        .iter()
        .map(|&delta| {
            assert!(delta > 0.0);
            let smoothed_star =
                |tau: f64| simpson(&p_star, tau - delta, tau + delta, INTERVALS) / (2.0 * delta);
            let integrand = |tau: f64| p_tau(tau) / smoothed_star(tau);
            simpson(&integrand, f_value - delta, f_value + delta, INTERVALS) / (2.0 * delta)
        })
        .collect()
}

/// Random point satisfying every constraint of the layout: S and H mix
/// sampled discrete paths, ξ is a random simplex point, slacks are tight and
/// f columns defined.
pub fn random_feasible_point<R: Rng + ?Sized>(
    layout: &VariableLayout,
    hmms: &[ApplianceHmm],
    rng: &mut R,
) -> Vec<f64> {
    let t = layout.t();
    let ks: Vec<usize> = hmms.iter().map(|h| h.k()).collect();
    let sample_assignment = |rng: &mut R| {
        let paths: Vec<Vec<usize>> = hmms
            .iter()
            .map(|h| crate::hmm::sample_path(h, t, rng))
            .collect();
        RelaxedAssignment::from_paths(&paths, &ks, vec![0.0; t], None)
    };
    let a1 = sample_assignment(rng);
    let a2 = sample_assignment(rng);
    let a3 = sample_assignment(rng);
    let mut mixed = RelaxedAssignment::mix(&a1, &a2, rng.gen::<f64>());
    mixed = RelaxedAssignment::mix(&mixed, &a3, rng.gen::<f64>());
    for tt in 0..t {
        mixed.u[tt] = 50.0 * rng.gen::<f64>();
    }
    mixed.xi = (0..layout.appliances())
        .map(|i| {
            let mut weights: Vec<f64> = (0..layout.c(i))
                .map(|_| -(rng.gen::<f64>().max(1e-12)).ln())
                .collect();
            let sum: f64 = weights.iter().sum();
            for w in weights.iter_mut() {
                *w /= sum;
            }
            weights
        })
        .collect();
    layout
        .point_from_assignment(&mixed, hmms)
        .expect("mixed assignment is always well-formed")
}

/// Hand-buildable instance for the equivalence check between posterior
/// regularization and Bayesian melding without latent ξ: every appliance has
/// a single cycle bucket and the induced mean equals the regression mean.
pub struct EquivalenceInstance {
    pub hmms: Vec<ApplianceHmm>,
    pub y: Vec<f64>,
    pub population: PopulationModel,
    pub noise: NoiseState,
    pub stats: Vec<StatisticKind>,
    pub layout: VariableLayout,
}

/// Max deviation from a constant gap between the Pr objective with weights
/// `lambda` and the Lbm objective at `alpha`, over random feasible points.
/// With λ_m = (1−α)(1/2σ²_m − 1/2σ̂²_m) and common means this is zero up to
/// rounding.
pub fn pr_bm_equivalence_check(
    inst: &EquivalenceInstance,
    lambda: &[f64],
    alpha: f64,
    n_points: usize,
    seed: u64,
) -> Result<f64, MeldingError> {
    use rand_chacha::rand_core::SeedableRng;
    let mut pr = MethodConfig::pr(inst.stats.clone());
    pr.variant = MethodVariant::Pr {
        lambda: Some(lambda.to_vec()),
    };
    let lbm = MethodConfig::lbm(alpha, inst.stats.clone());
    let pr_obj = assemble_raw(
        &pr,
        &inst.y,
        &inst.hmms,
        Some(&inst.population),
        &inst.noise,
        &inst.layout,
    )?;
    let lbm_obj = assemble_raw(
        &lbm,
        &inst.y,
        &inst.hmms,
        Some(&inst.population),
        &inst.noise,
        &inst.layout,
    )?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut base_gap = None;
    let mut worst: f64 = 0.0;
    for _ in 0..n_points {
        let x = random_feasible_point(&inst.layout, &inst.hmms, &mut rng);
        let gap = pr_obj.eval(&x) - lbm_obj.eval(&x);
        match base_gap {
            None => base_gap = Some(gap),
            Some(g0) => worst = worst.max((gap - g0).abs()),
        }
    }
    Ok(worst)
}
