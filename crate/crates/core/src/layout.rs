//! Flat variable layout for the relaxed program and its polyhedral
//! constraints.
//!
//! Column order: per-appliance S blocks, per-appliance H blocks, U, the
//! epigraph slacks for |ΔU|, per-appliance ξ blocks, then one auxiliary f
//! column per (appliance, active statistic). The f columns carry the
//! statistic values; tying them to (S, H) with one equality row each keeps
//! the quadratic penalty blocks sparse instead of forming T·K-wide outer
//! products.

use crate::hmm::{ApplianceHmm, RelaxedAssignment};
use crate::stats::{statistic_form, eval_statistic, StatisticKind, StatsError};
use disagg_qp::CscMatrix;

/// Index ranges of every variable block; immutable once built.
#[derive(Debug, Clone)]
pub struct VariableLayout {
    t: usize,
    k: Vec<usize>,
    c: Vec<usize>,
    stats: Vec<StatisticKind>,
    s_off: Vec<usize>,
    h_off: Vec<usize>,
    u_off: usize,
    slack_off: usize,
    xi_off: Vec<usize>,
    f_off: usize,
    n: usize,
}

impl VariableLayout {
    pub fn new(ks: &[usize], cs: &[usize], t: usize, stats: Vec<StatisticKind>) -> Self {
        assert!(t >= 2, "need at least two samples");
        assert_eq!(ks.len(), cs.len());
        assert!(ks.iter().all(|&k| k >= 2));
        assert!(cs.iter().all(|&c| c >= 1));
        let mut n = 0usize;
        let s_off: Vec<usize> = ks
            .iter()
            .map(|&k| {
                let off = n;
                n += t * k;
                off
            })
            .collect();
        let h_off: Vec<usize> = ks
            .iter()
            .map(|&k| {
                let off = n;
                n += (t - 1) * k * k;
                off
            })
            .collect();
        let u_off = n;
        n += t;
        let slack_off = n;
        n += t - 1;
        let xi_off: Vec<usize> = cs
            .iter()
            .map(|&c| {
                let off = n;
                n += c;
                off
            })
            .collect();
        let f_off = n;
        n += ks.len() * stats.len();
        VariableLayout {
            t,
            k: ks.to_vec(),
            c: cs.to_vec(),
            stats,
            s_off,
            h_off,
            u_off,
            slack_off,
            xi_off,
            f_off,
            n,
        }
    }

    pub fn appliances(&self) -> usize {
        self.k.len()
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn k(&self, i: usize) -> usize {
        self.k[i]
    }

    pub fn c(&self, i: usize) -> usize {
        self.c[i]
    }

    pub fn stats(&self) -> &[StatisticKind] {
        &self.stats
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn s_idx(&self, i: usize, t: usize, k: usize) -> usize {
        self.s_off[i] + t * self.k[i] + k
    }

    /// Transition block t→t+1 for t in 0..T−1; `to` indexes the state at
    /// t+1, `from` the state at t.
    pub fn h_idx(&self, i: usize, t: usize, to: usize, from: usize) -> usize {
        self.h_off[i] + (t * self.k[i] + to) * self.k[i] + from
    }

    pub fn u_idx(&self, t: usize) -> usize {
        self.u_off + t
    }

    /// Slack bounding |U_{t+1} − U_t| for t in 0..T−1.
    pub fn slack_idx(&self, t: usize) -> usize {
        self.slack_off + t
    }

    pub fn xi_idx(&self, i: usize, c: usize) -> usize {
        self.xi_off[i] + c
    }

    pub fn f_idx(&self, i: usize, m: usize) -> usize {
        self.f_off + i * self.stats.len() + m
    }

    /// View a flat point as the domain assignment (drops slack and f).
    pub fn point_to_assignment(&self, x: &[f64]) -> RelaxedAssignment {
        assert_eq!(x.len(), self.n);
        let s = (0..self.appliances())
            .map(|i| x[self.s_off[i]..self.s_off[i] + self.t * self.k[i]].to_vec())
            .collect();
        let h = (0..self.appliances())
            .map(|i| x[self.h_off[i]..self.h_off[i] + (self.t - 1) * self.k[i] * self.k[i]].to_vec())
            .collect();
        let u = x[self.u_off..self.u_off + self.t].to_vec();
        let xi = (0..self.appliances())
            .map(|i| x[self.xi_off[i]..self.xi_off[i] + self.c[i]].to_vec())
            .collect();
        RelaxedAssignment {
            t: self.t,
            s,
            h,
            u,
            xi,
        }
    }

    /// Flatten an assignment into a feasible point: slacks are set to |ΔU|
    /// and the f columns to their defining statistic values.
    pub fn point_from_assignment(
        &self,
        a: &RelaxedAssignment,
        hmms: &[ApplianceHmm],
    ) -> Result<Vec<f64>, StatsError> {
        let mut x = vec![0.0; self.n];
        for i in 0..self.appliances() {
            x[self.s_off[i]..self.s_off[i] + a.s[i].len()].copy_from_slice(&a.s[i]);
            x[self.h_off[i]..self.h_off[i] + a.h[i].len()].copy_from_slice(&a.h[i]);
            x[self.xi_off[i]..self.xi_off[i] + a.xi[i].len()].copy_from_slice(&a.xi[i]);
        }
        x[self.u_off..self.u_off + self.t].copy_from_slice(&a.u);
        for t in 0..self.t - 1 {
            x[self.slack_idx(t)] = (a.u[t + 1] - a.u[t]).abs();
        }
        for (i, hmm) in hmms.iter().enumerate() {
            for (m, kind) in self.stats.iter().enumerate() {
                let form = statistic_form(kind, hmm, self.t)?;
                x[self.f_idx(i, m)] = eval_statistic(&form, &a.s[i], &a.h[i])?;
            }
        }
        Ok(x)
    }
}

/// Row counts per constraint family, in row order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConstraintCounts {
    pub s_simplex: usize,
    pub xi_simplex: usize,
    pub h_link: usize,
    pub f_def: usize,
    pub slack: usize,
}

/// Equalities, inequalities (a·x ≤ b) and variable boxes for the relaxation.
#[derive(Debug, Clone)]
pub struct ConstraintSpec {
    pub a_eq: CscMatrix,
    pub b_eq: Vec<f64>,
    pub a_in: CscMatrix,
    pub b_in: Vec<f64>,
    pub lb: Vec<f64>,
    pub ub: Vec<f64>,
    pub counts: ConstraintCounts,
}

/// Build the constraint system over a layout:
/// - each S row and each ξ block sums to 1,
/// - each H slice has row sums S_{t+1} and column sums S_t,
/// - each f column equals its statistic form,
/// - each slack bounds |U_{t+1} − U_t| via two inequalities.
///
/// The variance caps of the noise model are enforced by the variance update,
/// not by rows here.
pub fn build_constraints(
    layout: &VariableLayout,
    hmms: &[ApplianceHmm],
) -> Result<ConstraintSpec, StatsError> {
    assert_eq!(hmms.len(), layout.appliances());
    let t = layout.t();
    let n = layout.n();
    let mut eq: Vec<(usize, usize, f64)> = Vec::new();
    let mut b_eq: Vec<f64> = Vec::new();

    let mut counts = ConstraintCounts {
        s_simplex: 0,
        xi_simplex: 0,
        h_link: 0,
        f_def: 0,
        slack: 0,
    };

    for i in 0..layout.appliances() {
        for tt in 0..t {
            let row = b_eq.len();
            for k in 0..layout.k(i) {
                eq.push((row, layout.s_idx(i, tt, k), 1.0));
            }
            b_eq.push(1.0);
            counts.s_simplex += 1;
        }
    }
    for i in 0..layout.appliances() {
        let row = b_eq.len();
        for c in 0..layout.c(i) {
            eq.push((row, layout.xi_idx(i, c), 1.0));
        }
        b_eq.push(1.0);
        counts.xi_simplex += 1;
    }
    for i in 0..layout.appliances() {
        let k = layout.k(i);
        for tt in 0..t - 1 {
            // Row sums tie the slice to the destination marginal S_{t+1}.
            for to in 0..k {
                let row = b_eq.len();
                for from in 0..k {
                    eq.push((row, layout.h_idx(i, tt, to, from), 1.0));
                }
                eq.push((row, layout.s_idx(i, tt + 1, to), -1.0));
                b_eq.push(0.0);
                counts.h_link += 1;
            }
            // Column sums tie it to the source marginal S_t.
            for from in 0..k {
                let row = b_eq.len();
                for to in 0..k {
                    eq.push((row, layout.h_idx(i, tt, to, from), 1.0));
                }
                eq.push((row, layout.s_idx(i, tt, from), -1.0));
                b_eq.push(0.0);
                counts.h_link += 1;
            }
        }
    }
    for (i, hmm) in hmms.iter().enumerate() {
        for (m, kind) in layout.stats().iter().enumerate() {
            let form = statistic_form(kind, hmm, t)?;
            let row = b_eq.len();
            eq.push((row, layout.f_idx(i, m), 1.0));
            for tt in 0..t {
                for k in 0..layout.k(i) {
                    let coeff = form.s[tt * layout.k(i) + k];
                    if coeff != 0.0 {
                        eq.push((row, layout.s_idx(i, tt, k), -coeff));
                    }
                }
            }
            for tt in 0..t - 1 {
                for to in 0..layout.k(i) {
                    for from in 0..layout.k(i) {
                        let coeff = form.h[(tt * layout.k(i) + to) * layout.k(i) + from];
                        if coeff != 0.0 {
                            eq.push((row, layout.h_idx(i, tt, to, from), -coeff));
                        }
                    }
                }
            }
            b_eq.push(form.offset);
            counts.f_def += 1;
        }
    }

    let mut ineq: Vec<(usize, usize, f64)> = Vec::new();
    let mut b_in: Vec<f64> = Vec::new();
    for tt in 0..t - 1 {
        let row = b_in.len();
        ineq.push((row, layout.u_idx(tt + 1), 1.0));
        ineq.push((row, layout.u_idx(tt), -1.0));
        ineq.push((row, layout.slack_idx(tt), -1.0));
        b_in.push(0.0);
        let row = b_in.len();
        ineq.push((row, layout.u_idx(tt), 1.0));
        ineq.push((row, layout.u_idx(tt + 1), -1.0));
        ineq.push((row, layout.slack_idx(tt), -1.0));
        b_in.push(0.0);
        counts.slack += 2;
    }

    let mut lb = vec![0.0; n];
    let mut ub = vec![1.0; n];
    for tt in 0..t {
        ub[layout.u_idx(tt)] = f64::INFINITY;
    }
    for tt in 0..t - 1 {
        ub[layout.slack_idx(tt)] = f64::INFINITY;
    }
    for i in 0..layout.appliances() {
        for m in 0..layout.stats().len() {
            lb[layout.f_idx(i, m)] = f64::NEG_INFINITY;
            ub[layout.f_idx(i, m)] = f64::INFINITY;
        }
    }

    Ok(ConstraintSpec {
        a_eq: CscMatrix::from_triplets(b_eq.len(), n, &eq),
        b_eq,
        a_in: CscMatrix::from_triplets(b_in.len(), n, &ineq),
        b_in,
        lb,
        ub,
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hmm::RelaxedAssignment;

    fn hmm2() -> ApplianceHmm {
        ApplianceHmm::new(
            "a",
            vec![0.5, 0.5],
            vec![0.7, 0.3, 0.4, 0.6],
            vec![0.0, 10.0],
        )
        .unwrap()
    }

    #[test]
    fn minimal_instance_row_counts() {
        // One 2-state appliance over 2 samples, no statistics: 2 S-simplex
        // rows, 1 ξ-simplex row, 4 linking rows (2 row-sum + 2 column-sum),
        // and 2 slack inequality rows.
        let layout = VariableLayout::new(&[2], &[1], 2, vec![]);
        let spec = build_constraints(&layout, &[hmm2()]).unwrap();
        assert_eq!(spec.counts.s_simplex, 2);
        assert_eq!(spec.counts.xi_simplex, 1);
        assert_eq!(spec.counts.h_link, 4);
        assert_eq!(spec.counts.f_def, 0);
        assert_eq!(spec.counts.slack, 2);
        assert_eq!(spec.b_eq.len(), 7);
        assert_eq!(spec.b_in.len(), 2);
    }

    #[test]
    fn discrete_points_satisfy_all_rows() {
        let kinds = vec![
            StatisticKind::TotalEnergy,
            StatisticKind::Duration { dt_minutes: 2.0 },
            StatisticKind::CycleCount,
        ];
        let layout = VariableLayout::new(&[2], &[3], 5, kinds);
        let hmms = [hmm2()];
        let spec = build_constraints(&layout, &hmms).unwrap();
        let a = RelaxedAssignment::from_paths(
            &[vec![0, 1, 1, 0, 1]],
            &[2],
            vec![3.0, 1.0, 0.0, 2.0, 2.0],
            Some(vec![vec![0.0, 0.0, 1.0]]),
        );
        let x = layout.point_from_assignment(&a, &hmms).unwrap();

        let mut eq = vec![0.0; spec.b_eq.len()];
        spec.a_eq.matvec_acc(&x, &mut eq);
        for (row, (&got, &want)) in eq.iter().zip(&spec.b_eq).enumerate() {
            assert!((got - want).abs() < 1e-12, "eq row {row}: {got} vs {want}");
        }
        let mut ineq = vec![0.0; spec.b_in.len()];
        spec.a_in.matvec_acc(&x, &mut ineq);
        for (row, (&got, &want)) in ineq.iter().zip(&spec.b_in).enumerate() {
            assert!(got <= want + 1e-12, "ineq row {row}");
        }
        for j in 0..layout.n() {
            assert!(x[j] >= spec.lb[j] - 1e-12 && x[j] <= spec.ub[j] + 1e-12);
        }
    }

    #[test]
    fn round_trip_through_assignment() {
        let layout = VariableLayout::new(&[2, 2], &[2, 1], 4, vec![StatisticKind::TotalEnergy]);
        let hmms = [hmm2(), hmm2()];
        let a = RelaxedAssignment::from_paths(
            &[vec![0, 1, 0, 0], vec![1, 1, 1, 0]],
            &[2, 2],
            vec![1.0, 4.0, 2.0, 2.0],
            Some(vec![vec![0.3, 0.7], vec![1.0]]),
        );
        let x = layout.point_from_assignment(&a, &hmms).unwrap();
        let back = layout.point_to_assignment(&x);
        assert_eq!(back.s, a.s);
        assert_eq!(back.h, a.h);
        assert_eq!(back.u, a.u);
        assert_eq!(back.xi, a.xi);
        // f column carries the statistic of appliance 1's path: three ON
        // samples at 10 each.
        assert_eq!(x[layout.f_idx(1, 0)], 30.0);
    }
}
