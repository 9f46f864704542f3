//! Summary statistics of appliance usage and their population models.
//!
//! Each statistic is an affine function of one appliance's relaxed state
//! variables: total energy reads S through the emission means, ON duration
//! reads S through the sample period, and cycle count reads the OFF→ON mass
//! in H. The population model captures how the statistics distribute across
//! many observed days, keyed by cycle count, plus the prior each statistic
//! inherits from the HMM itself (the induced prior).

use crate::hmm::ApplianceHmm;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum StatsError {
    #[error("statistic needs at least {need} samples, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("form/assignment dimension mismatch: {0}")]
    Shape(String),
    #[error("no training days supplied")]
    Empty,
    #[error("appliance count mismatch: {traces} trace sets vs {models} models")]
    ApplianceCount { traces: usize, models: usize },
}

/// The three supported statistics. Duration carries the sample period so the
/// statistic is in minutes regardless of trace resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StatisticKind {
    TotalEnergy,
    Duration { dt_minutes: f64 },
    CycleCount,
}

impl StatisticKind {
    /// Stable position in per-statistic arrays (induced prior layout).
    pub fn index(&self) -> usize {
        match self {
            StatisticKind::TotalEnergy => 0,
            StatisticKind::Duration { .. } => 1,
            StatisticKind::CycleCount => 2,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            StatisticKind::TotalEnergy => "total_energy",
            StatisticKind::Duration { .. } => "duration",
            StatisticKind::CycleCount => "cycle_count",
        }
    }
}

/// Affine form of one statistic in one appliance's (S, H) block. Exactly one
/// of `s` and `h` is nonzero.
#[derive(Debug, Clone)]
pub struct StatisticLinearForm {
    pub t: usize,
    pub k: usize,
    /// T×K coefficients on S, row-major by time.
    pub s: Vec<f64>,
    /// (T−1)×K×K coefficients on H, indexed like `RelaxedAssignment::h`.
    pub h: Vec<f64>,
    pub offset: f64,
}

/// Build the affine form of `kind` for one appliance over T samples.
pub fn statistic_form(
    kind: &StatisticKind,
    hmm: &ApplianceHmm,
    t: usize,
) -> Result<StatisticLinearForm, StatsError> {
    if t < 2 {
        return Err(StatsError::TooShort { need: 2, got: t });
    }
    let k = hmm.k();
    let mut s = vec![0.0; t * k];
    let mut h = vec![0.0; (t - 1) * k * k];
    match kind {
        StatisticKind::TotalEnergy => {
            for tt in 0..t {
                for state in 0..k {
                    s[tt * k + state] = hmm.mu()[state];
                }
            }
        }
        StatisticKind::Duration { dt_minutes } => {
            for tt in 0..t {
                for state in 1..k {
                    s[tt * k + state] = *dt_minutes;
                }
            }
        }
        StatisticKind::CycleCount => {
            // OFF→ON mass: transitions from state 0 into any ON state.
            for tt in 0..t - 1 {
                for to in 1..k {
                    h[(tt * k + to) * k] = 1.0;
                }
            }
        }
    }
    Ok(StatisticLinearForm {
        t,
        k,
        s,
        h,
        offset: 0.0,
    })
}

/// Evaluate a form on one appliance's relaxed block.
pub fn eval_statistic(
    form: &StatisticLinearForm,
    s: &[f64],
    h: &[f64],
) -> Result<f64, StatsError> {
    if s.len() != form.s.len() || h.len() != form.h.len() {
        return Err(StatsError::Shape(format!(
            "form expects S of {} and H of {}, got {} and {}",
            form.s.len(),
            form.h.len(),
            s.len(),
            h.len()
        )));
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    Ok(form.offset + dot(&form.s, s) + dot(&form.h, h))
}

/// Statistic of a discrete path, walked directly (independent of the affine
/// form). Cycle count is the number of OFF→ON transitions.
pub fn path_statistic(kind: &StatisticKind, mu: &[f64], path: &[usize]) -> f64 {
    match kind {
        StatisticKind::TotalEnergy => path.iter().map(|&z| mu[z]).sum(),
        StatisticKind::Duration { dt_minutes } => {
            dt_minutes * path.iter().filter(|&&z| z >= 1).count() as f64
        }
        StatisticKind::CycleCount => path
            .windows(2)
            .filter(|w| w[0] == 0 && w[1] >= 1)
            .count() as f64,
    }
}

/// Days with this many cycles or more are clamped into the last bucket.
pub const CYCLE_SUPPORT_CAP: usize = 20;

const VARIANCE_FLOOR: f64 = 1e-6;

/// Per-statistic regression model: group means by cycle count plus a shared
/// residual variance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StatRegression {
    pub mu_bar: Vec<f64>,
    pub sigma2: f64,
}

/// Collection indexed by statistic in the order total_energy, duration,
/// cycle_count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerStat<T> {
    pub total_energy: T,
    pub duration: T,
    pub cycle_count: T,
}

impl<T> PerStat<T> {
    pub fn get(&self, kind: &StatisticKind) -> &T {
        match kind {
            StatisticKind::TotalEnergy => &self.total_energy,
            StatisticKind::Duration { .. } => &self.duration,
            StatisticKind::CycleCount => &self.cycle_count,
        }
    }
}

/// Monte-Carlo moments of each statistic under the HMM prior, in
/// `StatisticKind::index` order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InducedPrior {
    pub mu_hat: Vec<f64>,
    pub sigma2_hat: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AppliancePopulation {
    pub appliance_name: String,
    #[serde(rename = "C")]
    pub c: usize,
    pub cycle_prior: Vec<f64>,
    pub stats: PerStat<StatRegression>,
    pub induced: InducedPrior,
}

impl AppliancePopulation {
    /// Mixture mean of a statistic under the cycle-count prior.
    pub fn population_mean(&self, kind: &StatisticKind) -> f64 {
        let reg = self.stats.get(kind);
        self.cycle_prior
            .iter()
            .zip(&reg.mu_bar)
            .map(|(&p, &m)| p * m)
            .sum()
    }

    /// Mixture variance (between-group plus residual), floored away from 0.
    pub fn population_variance(&self, kind: &StatisticKind) -> f64 {
        let reg = self.stats.get(kind);
        let mean = self.population_mean(kind);
        let between: f64 = self
            .cycle_prior
            .iter()
            .zip(&reg.mu_bar)
            .map(|(&p, &m)| p * (m - mean) * (m - mean))
            .sum();
        (between + reg.sigma2).max(VARIANCE_FLOOR)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PopulationModel {
    pub dt_minutes: f64,
    pub appliances: Vec<AppliancePopulation>,
}

/// Day statistics used during population fitting. Cycle count here is the
/// number of maximal ON runs, so a day that starts ON still counts that run.
fn training_day_stats(trace: &[f64], hmm: &ApplianceHmm, dt_minutes: f64) -> (f64, f64, usize) {
    let states: Vec<usize> = trace.iter().map(|&v| hmm.nearest_state(v)).collect();
    let total_energy: f64 = trace.iter().sum();
    let duration = dt_minutes * states.iter().filter(|&&z| z >= 1).count() as f64;
    let mut cycles = 0usize;
    let mut prev_on = false;
    for &z in &states {
        let on = z >= 1;
        if on && !prev_on {
            cycles += 1;
        }
        prev_on = on;
    }
    (total_energy, duration, cycles)
}

/// Fit the population model from per-appliance day traces. The induced prior
/// is estimated by Monte Carlo over `induced_t`-sample paths.
pub fn fit_population<R: Rng + ?Sized>(
    hmms: &[ApplianceHmm],
    day_traces: &[Vec<Vec<f64>>],
    dt_minutes: f64,
    induced_t: usize,
    induced_n: usize,
    rng: &mut R,
) -> Result<(PopulationModel, Vec<String>), StatsError> {
    if day_traces.len() != hmms.len() {
        return Err(StatsError::ApplianceCount {
            traces: day_traces.len(),
            models: hmms.len(),
        });
    }
    let mut warnings = Vec::new();
    let mut appliances = Vec::with_capacity(hmms.len());
    for (hmm, days) in hmms.iter().zip(day_traces) {
        if days.is_empty() {
            return Err(StatsError::Empty);
        }
        let raw: Vec<(f64, f64, usize)> = days
            .iter()
            .map(|d| training_day_stats(d, hmm, dt_minutes))
            .collect();
        let max_cycles = raw.iter().map(|r| r.2).max().unwrap();
        let c = (max_cycles + 1).min(CYCLE_SUPPORT_CAP);
        if max_cycles + 1 > CYCLE_SUPPORT_CAP {
            warnings.push(format!(
                "{}: days with up to {max_cycles} cycles clamped to {}",
                hmm.name(),
                c - 1
            ));
        }
        let clamped: Vec<(f64, f64, usize)> = raw
            .iter()
            .map(|&(te, du, cy)| (te, du, cy.min(c - 1)))
            .collect();

        let d = clamped.len() as f64;
        let mut counts = vec![0usize; c];
        for &(_, _, cy) in &clamped {
            counts[cy] += 1;
        }
        let cycle_prior: Vec<f64> = counts
            .iter()
            .map(|&n| (n as f64 + 1.0) / (d + c as f64))
            .collect();

        // Group means by cycle count; empty groups fall back to the global
        // mean so every bucket has a usable regression target.
        let regression = |value: &dyn Fn(&(f64, f64, usize)) -> f64| -> StatRegression {
            let global = clamped.iter().map(|r| value(r)).sum::<f64>() / d;
            let mut mu_bar = vec![0.0; c];
            for (bucket, mb) in mu_bar.iter_mut().enumerate() {
                let members: Vec<f64> = clamped
                    .iter()
                    .filter(|r| r.2 == bucket)
                    .map(|r| value(r))
                    .collect();
                *mb = if members.is_empty() {
                    global
                } else {
                    members.iter().sum::<f64>() / members.len() as f64
                };
            }
            let sigma2 = (clamped
                .iter()
                .map(|r| {
                    let resid = value(r) - mu_bar[r.2];
                    resid * resid
                })
                .sum::<f64>()
                / d)
                .max(VARIANCE_FLOOR);
            StatRegression { mu_bar, sigma2 }
        };
        let stats = PerStat {
            total_energy: regression(&|r| r.0),
            duration: regression(&|r| r.1),
            cycle_count: StatRegression {
                mu_bar: (0..c).map(|cy| cy as f64).collect(),
                sigma2: (clamped
                    .iter()
                    .map(|r| {
                        let resid = r.2 as f64 - r.2 as f64;
                        resid * resid
                    })
                    .sum::<f64>()
                    / d)
                    .max(VARIANCE_FLOOR),
            },
        };

        let kinds = [
            StatisticKind::TotalEnergy,
            StatisticKind::Duration { dt_minutes },
            StatisticKind::CycleCount,
        ];
        let mut mu_hat = vec![0.0; 3];
        let mut sigma2_hat = vec![0.0; 3];
        for kind in &kinds {
            let (m, v) = estimate_induced_prior(hmm, kind, induced_t, induced_n, rng);
            mu_hat[kind.index()] = m;
            sigma2_hat[kind.index()] = v;
        }

        appliances.push(AppliancePopulation {
            appliance_name: hmm.name().into(),
            c,
            cycle_prior,
            stats,
            induced: InducedPrior {
                mu_hat,
                sigma2_hat,
            },
        });
    }
    Ok((
        PopulationModel {
            dt_minutes,
            appliances,
        },
        warnings,
    ))
}

/// Monte-Carlo mean and variance of a statistic under the HMM prior. The
/// variance is floored to stay usable as a Gaussian cap.
pub fn estimate_induced_prior<R: Rng + ?Sized>(
    hmm: &ApplianceHmm,
    kind: &StatisticKind,
    t: usize,
    n: usize,
    rng: &mut R,
) -> (f64, f64) {
    assert!(n >= 2);
    let samples: Vec<f64> = (0..n)
        .map(|_| path_statistic(kind, hmm.mu(), &crate::hmm::sample_path(hmm, t, rng)))
        .collect();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / (n as f64 - 1.0);
    let floor = VARIANCE_FLOOR.max(1e-6 * mean * mean);
    (mean, var.max(floor))
}

/// Gaussian-mixture density of one statistic under the population model;
/// diagnostic only.
pub fn mixture_density(pop: &AppliancePopulation, kind: &StatisticKind, tau: f64) -> f64 {
    let reg = pop.stats.get(kind);
    pop.cycle_prior
        .iter()
        .zip(&reg.mu_bar)
        .map(|(&p, &m)| p * gaussian_density(tau, m, reg.sigma2))
        .sum()
}

pub fn gaussian_density(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean) * (x - mean) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt()
}
