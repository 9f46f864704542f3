//! Shared fixtures: small random households with fitted populations.

use disagg_core::eval::{generate_synthetic, SynthSpec};
use disagg_core::hmm::{ApplianceHmm, NoiseState};
use disagg_core::layout::VariableLayout;
use disagg_core::stats::{fit_population, PopulationModel, StatisticKind};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn all_stats(dt_minutes: f64) -> Vec<StatisticKind> {
    vec![
        StatisticKind::TotalEnergy,
        StatisticKind::Duration { dt_minutes },
        StatisticKind::CycleCount,
    ]
}

/// Random valid appliance models: distinct increasing levels, strictly
/// positive stochastic columns.
pub fn house(seed: u64, appliances: usize, states: usize) -> Vec<ApplianceHmm> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..appliances)
        .map(|i| {
            let mut mu = vec![0.0];
            let mut level = 0.0;
            for _ in 1..states {
                level += 10.0 + 40.0 * rng.gen::<f64>();
                mu.push(level);
            }
            let mut pi: Vec<f64> = (0..states).map(|_| 0.1 + rng.gen::<f64>()).collect();
            let z: f64 = pi.iter().sum();
            for p in pi.iter_mut() {
                *p /= z;
            }
            let mut trans = vec![0.0; states * states];
            for k in 0..states {
                let mut col: Vec<f64> = (0..states).map(|_| 0.05 + rng.gen::<f64>()).collect();
                col[k] += 2.0; // favor staying put
                let z: f64 = col.iter().sum();
                for (j, v) in col.iter().enumerate() {
                    trans[k * states + j] = v / z;
                }
            }
            ApplianceHmm::new(&format!("app{i}"), pi, trans, mu).unwrap()
        })
        .collect()
}

/// Population fitted from synthetic days of the same models.
pub fn population_for(
    hmms: &[ApplianceHmm],
    t: usize,
    days: usize,
    dt_minutes: f64,
    seed: u64,
) -> PopulationModel {
    let data = generate_synthetic(&SynthSpec {
        appliances: hmms.to_vec(),
        days,
        t,
        noise_sigma: 0.0,
        seed,
        first_day_index: 0,
    })
    .unwrap();
    let mut by_appliance: Vec<Vec<Vec<f64>>> = vec![Vec::new(); hmms.len()];
    for day in &data.truth {
        for (i, signal) in day.iter().enumerate() {
            by_appliance[i].push(signal.clone());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let (population, _) =
        fit_population(hmms, &by_appliance, dt_minutes, t, 400, &mut rng).unwrap();
    population
}

/// Noise with statistic variances strictly under their induced caps.
pub fn noise_for(
    population: &PopulationModel,
    stats: &[StatisticKind],
    sigma2: f64,
) -> NoiseState {
    let caps: Vec<Vec<f64>> = population
        .appliances
        .iter()
        .map(|app| {
            stats
                .iter()
                .map(|kind| app.induced.sigma2_hat[kind.index()])
                .collect()
        })
        .collect();
    let sigma2_stat: Vec<Vec<f64>> = caps
        .iter()
        .map(|row| row.iter().map(|cap| 0.45 * cap).collect())
        .collect();
    NoiseState {
        sigma2,
        sigma2_stat,
        caps,
    }
}

/// Layout matching a (method stats, population) pair.
pub fn layout_for(
    hmms: &[ApplianceHmm],
    population: Option<&PopulationModel>,
    stats: &[StatisticKind],
    t: usize,
) -> VariableLayout {
    let ks: Vec<usize> = hmms.iter().map(|h| h.k()).collect();
    let cs: Vec<usize> = match population {
        Some(p) => p.appliances.iter().map(|a| a.c).collect(),
        None => vec![1; hmms.len()],
    };
    VariableLayout::new(&ks, &cs, t, stats.to_vec())
}

/// Mains with a smooth extra load so U has something real to explain.
pub fn mains_for(hmms: &[ApplianceHmm], t: usize, seed: u64) -> Vec<f64> {
    let data = generate_synthetic(&SynthSpec {
        appliances: hmms.to_vec(),
        days: 1,
        t,
        noise_sigma: 1.0,
        seed,
        first_day_index: 9_000,
    })
    .unwrap();
    data.mains[0]
        .iter()
        .enumerate()
        .map(|(tt, &v)| v + 5.0 + (tt as f64 / 7.0).sin().abs() * 3.0)
        .collect()
}
