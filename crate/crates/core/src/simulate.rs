//! Synthetic data from the generative model.
//!
//! Each dataset uses one ChaCha8 stream seeded with `seed_from_u64(seed)`.
//! Individuals are simulated in order; for each one the draws are:
//! recruitment period, then one survival draw per period until it leaves,
//! then for each attended period the arrival occasion and initial state,
//! followed per present occasion by the capture draw, the retention draw
//! and (if retained) the state transition. Every draw is one `f64` uniform
//! mapped through the inverse CDF.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    arrival_from_logistic, retention_from_logistic, Dataset, ParameterSet, StudyDesign,
};

/// Latent path of one individual within one attended period (0-based indices).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodRecord {
    pub period: usize,
    pub arrival: usize,
    /// Last occasion present.
    pub departure: usize,
    /// 1-based state on each occasion from arrival to departure.
    pub states: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualRecord {
    /// 0-based recruitment period.
    pub recruitment: usize,
    pub periods: Vec<PeriodRecord>,
    pub history: Vec<u8>,
}

impl IndividualRecord {
    pub fn captured(&self) -> bool {
        self.history.iter().any(|&y| y != 0)
    }
}

/// Ground truth behind a simulated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    pub design: StudyDesign,
    pub params: ParameterSet,
    pub seed: u64,
    pub individuals: Vec<IndividualRecord>,
    /// Individuals present on at least one occasion of each period.
    pub abundance: Vec<u64>,
}

fn categorical<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the total; take the last category with mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

fn bernoulli<R: Rng>(rng: &mut R, p: f64) -> bool {
    rng.random::<f64>() < p
}

fn simulate_individual<R: Rng>(
    rng: &mut R,
    params: &ParameterSet,
    design: &StudyDesign,
) -> IndividualRecord {
    let t_count = design.periods();
    let b = categorical(rng, &params.recruitment);
    let mut last = b;
    while last + 1 < t_count {
        let age = last - b + 1;
        let s = if age >= design.max_age {
            0.0
        } else {
            params.survival[last][age - 1]
        };
        if !bernoulli(rng, s) {
            break;
        }
        last += 1;
    }

    let mut history = vec![0u8; design.total_occasions()];
    let mut periods = Vec::with_capacity(last - b + 1);
    for t in b..=last {
        let off = design.offset(t);
        let k_count = design.occasions[t];
        let a_prime = design.max_occasion_age[t];
        let arrival = categorical(rng, &params.arrival[t]);
        let mut g = categorical(rng, &params.initial_state[t]);
        let mut states = Vec::new();
        let mut k = arrival;
        let mut age = 1;
        loop {
            states.push(g as u8 + 1);
            if bernoulli(rng, params.capture[t][k][g][age - 1]) {
                history[off + k] = g as u8 + 1;
            }
            if k + 1 == k_count {
                break;
            }
            let stay = if age >= a_prime {
                0.0
            } else {
                params.retention[t][k][age - 1]
            };
            if !bernoulli(rng, stay) {
                break;
            }
            g = categorical(rng, &params.transition[t][g]);
            k += 1;
            age += 1;
        }
        periods.push(PeriodRecord {
            period: t,
            arrival,
            departure: k,
            states,
        });
    }
    IndividualRecord {
        recruitment: b,
        periods,
        history,
    }
}

/// Simulates `N` individuals and returns the captured ones as a dataset
/// together with the full latent truth.
pub fn simulate(
    params: &ParameterSet,
    design: &StudyDesign,
    seed: u64,
) -> Result<(Dataset, SimTruth)> {
    params.validate(design)?;
    let n = params.super_population;
    if n.fract() != 0.0 || n < 0.0 || !n.is_finite() {
        return Err(Error::Input(format!(
            "N = {n} must be a non-negative integer to simulate"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let individuals: Vec<IndividualRecord> = (0..n as u64)
        .map(|_| simulate_individual(&mut rng, params, design))
        .collect();
    let mut abundance = vec![0u64; design.periods()];
    for ind in &individuals {
        for p in &ind.periods {
            abundance[p.period] += 1;
        }
    }
    let dataset = Dataset::from_individuals(
        design.clone(),
        individuals
            .iter()
            .filter(|i| i.captured())
            .map(|i| i.history.clone()),
    )?;
    Ok((
        dataset,
        SimTruth {
            design: design.clone(),
            params: params.clone(),
            seed,
            individuals,
            abundance,
        },
    ))
}

/// Expected number of individuals available in each period:
/// `N(t) = N sum_{b<=t} r(b) prod_{u=b}^{t-1} s_{u-b+1}(u)`.
pub fn expected_abundance(params: &ParameterSet, design: &StudyDesign) -> Vec<f64> {
    let t_count = design.periods();
    (0..t_count)
        .map(|t| {
            let mut total = 0.0;
            for b in 0..=t {
                let mut w = params.recruitment[b];
                for u in b..t {
                    let age = u - b + 1;
                    w *= if age >= design.max_age {
                        0.0
                    } else {
                        params.survival[u][age - 1]
                    };
                }
                total += w;
            }
            params.super_population * total
        })
        .collect()
}

/// Arrival gradients eta(t) of the simulation scenario.
pub const SCENARIO_ETA: [f64; 3] = [-1.0, 0.0, -2.0];
/// Shared arrival intercept delta.
pub const SCENARIO_DELTA: f64 = 1.0;
/// Retention occasion effects tau(k).
pub const SCENARIO_TAU: [f64; 4] = [2.5, 1.8, 2.1, 1.4];
/// Retention age gradient gamma.
pub const SCENARIO_GAMMA: f64 = -1.0;

/// The three-period, five-occasion, two-state simulation scenario with
/// super-population `n` (100 and 1000 are the standard sizes).
pub fn paper_scenario(n: u64) -> (ParameterSet, StudyDesign) {
    if n != 100 && n != 1000 {
        log::warn!("scenario with N = {n}; the standard sizes are 100 and 1000");
    }
    let design = StudyDesign::new(vec![5, 5, 5], 2).expect("valid scenario design");
    let mut p = ParameterSet::uniform(&design, n as f64);
    p.recruitment = vec![0.4, 0.2, 0.4];
    p.survival = vec![vec![0.7], vec![0.7, 0.7]];
    let phi = retention_from_logistic(&SCENARIO_TAU, SCENARIO_GAMMA);
    for t in 0..3 {
        p.initial_state[t] = vec![0.35, 0.65];
        p.transition[t] = vec![vec![0.4, 0.6], vec![0.3, 0.7]];
        p.arrival[t] = arrival_from_logistic(SCENARIO_ETA[t], SCENARIO_DELTA, 5);
        p.retention[t] = phi.clone();
        for k in 0..5 {
            p.capture[t][k] = vec![vec![0.6; k + 1], vec![0.8; k + 1]];
        }
    }
    (p, design)
}
