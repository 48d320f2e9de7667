//! Exhaustive-enumeration likelihood, used to check the HMM engine.
//!
//! Nothing here uses the matrix builders: every latent path (recruitment
//! period, last available period, and per attended period the arrival
//! occasion, departure occasion and state sequence) is enumerated directly
//! from the natural parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::hmm;
use crate::model::{Dataset, ParameterSet, StudyDesign};

/// Largest number of joint hidden paths the oracle will enumerate.
pub const PATH_LIMIT: u128 = 10_000_000;

fn survival(params: &ParameterSet, design: &StudyDesign, t: usize, age: usize) -> f64 {
    if age >= design.max_age {
        0.0
    } else {
        params.survival[t][age - 1]
    }
}

fn retention(params: &ParameterSet, design: &StudyDesign, t: usize, k: usize, age: usize) -> f64 {
    if age >= design.max_occasion_age[t] {
        0.0
    } else {
        params.retention[t][k][age - 1]
    }
}

/// Number of (arrival, departure, state sequence) paths within period `t`.
fn secondary_paths(design: &StudyDesign, t: usize) -> u128 {
    let k_count = design.occasions[t];
    let a_prime = design.max_occasion_age[t];
    let g = design.states as u128;
    let mut total = 0u128;
    for k0 in 0..k_count {
        for k1 in k0..k_count.min(k0 + a_prime) {
            total = total.saturating_add(g.saturating_pow((k1 - k0 + 1) as u32));
        }
    }
    total
}

/// Number of joint hidden paths for a design.
pub fn path_space(design: &StudyDesign) -> u128 {
    let per: Vec<u128> = (0..design.periods()).map(|t| secondary_paths(design, t)).collect();
    let mut total = 0u128;
    for b in 0..design.periods() {
        let mut prod = 1u128;
        for e in b..design.periods().min(b + design.max_age) {
            prod = prod.saturating_mul(per[e]);
            total = total.saturating_add(prod);
        }
    }
    total
}

/// Probability of a period's slice given attendance, by enumeration.
fn period_probability(slice: &[u8], params: &ParameterSet, design: &StudyDesign, t: usize) -> f64 {
    let k_count = design.occasions[t];
    let a_prime = design.max_occasion_age[t];
    let g = design.states;
    let mut total = 0.0;
    for k0 in 0..k_count {
        if slice[..k0].iter().any(|&y| y != 0) {
            break;
        }
        let arrive = params.arrival[t][k0];
        for k1 in k0..k_count.min(k0 + a_prime) {
            if slice[k1 + 1..].iter().any(|&y| y != 0) {
                continue;
            }
            let mut stay = arrive;
            for k in k0..k1 {
                stay *= retention(params, design, t, k, k - k0 + 1);
            }
            if k1 + 1 < k_count {
                stay *= 1.0 - retention(params, design, t, k1, k1 - k0 + 1);
            }
            if stay == 0.0 {
                continue;
            }
            let len = k1 - k0 + 1;
            let mut states = vec![0usize; len];
            loop {
                let mut w = stay * params.initial_state[t][states[0]];
                for i in 1..len {
                    w *= params.transition[t][states[i - 1]][states[i]];
                }
                for (i, &s) in states.iter().enumerate() {
                    let k = k0 + i;
                    let p = params.capture[t][k][s][i];
                    let y = slice[k] as usize;
                    w *= if y == 0 {
                        1.0 - p
                    } else if y == s + 1 {
                        p
                    } else {
                        0.0
                    };
                }
                total += w;
                // next state sequence, odometer style
                let mut i = 0;
                while i < len {
                    states[i] += 1;
                    if states[i] < g {
                        break;
                    }
                    states[i] = 0;
                    i += 1;
                }
                if i == len {
                    break;
                }
            }
        }
    }
    total
}

/// Probability of a full capture history (the all-zero history gives L_0)
/// by summing over every hidden path.
pub fn brute_force_likelihood(
    history: &[u8],
    params: &ParameterSet,
    design: &StudyDesign,
) -> Result<f64> {
    if history.len() != design.total_occasions() {
        return Err(Error::dim("history", design.total_occasions(), history.len()));
    }
    let size = path_space(design);
    if size > PATH_LIMIT {
        return Err(Error::PathSpaceTooLarge {
            size,
            limit: PATH_LIMIT,
        });
    }
    let t_count = design.periods();
    let slices: Vec<&[u8]> = (0..t_count)
        .map(|t| {
            let off = design.offset(t);
            &history[off..off + design.occasions[t]]
        })
        .collect();
    let q: Vec<f64> = (0..t_count)
        .map(|t| period_probability(slices[t], params, design, t))
        .collect();
    let zero: Vec<bool> = slices.iter().map(|s| s.iter().all(|&y| y == 0)).collect();

    let mut total = 0.0;
    for b in 0..t_count {
        if zero[..b].iter().any(|z| !z) {
            break;
        }
        let mut w = params.recruitment[b];
        for e in b..t_count {
            if e > b {
                w *= survival(params, design, e - 1, e - b);
            }
            if e >= b + design.max_age || w == 0.0 {
                break;
            }
            if zero[e + 1..].iter().any(|z| !z) {
                continue;
            }
            let leave = if e + 1 < t_count {
                1.0 - survival(params, design, e, e - b + 1)
            } else {
                1.0
            };
            let mut path = w * leave;
            for qt in &q[b..=e] {
                path *= qt;
            }
            total += path;
        }
    }
    Ok(total)
}

/// Multinomial log-likelihood with every L computed by enumeration.
pub fn brute_force_log_likelihood(dataset: &Dataset, params: &ParameterSet) -> Result<f64> {
    let d = &dataset.design;
    let n = dataset.observed() as f64;
    let big_n = params.super_population;
    let l0 = brute_force_likelihood(&vec![0; d.total_occasions()], params, d)?;
    let mut ll = ln_gamma(big_n + 1.0) - ln_gamma(big_n - n + 1.0);
    if big_n > n {
        ll += (big_n - n) * l0.ln();
    }
    for (h, &c) in dataset.histories().iter().zip(dataset.counts()) {
        ll += c as f64 * brute_force_likelihood(h, params, d)?.ln() - ln_gamma(c as f64 + 1.0);
    }
    Ok(ll)
}

/// Every history over `{0..=G}` that respects availability, all-zero first.
pub fn all_histories(design: &StudyDesign) -> Vec<Vec<u8>> {
    let mut choices = Vec::with_capacity(design.total_occasions());
    for t in 0..design.periods() {
        let mut c = vec![0u8];
        c.extend(design.available[t].iter().map(|&g| g as u8));
        for _ in 0..design.occasions[t] {
            choices.push(c.clone());
        }
    }
    let mut out = vec![Vec::new()];
    for c in choices.iter().rev() {
        out = c
            .iter()
            .flat_map(|&y| {
                out.iter().map(move |h| {
                    let mut v = Vec::with_capacity(h.len() + 1);
                    v.push(y);
                    v.extend_from_slice(h);
                    v
                })
            })
            .collect();
    }
    out
}

fn random_simplex<R: Rng>(rng: &mut R, mask: &[bool]) -> Vec<f64> {
    let mut v: Vec<f64> = mask
        .iter()
        .map(|&m| if m { rng.random::<f64>() + 0.05 } else { 0.0 })
        .collect();
    let total: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= total);
    v
}

/// A random valid parameter set for `design`, with probabilities drawn
/// uniformly and simplexes from normalized uniforms.
pub fn random_parameters<R: Rng>(rng: &mut R, design: &StudyDesign) -> ParameterSet {
    let mut p = ParameterSet::uniform(design, 10.0);
    p.super_population = 5.0 + 20.0 * rng.random::<f64>();
    p.recruitment = random_simplex(rng, &vec![true; design.periods()]);
    for row in p.survival.iter_mut() {
        row.iter_mut().for_each(|x| *x = rng.random());
    }
    for t in 0..design.periods() {
        let mask = design.mask(t);
        p.initial_state[t] = random_simplex(rng, &mask);
        for i in 0..design.states {
            p.transition[t][i] = random_simplex(rng, &mask);
        }
        p.arrival[t] = random_simplex(rng, &vec![true; design.occasions[t]]);
        for occ in p.retention[t].iter_mut() {
            occ.iter_mut().for_each(|x| *x = rng.random());
        }
        for occ in p.capture[t].iter_mut() {
            for ages in occ.iter_mut() {
                ages.iter_mut().for_each(|x| *x = rng.random());
            }
        }
    }
    p.canonicalize(design);
    p
}

/// Outcome of comparing the HMM engine with the enumeration oracle.
#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub instances: usize,
    pub histories_checked: usize,
    /// Largest |HMM - brute force| over all histories and instances.
    pub max_abs_diff: f64,
    /// Largest |1 - sum of all history probabilities|.
    pub max_total_probability_error: f64,
}

/// Runs both checks on `instances` random parameter sets for `design`.
pub fn oracle_check(design: &StudyDesign, instances: usize, seed: u64) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let histories = all_histories(design);
    let mut report = OracleReport {
        instances,
        histories_checked: 0,
        max_abs_diff: 0.0,
        max_total_probability_error: 0.0,
    };
    for _ in 0..instances {
        let params = random_parameters(&mut rng, design);
        let eval = hmm::Evaluator::new(design, &params)?;
        let mut total = 0.0;
        for h in &histories {
            let fast = eval.log_probability(h).exp();
            let slow = brute_force_likelihood(h, &params, design)?;
            report.max_abs_diff = report.max_abs_diff.max((fast - slow).abs());
            total += fast;
            report.histories_checked += 1;
        }
        report.max_total_probability_error = report.max_total_probability_error.max((1.0 - total).abs());
    }
    Ok(report)
}
