use serde::{Deserialize, Serialize};

use super::design::StudyDesign;
use super::transform::expit;
use crate::error::{Error, Result};

/// Tolerance used when checking user-supplied simplexes and stochastic rows.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Natural-scale parameters of the multi-state multi-period stopover model.
///
/// Age-indexed tables are jagged: they hold only the ages that can occur,
/// since an individual is at most `t` periods (or `k` occasions) old.
///
/// * `survival[t][A-1]` for `t < T-1` and `A <= min(t+1, A'-1)`
/// * `retention[t][k-1][a-1]` for `k < K(t)` and `a <= min(k, a'(t)-1)`
/// * `capture[t][k-1][g-1][a-1]` for `k <= K(t)` and `a <= min(k, a'(t))`
///
/// Individuals that reach the maximum age leave with certainty, so no
/// survival or retention value exists for the maximum age itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet {
    /// Super-population size N.
    pub super_population: f64,
    /// r(t), a simplex over periods.
    pub recruitment: Vec<f64>,
    pub survival: Vec<Vec<f64>>,
    /// alpha_g(t), a simplex over states per period.
    pub initial_state: Vec<Vec<f64>>,
    /// Psi(t), a row-stochastic G x G matrix per period.
    pub transition: Vec<Vec<Vec<f64>>>,
    /// beta(t, k), a simplex over occasions per period.
    pub arrival: Vec<Vec<f64>>,
    pub retention: Vec<Vec<Vec<f64>>>,
    pub capture: Vec<Vec<Vec<Vec<f64>>>>,
}

/// Number of survival ages stored for 0-based period `t`.
pub fn survival_ages(design: &StudyDesign, t: usize) -> usize {
    (t + 1).min(design.max_age - 1)
}

/// Number of retention ages stored for 0-based period `t`, occasion `k`.
pub fn retention_ages(design: &StudyDesign, t: usize, k: usize) -> usize {
    (k + 1).min(design.max_occasion_age[t] - 1)
}

/// Number of capture ages stored for 0-based period `t`, occasion `k`.
pub fn capture_ages(design: &StudyDesign, t: usize, k: usize) -> usize {
    (k + 1).min(design.max_occasion_age[t])
}

fn check_probability(what: &str, x: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&x) || x.is_nan() {
        return Err(Error::constraint(format!("{what} = {x} is not a probability")));
    }
    Ok(())
}

fn check_simplex(what: &str, v: &[f64]) -> Result<()> {
    for &x in v {
        check_probability(what, x)?;
    }
    let total: f64 = v.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::constraint(format!("{what} sums to {total}, not 1")));
    }
    Ok(())
}

impl ParameterSet {
    /// All-uniform parameter set of the right shape, with probabilities at 0.5.
    pub fn uniform(design: &StudyDesign, super_population: f64) -> Self {
        let t_count = design.periods();
        let g = design.states;
        let mut initial_state = Vec::with_capacity(t_count);
        let mut transition = Vec::with_capacity(t_count);
        for t in 0..t_count {
            let mask = design.mask(t);
            let m = mask.iter().filter(|&&b| b).count() as f64;
            let row: Vec<f64> = mask.iter().map(|&b| if b { 1.0 / m } else { 0.0 }).collect();
            initial_state.push(row.clone());
            transition.push(vec![row; g]);
        }
        let mut set = ParameterSet {
            super_population,
            recruitment: vec![1.0 / t_count as f64; t_count],
            survival: (0..t_count.saturating_sub(1))
                .map(|t| vec![0.5; survival_ages(design, t)])
                .collect(),
            initial_state,
            transition,
            arrival: design
                .occasions
                .iter()
                .map(|&k| vec![1.0 / k as f64; k])
                .collect(),
            retention: (0..t_count)
                .map(|t| {
                    (0..design.occasions[t] - 1)
                        .map(|k| vec![0.5; retention_ages(design, t, k)])
                        .collect()
                })
                .collect(),
            capture: (0..t_count)
                .map(|t| {
                    (0..design.occasions[t])
                        .map(|k| vec![vec![0.5; capture_ages(design, t, k)]; g])
                        .collect()
                })
                .collect(),
        };
        set.canonicalize(design);
        set
    }

    /// Sets entries that no individual can reach to their structural values:
    /// capture probabilities of unavailable states become zero and
    /// transition rows of unavailable states become uniform over the
    /// available destinations.
    pub fn canonicalize(&mut self, design: &StudyDesign) {
        for t in 0..design.periods() {
            let mask = design.mask(t);
            let m = mask.iter().filter(|&&b| b).count() as f64;
            for (i, row) in self.transition[t].iter_mut().enumerate() {
                if !mask[i] {
                    for (x, &b) in row.iter_mut().zip(&mask) {
                        *x = if b { 1.0 / m } else { 0.0 };
                    }
                }
            }
            for occ in self.capture[t].iter_mut() {
                for (g, ages) in occ.iter_mut().enumerate() {
                    if !mask[g] {
                        ages.iter_mut().for_each(|x| *x = 0.0);
                    }
                }
            }
        }
    }

    pub fn validate(&self, design: &StudyDesign) -> Result<()> {
        let t_count = design.periods();
        let g = design.states;
        if !(self.super_population.is_finite() && self.super_population > 0.0) {
            return Err(Error::constraint(format!(
                "N = {} must be positive and finite",
                self.super_population
            )));
        }
        if self.recruitment.len() != t_count {
            return Err(Error::dim("recruitment", t_count, self.recruitment.len()));
        }
        check_simplex("r", &self.recruitment)?;

        if self.survival.len() != t_count.saturating_sub(1) {
            return Err(Error::dim("survival periods", t_count - 1, self.survival.len()));
        }
        for (t, row) in self.survival.iter().enumerate() {
            if row.len() != survival_ages(design, t) {
                return Err(Error::dim(
                    format!("survival ages in period {}", t + 1),
                    survival_ages(design, t),
                    row.len(),
                ));
            }
            for &x in row {
                check_probability("s", x)?;
            }
        }

        for (name, len) in [
            ("initial_state", self.initial_state.len()),
            ("transition", self.transition.len()),
            ("arrival", self.arrival.len()),
            ("retention", self.retention.len()),
            ("capture", self.capture.len()),
        ] {
            if len != t_count {
                return Err(Error::dim(name, t_count, len));
            }
        }

        for t in 0..t_count {
            let mask = design.mask(t);
            let k_count = design.occasions[t];
            let alpha = &self.initial_state[t];
            if alpha.len() != g {
                return Err(Error::dim("initial_state states", g, alpha.len()));
            }
            check_simplex("alpha", alpha)?;
            if let Some(i) = (0..g).find(|&i| !mask[i] && alpha[i] != 0.0) {
                return Err(Error::constraint(format!(
                    "alpha_{}({}) must be 0 for an unavailable state",
                    i + 1,
                    t + 1
                )));
            }

            let psi = &self.transition[t];
            if psi.len() != g {
                return Err(Error::dim("transition rows", g, psi.len()));
            }
            for row in psi {
                if row.len() != g {
                    return Err(Error::dim("transition columns", g, row.len()));
                }
                check_simplex("Psi row", row)?;
                if let Some(j) = (0..g).find(|&j| !mask[j] && row[j] != 0.0) {
                    return Err(Error::constraint(format!(
                        "Psi({}) column {} must be 0 for an unavailable state",
                        t + 1,
                        j + 1
                    )));
                }
            }

            if self.arrival[t].len() != k_count {
                return Err(Error::dim("arrival occasions", k_count, self.arrival[t].len()));
            }
            check_simplex("beta", &self.arrival[t])?;

            if self.retention[t].len() != k_count - 1 {
                return Err(Error::dim(
                    "retention occasions",
                    k_count - 1,
                    self.retention[t].len(),
                ));
            }
            for (k, ages) in self.retention[t].iter().enumerate() {
                if ages.len() != retention_ages(design, t, k) {
                    return Err(Error::dim(
                        "retention ages",
                        retention_ages(design, t, k),
                        ages.len(),
                    ));
                }
                for &x in ages {
                    check_probability("phi", x)?;
                }
            }

            if self.capture[t].len() != k_count {
                return Err(Error::dim("capture occasions", k_count, self.capture[t].len()));
            }
            for (k, occ) in self.capture[t].iter().enumerate() {
                if occ.len() != g {
                    return Err(Error::dim("capture states", g, occ.len()));
                }
                for ages in occ {
                    if ages.len() != capture_ages(design, t, k) {
                        return Err(Error::dim(
                            "capture ages",
                            capture_ages(design, t, k),
                            ages.len(),
                        ));
                    }
                    for &x in ages {
                        check_probability("p", x)?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Survival from period `t` (0-based) at primary age `age` (1-based).
    /// Zero at or beyond the maximum age.
    pub fn survival_at(&self, t: usize, age: usize) -> f64 {
        self.survival[t].get(age - 1).copied().unwrap_or(0.0)
    }

    /// Retention from occasion `k` (0-based) at within-period age `age`.
    pub fn retention_at(&self, t: usize, k: usize, age: usize) -> f64 {
        self.retention[t][k].get(age - 1).copied().unwrap_or(0.0)
    }

    /// Capture probability on occasion `k` (0-based) for 1-based `state`.
    pub fn capture_at(&self, t: usize, k: usize, state: usize, age: usize) -> f64 {
        self.capture[t][k][state - 1]
            .get(age - 1)
            .copied()
            .unwrap_or(0.0)
    }

    /// Largest absolute entry-wise difference, for comparing parameter sets
    /// of the same shape. Returns infinity when shapes differ.
    pub fn max_abs_diff(&self, other: &ParameterSet) -> f64 {
        fn flat(p: &ParameterSet) -> Vec<f64> {
            let mut v = vec![p.super_population];
            v.extend(&p.recruitment);
            v.extend(p.survival.iter().flatten());
            v.extend(p.initial_state.iter().flatten());
            v.extend(p.transition.iter().flatten().flatten());
            v.extend(p.arrival.iter().flatten());
            v.extend(p.retention.iter().flatten().flatten());
            v.extend(p.capture.iter().flatten().flatten().flatten());
            v
        }
        let (a, b) = (flat(self), flat(other));
        if a.len() != b.len() {
            return f64::INFINITY;
        }
        a.iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }
}

fn conditional_from_simplex(what: &str, v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::constraint(format!("{what} is empty")));
    }
    check_simplex(what, v)?;
    let mut tail = vec![0.0; v.len()];
    let mut acc = 0.0;
    for i in (0..v.len()).rev() {
        acc += v[i];
        tail[i] = acc;
    }
    let mut out: Vec<f64> = v
        .iter()
        .zip(&tail)
        .map(|(&x, &rest)| if rest > 0.0 { x / rest } else { 0.0 })
        .collect();
    out[0] = v[0];
    Ok(out)
}

/// r*(t): probability of recruitment in period `t` given none before.
///
/// A zero tail sum yields 0, since that hidden transition cannot be taken.
pub fn conditional_recruitment(r: &[f64]) -> Result<Vec<f64>> {
    conditional_from_simplex("r", r)
}

/// beta*(t, k): probability of arriving on occasion `k` given no earlier arrival.
pub fn conditional_arrival(beta: &[f64]) -> Result<Vec<f64>> {
    conditional_from_simplex("beta", beta)
}

/// Rebuilds a simplex from its conditional (stick-breaking) form.
pub fn stick_breaking(conditional: &[f64]) -> Vec<f64> {
    let mut remaining = 1.0;
    conditional
        .iter()
        .map(|&c| {
            let x = c * remaining;
            remaining *= 1.0 - c;
            x
        })
        .collect()
}

fn log_expit(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Arrival simplex from a logistic curve over occasions.
///
/// Weights `w(k) = expit(eta * k + delta)` for `k = 1..=occasions` are
/// normalized to sum to one. Weights are combined on the log scale so that
/// extreme linear predictors do not underflow.
pub fn arrival_from_logistic(eta: f64, delta: f64, occasions: usize) -> Vec<f64> {
    let predictors: Vec<f64> = (1..=occasions)
        .map(|k| eta * k as f64 + delta)
        .collect();
    normalized_logistic_weights(&predictors)
}

/// Normalizes `expit(lp)` weights into a simplex, working on the log scale.
pub fn normalized_logistic_weights(predictors: &[f64]) -> Vec<f64> {
    let logs: Vec<f64> = predictors.iter().map(|&x| log_expit(x)).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
    super::transform::normalize_in_place(&mut w);
    w
}

/// Retention table `phi[k-1][a-1] = expit(tau(k) + gamma (a - 1))` for
/// occasions `k = 1..=tau.len()` and ages `a = 1..=k`.
pub fn retention_from_logistic(tau: &[f64], gamma: f64) -> Vec<Vec<f64>> {
    tau.iter()
        .enumerate()
        .map(|(k, &tk)| (0..=k).map(|a| expit(tk + gamma * a as f64)).collect())
        .collect()
}
