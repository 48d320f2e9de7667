//! Nested hidden Markov model: a secondary chain within each primary period
//! and a primary chain across periods.
//!
//! Secondary states of period `t`, 0-based: `0` is "not yet arrived",
//! `1 + (a-1) G + (g-1)` is "present at within-period age `a` in state `g`",
//! and `a' G + 1` is "departed". Primary states: `0` is "not yet recruited",
//! `A` is "available at primary age `A`" and `A' + 1` is "departed".

use std::collections::HashMap;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{conditional_arrival, conditional_recruitment, Dataset, ParameterSet, StudyDesign};

/// A probability stored as `mantissa * exp(log_scale)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaledProb {
    pub mantissa: f64,
    pub log_scale: f64,
}

impl ScaledProb {
    pub fn ln(self) -> f64 {
        if self.mantissa == 0.0 {
            f64::NEG_INFINITY
        } else {
            self.mantissa.ln() + self.log_scale
        }
    }

    pub fn value(self) -> f64 {
        self.mantissa * self.log_scale.exp()
    }
}

/// Index of secondary state (age `a`, state `g`), both 1-based.
pub fn secondary_index(a: usize, g: usize, states: usize) -> usize {
    1 + (a - 1) * states + (g - 1)
}

/// pi(t,1): arrival on the first occasion, in state g with probability alpha_g.
pub fn build_secondary_initial(beta_t1: f64, alpha_t: &[f64], a_prime_t: usize) -> Vec<f64> {
    let g = alpha_t.len();
    let mut v = vec![0.0; a_prime_t * g + 2];
    v[0] = 1.0 - beta_t1;
    for (i, &a) in alpha_t.iter().enumerate() {
        v[1 + i] = beta_t1 * a;
    }
    v
}

/// Gamma(t,k), the transition from occasion `k` to `k+1`.
///
/// `phi_row[a-1]` is the retention of age-`a` individuals; ages beyond the
/// end of `phi_row` cannot occur at this occasion and are routed to
/// "departed". Age `a'` always departs.
pub fn build_secondary_transition(
    beta_star: f64,
    alpha_t: &[f64],
    phi_row: &[f64],
    psi_t: &[Vec<f64>],
    a_prime_t: usize,
) -> Result<DMatrix<f64>> {
    let g = alpha_t.len();
    if psi_t.len() != g || psi_t.iter().any(|r| r.len() != g) {
        return Err(Error::dim("Psi rows", g, psi_t.len()));
    }
    if phi_row.len() >= a_prime_t.max(1) {
        return Err(Error::dim("retention ages", a_prime_t - 1, phi_row.len()));
    }
    let n = a_prime_t * g + 2;
    let departed = n - 1;
    let mut m = DMatrix::zeros(n, n);
    m[(0, 0)] = 1.0 - beta_star;
    for (j, &a) in alpha_t.iter().enumerate() {
        m[(0, 1 + j)] = beta_star * a;
    }
    for a in 1..=a_prime_t {
        let phi = if a < a_prime_t {
            phi_row.get(a - 1).copied().unwrap_or(0.0)
        } else {
            0.0
        };
        for i in 1..=g {
            let row = secondary_index(a, i, g);
            if phi > 0.0 {
                for j in 1..=g {
                    m[(row, secondary_index(a + 1, j, g))] = phi * psi_t[i - 1][j - 1];
                }
            }
            m[(row, departed)] = 1.0 - phi;
        }
    }
    m[(departed, departed)] = 1.0;
    Ok(m)
}

/// Diagonal of P(t,k,outcome). `p_slice[g-1][a-1]` is the capture
/// probability of state `g` at age `a`; missing ages count as zero.
pub fn build_observation_diagonal(
    outcome: usize,
    p_slice: &[Vec<f64>],
    a_prime_t: usize,
) -> Result<Vec<f64>> {
    let g = p_slice.len();
    if outcome > g {
        return Err(Error::Input(format!("outcome {outcome} outside 0..={g}")));
    }
    let n = a_prime_t * g + 2;
    let mut d = vec![0.0; n];
    let p = |state: usize, age: usize| p_slice[state - 1].get(age - 1).copied().unwrap_or(0.0);
    if outcome == 0 {
        d[0] = 1.0;
        d[n - 1] = 1.0;
        for a in 1..=a_prime_t {
            for state in 1..=g {
                d[secondary_index(a, state, g)] = 1.0 - p(state, a);
            }
        }
    } else {
        for a in 1..=a_prime_t {
            d[secondary_index(a, outcome, g)] = p(outcome, a);
        }
    }
    Ok(d)
}

/// pi(1) of the primary chain.
pub fn build_primary_initial(r1: f64, max_age: usize) -> Vec<f64> {
    let mut v = vec![0.0; max_age + 2];
    v[0] = 1.0 - r1;
    v[1] = r1;
    v
}

/// Gamma(t), the transition from period `t` to `t+1` given r*(t+1) and
/// survival by age (`s_row[A-1]`, ages beyond its end do not survive).
pub fn build_primary_transition(r_star_next: f64, s_row: &[f64], max_age: usize) -> DMatrix<f64> {
    let n = max_age + 2;
    let departed = n - 1;
    let mut m = DMatrix::zeros(n, n);
    m[(0, 0)] = 1.0 - r_star_next;
    m[(0, 1)] = r_star_next;
    for age in 1..=max_age {
        let s = if age < max_age {
            s_row.get(age - 1).copied().unwrap_or(0.0)
        } else {
            0.0
        };
        if age < max_age {
            m[(age, age + 1)] = s;
        }
        m[(age, departed)] = 1.0 - s;
    }
    m[(departed, departed)] = 1.0;
    m
}

/// Diagonal of P(t, z): `captured` selects z = 1, `l` is L_j(t) or L_0(t).
pub fn build_primary_observation(captured: bool, l: f64, max_age: usize) -> Vec<f64> {
    let n = max_age + 2;
    let mut d = vec![l; n];
    let outside = if captured { 0.0 } else { 1.0 };
    d[0] = outside;
    d[n - 1] = outside;
    d
}

/// Full secondary chain of one period, built from the matrix constructors.
#[derive(Debug, Clone)]
pub struct SecondaryChain {
    pub initial: Vec<f64>,
    /// `transitions[k]` moves occasion `k` to `k+1` (0-based).
    pub transitions: Vec<DMatrix<f64>>,
    /// `observations[k][outcome]`
    pub observations: Vec<Vec<Vec<f64>>>,
}

impl SecondaryChain {
    pub fn new(design: &StudyDesign, params: &ParameterSet, t: usize) -> Result<Self> {
        let a_prime = design.max_occasion_age[t];
        let alpha = &params.initial_state[t];
        let beta_star = conditional_arrival(&params.arrival[t])?;
        let initial = build_secondary_initial(beta_star[0], alpha, a_prime);
        let transitions = (0..design.occasions[t] - 1)
            .map(|k| {
                build_secondary_transition(
                    beta_star[k + 1],
                    alpha,
                    &params.retention[t][k],
                    &params.transition[t],
                    a_prime,
                )
            })
            .collect::<Result<_>>()?;
        let observations = (0..design.occasions[t])
            .map(|k| {
                (0..=design.states)
                    .map(|o| build_observation_diagonal(o, &params.capture[t][k], a_prime))
                    .collect::<Result<_>>()
            })
            .collect::<Result<_>>()?;
        Ok(SecondaryChain {
            initial,
            transitions,
            observations,
        })
    }

    /// Unscaled product pi P (Gamma P)... 1 for one slice.
    pub fn likelihood(&self, slice: &[u8]) -> f64 {
        let mut v: Vec<f64> = self
            .initial
            .iter()
            .zip(&self.observations[0][slice[0] as usize])
            .map(|(a, b)| a * b)
            .collect();
        for (k, &y) in slice.iter().enumerate().skip(1) {
            let m = &self.transitions[k - 1];
            let n = v.len();
            let mut next = vec![0.0; n];
            for (i, &vi) in v.iter().enumerate() {
                if vi != 0.0 {
                    for (j, x) in next.iter_mut().enumerate() {
                        *x += vi * m[(i, j)];
                    }
                }
            }
            for (x, d) in next.iter_mut().zip(&self.observations[k][y as usize]) {
                *x *= d;
            }
            v = next;
        }
        v.iter().sum()
    }
}

/// Full primary chain, with observation diagonals built from per-period
/// L_0(t) and the history's own L_j(t).
#[derive(Debug, Clone)]
pub struct PrimaryChain {
    pub initial: Vec<f64>,
    /// `transitions[t]` moves period `t` to `t+1` (0-based).
    pub transitions: Vec<DMatrix<f64>>,
}

impl PrimaryChain {
    pub fn new(design: &StudyDesign, params: &ParameterSet) -> Result<Self> {
        let r_star = conditional_recruitment(&params.recruitment)?;
        let initial = build_primary_initial(r_star[0], design.max_age);
        let transitions = (0..design.periods() - 1)
            .map(|t| build_primary_transition(r_star[t + 1], &params.survival[t], design.max_age))
            .collect();
        Ok(PrimaryChain {
            initial,
            transitions,
        })
    }
}

/// Parameters of one period in the form the structured forward pass uses.
struct PeriodTables<'a> {
    states: usize,
    a_prime: usize,
    beta_star: Vec<f64>,
    alpha: &'a [f64],
    psi: &'a [Vec<f64>],
    retention: &'a [Vec<f64>],
    capture: &'a [Vec<Vec<f64>>],
}

impl<'a> PeriodTables<'a> {
    fn new(design: &StudyDesign, params: &'a ParameterSet, t: usize) -> Result<Self> {
        Ok(PeriodTables {
            states: design.states,
            a_prime: design.max_occasion_age[t],
            beta_star: conditional_arrival(&params.arrival[t])?,
            alpha: &params.initial_state[t],
            psi: &params.transition[t],
            retention: &params.retention[t],
            capture: &params.capture[t],
        })
    }

    fn observe(&self, v: &mut [f64], k: usize, y: u8, ages: usize) {
        let g = self.states;
        let p = &self.capture[k];
        let y = y as usize;
        for a in 1..=ages {
            for state in 1..=g {
                let i = secondary_index(a, state, g);
                let pa = p[state - 1].get(a - 1).copied().unwrap_or(0.0);
                v[i] *= if y == 0 {
                    1.0 - pa
                } else if y == state {
                    pa
                } else {
                    0.0
                };
            }
        }
        if y != 0 {
            v[0] = 0.0;
            let last = v.len() - 1;
            v[last] = 0.0;
        }
    }

    /// Scaled forward pass over one slice, exploiting the block structure
    /// of Gamma(t,k): only ages `1..=min(k, a')` can be occupied at occasion `k`.
    fn likelihood(&self, slice: &[u8], buf: &mut Vec<f64>, next: &mut Vec<f64>) -> ScaledProb {
        let g = self.states;
        let n = self.a_prime * g + 2;
        let departed = n - 1;
        buf.clear();
        buf.resize(n, 0.0);
        buf[0] = 1.0 - self.beta_star[0];
        for (j, &a) in self.alpha.iter().enumerate() {
            buf[1 + j] = self.beta_star[0] * a;
        }
        self.observe(buf, 0, slice[0], 1);
        let mut log_scale = 0.0;
        for k in 1..slice.len() {
            let total: f64 = buf.iter().sum();
            if total == 0.0 {
                return ScaledProb {
                    mantissa: 0.0,
                    log_scale: 0.0,
                };
            }
            buf.iter_mut().for_each(|x| *x /= total);
            log_scale += total.ln();

            let ages_before = k.min(self.a_prime);
            next.clear();
            next.resize(n, 0.0);
            let b = self.beta_star[k];
            next[0] = buf[0] * (1.0 - b);
            for (j, &a) in self.alpha.iter().enumerate() {
                next[1 + j] = buf[0] * b * a;
            }
            let mut leaving = buf[departed];
            let phi = &self.retention[k - 1];
            for a in 1..=ages_before {
                let stay = if a < self.a_prime {
                    phi.get(a - 1).copied().unwrap_or(0.0)
                } else {
                    0.0
                };
                let base = secondary_index(a, 1, g);
                let mass: f64 = buf[base..base + g].iter().sum();
                leaving += mass * (1.0 - stay);
                if stay > 0.0 {
                    let to = secondary_index(a + 1, 1, g);
                    for i in 0..g {
                        let w = buf[base + i] * stay;
                        if w != 0.0 {
                            for (x, &q) in next[to..to + g].iter_mut().zip(&self.psi[i]) {
                                *x += w * q;
                            }
                        }
                    }
                }
            }
            next[departed] = leaving;
            std::mem::swap(buf, next);
            self.observe(buf, k, slice[k], (k + 1).min(self.a_prime));
        }
        let total: f64 = buf.iter().sum();
        ScaledProb {
            mantissa: total,
            log_scale,
        }
    }
}

/// L_j(t) for one period's slice of a history, given attendance in that period.
pub fn secondary_likelihood(
    slice: &[u8],
    params: &ParameterSet,
    design: &StudyDesign,
    t: usize,
) -> Result<ScaledProb> {
    if slice.len() != design.occasions[t] {
        return Err(Error::dim("history slice", design.occasions[t], slice.len()));
    }
    if let Some(&y) = slice.iter().find(|&&y| y as usize > design.states) {
        return Err(Error::Input(format!("outcome {y} outside 0..={}", design.states)));
    }
    let tables = PeriodTables::new(design, params, t)?;
    Ok(tables.likelihood(slice, &mut Vec::new(), &mut Vec::new()))
}

/// Log of L_j given log L_j(t) for captured periods and log L_0(t) otherwise.
fn primary_log_likelihood(
    captured: &[bool],
    log_l: &[f64],
    r_star: &[f64],
    survival: &[Vec<f64>],
    max_age: usize,
    buf: &mut Vec<f64>,
    next: &mut Vec<f64>,
) -> f64 {
    let n = max_age + 2;
    let departed = n - 1;
    buf.clear();
    buf.resize(n, 0.0);
    buf[0] = 1.0 - r_star[0];
    buf[1] = r_star[0];
    let mut log_scale = 0.0;
    for t in 0..captured.len() {
        if t > 0 {
            next.clear();
            next.resize(n, 0.0);
            let r = r_star[t];
            next[0] = buf[0] * (1.0 - r);
            next[1] = buf[0] * r;
            next[departed] = buf[departed];
            let s_row = &survival[t - 1];
            for age in 1..=t.min(max_age) {
                let s = if age < max_age {
                    s_row.get(age - 1).copied().unwrap_or(0.0)
                } else {
                    0.0
                };
                if age < max_age {
                    next[age + 1] += buf[age] * s;
                }
                next[departed] += buf[age] * (1.0 - s);
            }
            std::mem::swap(buf, next);
        }
        // alive states share the factor L(t); fold it into the log scale
        // when the outside states are zeroed, otherwise multiply through
        if log_l[t] == f64::NEG_INFINITY {
            if captured[t] {
                return f64::NEG_INFINITY;
            }
            for x in &mut buf[1..departed] {
                *x = 0.0;
            }
        } else if captured[t] {
            buf[0] = 0.0;
            buf[departed] = 0.0;
            log_scale += log_l[t];
        } else {
            let l = log_l[t].exp();
            for x in &mut buf[1..departed] {
                *x *= l;
            }
        }
        let total: f64 = buf.iter().sum();
        if total == 0.0 {
            return f64::NEG_INFINITY;
        }
        buf.iter_mut().for_each(|x| *x /= total);
        log_scale += total.ln();
    }
    log_scale
}

/// Per-evaluation state: conditional probabilities and the L_0(t) cache.
pub struct Evaluator<'a> {
    design: &'a StudyDesign,
    params: &'a ParameterSet,
    periods: Vec<PeriodTables<'a>>,
    r_star: Vec<f64>,
    log_l0: Vec<f64>,
}

impl<'a> Evaluator<'a> {
    pub fn new(design: &'a StudyDesign, params: &'a ParameterSet) -> Result<Self> {
        let periods = (0..design.periods())
            .map(|t| PeriodTables::new(design, params, t))
            .collect::<Result<Vec<_>>>()?;
        let r_star = conditional_recruitment(&params.recruitment)?;
        let (mut buf, mut next) = (Vec::new(), Vec::new());
        let log_l0 = periods
            .iter()
            .enumerate()
            .map(|(t, p)| {
                p.likelihood(&vec![0; design.occasions[t]], &mut buf, &mut next)
                    .ln()
            })
            .collect();
        Ok(Evaluator {
            design,
            params,
            periods,
            r_star,
            log_l0,
        })
    }

    /// log L_0(t) for every period.
    pub fn log_l0_periods(&self) -> &[f64] {
        &self.log_l0
    }

    /// log of the probability of a full history (L_j, or L_0 when all zero).
    pub fn log_probability(&self, history: &[u8]) -> f64 {
        let (mut buf, mut next) = (Vec::new(), Vec::new());
        self.combine(history, |t, slice| {
            self.periods[t].likelihood(slice, &mut buf, &mut next).ln()
        })
    }

    /// Like [`Evaluator::log_probability`], reusing log L_j(t) values of
    /// slices already seen in `cache[t]`.
    pub fn log_probability_cached<'h>(
        &self,
        history: &'h [u8],
        cache: &mut [HashMap<&'h [u8], f64>],
    ) -> f64 {
        let (mut buf, mut next) = (Vec::new(), Vec::new());
        self.combine(history, |t, slice| {
            *cache[t].entry(slice).or_insert_with(|| {
                self.periods[t].likelihood(slice, &mut buf, &mut next).ln()
            })
        })
    }

    fn combine<'h>(&self, history: &'h [u8], mut slice_ln: impl FnMut(usize, &'h [u8]) -> f64) -> f64 {
        let d = self.design;
        let t_count = d.periods();
        let mut captured = vec![false; t_count];
        let mut log_l = vec![0.0; t_count];
        for t in 0..t_count {
            let off = d.offset(t);
            let slice = &history[off..off + d.occasions[t]];
            captured[t] = slice.iter().any(|&y| y != 0);
            log_l[t] = if captured[t] {
                slice_ln(t, slice)
            } else {
                self.log_l0[t]
            };
        }
        let (mut buf, mut next) = (Vec::new(), Vec::new());
        primary_log_likelihood(
            &captured,
            &log_l,
            &self.r_star,
            &self.params.survival,
            d.max_age,
            &mut buf,
            &mut next,
        )
    }

    /// log L_0, the probability that an individual is never captured.
    pub fn log_l0(&self) -> f64 {
        self.log_probability(&vec![0; self.design.total_occasions()])
    }
}

/// L_j for a full capture history.
pub fn primary_likelihood(
    history: &[u8],
    params: &ParameterSet,
    design: &StudyDesign,
) -> Result<ScaledProb> {
    if history.len() != design.total_occasions() {
        return Err(Error::dim("history", design.total_occasions(), history.len()));
    }
    if let Some(&y) = history.iter().find(|&&y| y as usize > design.states) {
        return Err(Error::Input(format!("outcome {y} outside 0..={}", design.states)));
    }
    let ln = Evaluator::new(design, params)?.log_probability(history);
    Ok(if ln == f64::NEG_INFINITY {
        ScaledProb {
            mantissa: 0.0,
            log_scale: 0.0,
        }
    } else {
        ScaledProb {
            mantissa: 1.0,
            log_scale: ln,
        }
    })
}

/// log(N! / (N-n)!) for real N, as a sum of n logarithms.
pub fn log_falling_factorial(big_n: f64, n: u64) -> f64 {
    (0..n).map(|i| (big_n - i as f64).ln()).sum()
}

/// log(c!)
pub fn log_factorial(c: u64) -> f64 {
    (2..=c).map(|i| (i as f64).ln()).sum()
}

/// Full log-likelihood of a dataset, validating the parameters first.
pub fn log_likelihood(dataset: &Dataset, params: &ParameterSet) -> Result<f64> {
    params.validate(&dataset.design)?;
    log_likelihood_unchecked(dataset, params)
}

/// [`log_likelihood`] without the parameter validation, for parameter sets
/// produced by a structure expansion.
pub fn log_likelihood_unchecked(dataset: &Dataset, params: &ParameterSet) -> Result<f64> {
    let n = dataset.observed() as f64;
    let big_n = params.super_population;
    if !(big_n >= n) {
        return Err(Error::Domain(format!("N = {big_n} is below n = {n}")));
    }
    let eval = Evaluator::new(&dataset.design, params)?;
    let mut ll = log_falling_factorial(big_n, dataset.observed());
    if big_n > n {
        let l0 = eval.log_l0();
        if l0 == f64::NEG_INFINITY {
            return Ok(f64::NEG_INFINITY);
        }
        ll += (big_n - n) * l0;
    }
    let mut cache = vec![HashMap::new(); dataset.design.periods()];
    for (h, &c) in dataset.histories().iter().zip(dataset.counts()) {
        let lj = eval.log_probability_cached(h, &mut cache);
        if lj == f64::NEG_INFINITY {
            return Ok(f64::NEG_INFINITY);
        }
        ll += c as f64 * lj - log_factorial(c);
    }
    Ok(ll)
}
