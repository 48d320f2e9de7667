//! Maximum-likelihood fitting, derived abundance, bootstrap and AIC step-up
//! selection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmm::{log_likelihood, log_likelihood_unchecked};
use crate::model::{capture_ages, retention_ages, survival_ages, Dataset, ParameterSet, StudyDesign};
use crate::optim::{minimize, OptimizerConfig, Outcome};
use crate::simulate::expected_abundance;
use crate::structure::{CompiledStructure, ModelStructure};

/// Starting point of the first optimizer start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// All zeros except `theta_N = ln(max(n, 1))`, i.e. N = 2n.
    Default,
    /// All zeros: N = n + 1 and every probability at its symmetric value.
    Zero,
    Theta(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Number of optimizer starts; start 0 is the unjittered initial value.
    pub starts: usize,
    /// Standard deviation of the Gaussian jitter added to later starts.
    pub jitter: f64,
    pub seed: u64,
    pub init: Init,
    /// |theta| above this flags a boundary estimate.
    pub boundary_threshold: f64,
    pub optimizer: OptimizerConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            starts: 10,
            jitter: 0.5,
            seed: 1,
            init: Init::Default,
            boundary_threshold: 15.0,
            optimizer: OptimizerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub method: String,
    pub message: String,
    pub iterations: usize,
    pub evaluations: usize,
    pub scaled_gradient: f64,
    pub starts: usize,
    pub starts_converged: usize,
    /// Index of the start that produced the reported optimum.
    pub best_start: usize,
    /// Unconstrained coordinates beyond the boundary threshold.
    pub boundary: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub structure: ModelStructure,
    pub design: StudyDesign,
    pub observed: u64,
    pub names: Vec<String>,
    pub theta_hat: Vec<f64>,
    pub params_hat: ParameterSet,
    pub loglik: f64,
    pub aic: f64,
    pub n_params: usize,
    pub converged: bool,
    pub diagnostics: FitDiagnostics,
}

fn objective<'a>(
    compiled: &'a CompiledStructure,
    dataset: &'a Dataset,
) -> impl Fn(&[f64]) -> f64 + Sync + 'a {
    let n = dataset.observed();
    move |theta: &[f64]| match compiled.expand(theta, n) {
        Ok(p) => match log_likelihood_unchecked(dataset, &p) {
            Ok(ll) if ll.is_finite() => -ll,
            _ => f64::INFINITY,
        },
        Err(_) => f64::INFINITY,
    }
}

fn start_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Maximizes the likelihood of `dataset` under `structure`.
///
/// Starts run in parallel and are merged by start index. The best
/// converged start is reported; when no start converges the best
/// non-converged one is returned with `converged = false`.
pub fn fit(dataset: &Dataset, structure: &ModelStructure, config: &FitConfig) -> Result<FitResult> {
    let compiled = structure.compile(&dataset.design)?;
    let dim = compiled.dimension();
    let n = dataset.observed();
    let x0 = match &config.init {
        Init::Default => {
            let mut v = vec![0.0; dim];
            v[0] = (n.max(1) as f64).ln();
            v
        }
        Init::Zero => vec![0.0; dim],
        Init::Theta(v) => {
            if v.len() != dim {
                return Err(Error::dim("initial theta", dim, v.len()));
            }
            v.clone()
        }
    };
    let starts = config.starts.max(1);
    let jitter = Normal::new(0.0, config.jitter.max(0.0))
        .map_err(|e| Error::Input(format!("jitter: {e}")))?;
    let initial: Vec<Vec<f64>> = (0..starts)
        .map(|i| {
            let mut rng = start_rng(config.seed, i as u64);
            x0.iter()
                .map(|&x| if i == 0 { x } else { x + jitter.sample(&mut rng) })
                .collect()
        })
        .collect();

    let f = objective(&compiled, dataset);
    let outcomes: Vec<Outcome> = initial
        .par_iter()
        .map(|x| minimize(&f, x, &config.optimizer))
        .collect();

    let rank = |o: &Outcome| (!o.converged, o.value);
    let (best_start, best) = outcomes
        .iter()
        .enumerate()
        .min_by(|a, b| {
            let (ka, kb) = (rank(a.1), rank(b.1));
            ka.0.cmp(&kb.0).then(ka.1.total_cmp(&kb.1))
        })
        .expect("at least one start");
    if !best.value.is_finite() {
        return Err(Error::Domain(
            "log-likelihood is not finite at any start".into(),
        ));
    }

    let params_hat = compiled.expand(&best.x, n)?;
    let loglik = log_likelihood(dataset, &params_hat)?;
    let n_params = dim;
    Ok(FitResult {
        structure: structure.clone(),
        design: dataset.design.clone(),
        observed: n,
        names: compiled.names().to_vec(),
        theta_hat: best.x.clone(),
        loglik,
        aic: -2.0 * loglik + 2.0 * n_params as f64,
        n_params,
        converged: best.converged,
        diagnostics: FitDiagnostics {
            method: best.method.clone(),
            message: best.message.clone(),
            iterations: best.iterations,
            evaluations: outcomes.iter().map(|o| o.evaluations).sum(),
            scaled_gradient: best.gradient,
            starts,
            starts_converged: outcomes.iter().filter(|o| o.converged).count(),
            best_start,
            boundary: compiled.boundary(&best.x, config.boundary_threshold),
        },
        params_hat,
    })
}

/// Fits each period on its own as a single-period stopover model.
pub fn fit_single_periods(
    dataset: &Dataset,
    structure: &ModelStructure,
    config: &FitConfig,
) -> Result<Vec<FitResult>> {
    (0..dataset.design.periods())
        .map(|t| fit(&dataset.restrict_to_period(t)?, structure, config))
        .collect()
}

/// Expected per-period abundance at the estimates:
/// `N(t) = N sum_{b<=t} r(b) prod_{u=b}^{t-1} s_{u-b+1}(u)`.
pub fn derived_abundance(fit: &FitResult) -> Vec<f64> {
    expected_abundance(&fit.params_hat, &fit.design)
}

// ---------------------------------------------------------------------------
// Natural-scale summaries

/// One natural-scale quantity with its (1-based) indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantity {
    pub parameter: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub year: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub occasion: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub age: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub state: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub to: Option<usize>,
    pub value: f64,
}

impl Quantity {
    fn new(parameter: &str, value: f64) -> Self {
        Quantity {
            parameter: parameter.to_string(),
            year: None,
            occasion: None,
            age: None,
            state: None,
            to: None,
            value,
        }
    }

    fn year(mut self, t: usize) -> Self {
        self.year = Some(t + 1);
        self
    }
    fn occasion(mut self, k: usize) -> Self {
        self.occasion = Some(k + 1);
        self
    }
    fn age(mut self, a: usize) -> Self {
        self.age = Some(a);
        self
    }
    fn state(mut self, g: usize) -> Self {
        self.state = Some(g + 1);
        self
    }
    fn to(mut self, g: usize) -> Self {
        self.to = Some(g + 1);
        self
    }

    /// Compact label such as `p[year=1,occ=2,state=1,age=1]`.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        for (name, v) in [
            ("year", self.year),
            ("occ", self.occasion),
            ("state", self.state),
            ("to", self.to),
            ("age", self.age),
        ] {
            if let Some(v) = v {
                parts.push(format!("{name}={v}"));
            }
        }
        if parts.is_empty() {
            self.parameter.clone()
        } else {
            format!("{}[{}]", self.parameter, parts.join(","))
        }
    }
}

/// Every reachable natural-scale parameter plus the derived abundances.
pub fn natural_quantities(params: &ParameterSet, design: &StudyDesign) -> Vec<Quantity> {
    let mut out = vec![Quantity::new("N", params.super_population)];
    for (t, n) in expected_abundance(params, design).into_iter().enumerate() {
        out.push(Quantity::new("N(t)", n).year(t));
    }
    for (t, &r) in params.recruitment.iter().enumerate() {
        out.push(Quantity::new("r", r).year(t));
    }
    for t in 0..design.periods().saturating_sub(1) {
        for a in 1..=survival_ages(design, t) {
            out.push(Quantity::new("s", params.survival[t][a - 1]).year(t).age(a));
        }
    }
    for t in 0..design.periods() {
        let mask = design.mask(t);
        for g in (0..design.states).filter(|&g| mask[g]) {
            out.push(Quantity::new("alpha", params.initial_state[t][g]).year(t).state(g));
        }
        for i in (0..design.states).filter(|&g| mask[g]) {
            for j in (0..design.states).filter(|&g| mask[g]) {
                out.push(
                    Quantity::new("psi", params.transition[t][i][j])
                        .year(t)
                        .state(i)
                        .to(j),
                );
            }
        }
        for (k, &b) in params.arrival[t].iter().enumerate() {
            out.push(Quantity::new("beta", b).year(t).occasion(k));
        }
        for k in 0..design.occasions[t] - 1 {
            for a in 1..=retention_ages(design, t, k) {
                out.push(
                    Quantity::new("phi", params.retention[t][k][a - 1])
                        .year(t)
                        .occasion(k)
                        .age(a),
                );
            }
        }
        for k in 0..design.occasions[t] {
            for g in (0..design.states).filter(|&g| mask[g]) {
                for a in 1..=capture_ages(design, t, k) {
                    out.push(
                        Quantity::new("p", params.capture[t][k][g][a - 1])
                            .year(t)
                            .occasion(k)
                            .state(g)
                            .age(a),
                    );
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Bootstrap

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub seed: u64,
    /// Fit settings for each replicate; replicates start from the original
    /// estimate.
    pub fit: FitConfig,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        BootstrapConfig {
            replicates: 100,
            seed: 1,
            fit: FitConfig {
                starts: 1,
                ..FitConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replicate {
    pub index: usize,
    pub converged: bool,
    pub loglik: f64,
    /// Values in the order of [`BootstrapResult::summary`].
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub quantity: Quantity,
    /// Empirical standard deviation over converged replicates; `None` with
    /// fewer than two.
    pub se: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
}

impl Summary {
    /// Estimate with its standard error, e.g. `0.82 (SE 0.025)`.
    pub fn display(&self) -> String {
        format_estimate(self.quantity.value, self.se)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub replicates: usize,
    pub failures: usize,
    pub fit: FitResult,
    pub summary: Vec<Summary>,
    pub draws: Vec<Replicate>,
}

/// Formats an estimate with two significant digits of standard error,
/// the estimate rounded one decimal place coarser than the SE.
pub fn format_estimate(value: f64, se: Option<f64>) -> String {
    match se {
        Some(se) if se > 0.0 && se.is_finite() => {
            let digits = (1 - se.log10().floor() as i32).max(0) as usize;
            let est_digits = digits.saturating_sub(1);
            format!("{value:.est_digits$} (SE {se:.digits$})")
        }
        Some(se) if se == 0.0 => format!("{value} (SE 0)"),
        _ => format!("{value} (SE undefined)"),
    }
}

/// Type-7 sample quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn resample(dataset: &Dataset, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let individuals = dataset.individuals();
    let n = individuals.len();
    let rows: Vec<Vec<u8>> = (0..n)
        .map(|_| individuals[rng.random_range(0..n)].to_vec())
        .collect();
    Dataset::from_individuals(dataset.design.clone(), rows)
}

/// Nonparametric bootstrap over individuals.
///
/// Replicate `i` resamples with a ChaCha8 stream `i` of `seed`, refits from
/// the original estimate and records every natural-scale quantity.
/// Non-converged replicates are counted in `failures` and excluded from
/// the standard errors and intervals.
pub fn bootstrap(
    dataset: &Dataset,
    structure: &ModelStructure,
    original: &FitResult,
    config: &BootstrapConfig,
) -> Result<BootstrapResult> {
    if config.replicates == 0 {
        return Err(Error::Input("bootstrap needs at least one replicate".into()));
    }
    let quantities = natural_quantities(&original.params_hat, &original.design);
    let draws: Vec<Replicate> = (0..config.replicates)
        .into_par_iter()
        .map(|i| -> Result<Replicate> {
            let mut rng = start_rng(config.seed, i as u64);
            let data = resample(dataset, &mut rng)?;
            let fit_config = FitConfig {
                init: Init::Theta(original.theta_hat.clone()),
                seed: rng.random(),
                ..config.fit.clone()
            };
            Ok(match fit(&data, structure, &fit_config) {
                Ok(f) => Replicate {
                    index: i,
                    converged: f.converged,
                    loglik: f.loglik,
                    values: natural_quantities(&f.params_hat, &f.design)
                        .into_iter()
                        .map(|q| q.value)
                        .collect(),
                },
                Err(e) => {
                    log::warn!("bootstrap replicate {i} failed: {e}");
                    Replicate {
                        index: i,
                        converged: false,
                        loglik: f64::NAN,
                        values: Vec::new(),
                    }
                }
            })
        })
        .collect::<Result<_>>()?;

    let good: Vec<&Replicate> = draws.iter().filter(|r| r.converged).collect();
    let summary = quantities
        .into_iter()
        .enumerate()
        .map(|(j, quantity)| {
            let mut v: Vec<f64> = good.iter().map(|r| r.values[j]).collect();
            v.sort_by(f64::total_cmp);
            let (se, ci_low, ci_high) = if v.len() >= 2 {
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                let var =
                    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
                (
                    Some(var.sqrt()),
                    Some(quantile(&v, 0.025)),
                    Some(quantile(&v, 0.975)),
                )
            } else {
                (None, None, None)
            };
            Summary {
                quantity,
                se,
                ci_low,
                ci_high,
            }
        })
        .collect();
    Ok(BootstrapResult {
        replicates: config.replicates,
        failures: draws.len() - good.len(),
        fit: original.clone(),
        summary,
        draws,
    })
}

// ---------------------------------------------------------------------------
// Step-up selection

/// Replacement of one parameter's specification, e.g. `p = year*state`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Move {
    pub key: String,
    pub spec: String,
}

impl Move {
    pub fn new(key: &str, spec: &str) -> Self {
        Move {
            key: key.trim().to_string(),
            spec: spec.trim().to_string(),
        }
    }

    pub fn label(&self) -> String {
        format!("{} = {}", self.key, self.spec)
    }

    pub fn apply(&self, structure: &ModelStructure) -> Result<ModelStructure> {
        let mut s = structure.clone();
        s.set(&self.key, &self.spec)?;
        Ok(s)
    }
}

impl std::str::FromStr for Move {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Structure(format!("move '{s}' is not 'key = spec'")))?;
        let m = Move::new(k, v);
        m.apply(&ModelStructure::default())?;
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub round: usize,
    /// `None` for the starting structure.
    pub step: Option<String>,
    pub structure: ModelStructure,
    pub loglik: f64,
    pub aic: f64,
    pub n_params: usize,
    pub converged: bool,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub best: ModelStructure,
    pub best_fit: FitResult,
    pub trace: Vec<TraceEntry>,
}

/// Greedy forward AIC search: each round fits the current structure plus
/// every unused move, accepts the move with the lowest AIC if it beats the
/// current AIC, and stops when none does. Non-converged fits are recorded
/// in the trace but never accepted.
pub fn step_up_selection(
    dataset: &Dataset,
    moves: &[Move],
    base: &ModelStructure,
    config: &FitConfig,
) -> Result<Selection> {
    let mut current = base.clone();
    let mut current_fit = fit(dataset, &current, config)?;
    let mut trace = vec![TraceEntry {
        round: 0,
        step: None,
        structure: current.clone(),
        loglik: current_fit.loglik,
        aic: current_fit.aic,
        n_params: current_fit.n_params,
        converged: current_fit.converged,
        accepted: true,
    }];
    let score = |f: &FitResult| if f.converged { f.aic } else { f64::INFINITY };
    let mut remaining: Vec<&Move> = moves.iter().collect();
    let mut round = 0;
    while !remaining.is_empty() {
        round += 1;
        let mut candidates = Vec::new();
        for (i, m) in remaining.iter().enumerate() {
            let s = m.apply(&current)?;
            if s == current {
                continue;
            }
            let f = fit(dataset, &s, config)?;
            trace.push(TraceEntry {
                round,
                step: Some(m.label()),
                structure: s.clone(),
                loglik: f.loglik,
                aic: f.aic,
                n_params: f.n_params,
                converged: f.converged,
                accepted: false,
            });
            candidates.push((i, s, f, trace.len() - 1));
        }
        let best = candidates
            .into_iter()
            .filter(|c| c.2.converged)
            .min_by(|a, b| a.2.aic.total_cmp(&b.2.aic));
        match best {
            Some((i, s, f, at)) if f.aic < score(&current_fit) => {
                trace[at].accepted = true;
                remaining.remove(i);
                current = s;
                current_fit = f;
            }
            _ => break,
        }
    }
    Ok(Selection {
        best: current,
        best_fit: current_fit,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn estimate_formatting() {
        assert_eq!(format_estimate(0.82, Some(0.025)), "0.82 (SE 0.025)");
        assert_eq!(format_estimate(107.2, Some(3.4)), "107 (SE 3.4)");
        assert_eq!(format_estimate(0.5, None), "0.5 (SE undefined)");
    }

    #[test]
    fn type7_quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert!((quantile(&v, 0.5) - 2.5).abs() < 1e-15);
        assert!((quantile(&v, 0.025) - 1.075).abs() < 1e-12);
    }

    #[test]
    fn moves_parse_and_apply() {
        let m: Move = "p = year*state".parse().unwrap();
        let s = m.apply(&ModelStructure::constant()).unwrap();
        assert_eq!(s.spec_of("p").unwrap(), "year*state");
        assert!("p year".parse::<Move>().is_err());
        assert!("q = 1".parse::<Move>().is_err());
    }

    #[test]
    fn abundance_examples() {
        let design = StudyDesign::new(vec![2, 2], 1).unwrap();
        let mut p = ParameterSet::uniform(&design, 50.0);
        p.recruitment = vec![1.0, 0.0];
        p.survival = vec![vec![1.0]];
        let q = natural_quantities(&p, &design);
        assert_eq!(q[1].value, 50.0);
        assert_eq!(q[2].value, 50.0);
        assert_eq!(q[2].label(), "N(t)[year=2]");
    }
}
