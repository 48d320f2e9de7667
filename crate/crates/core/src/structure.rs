//! Model structures: which parameters are constant, which vary by year,
//! occasion, age or state, and which follow logistic regressions.
//!
//! A structure is written as one `key = spec` entry per parameter,
//! separated by newlines or `;`:
//!
//! ```text
//! r     = year                          # uniform | 1 | year | fixed(..)
//! s     = 1                             # linear predictor on the logit scale
//! beta  = logistic(1 + slope(occ|year)) # uniform | free | logistic(..) | fixed(..)
//! phi   = occ + slope(age)
//! p     = year*state
//! alpha = 1                             # uniform | 1 | year | fixed(..)
//! psi   = 1
//! ```
//!
//! A linear predictor is a sum of terms. A factor term such as `year*state`
//! contributes one coefficient per combination of its dimensions (`1` is a
//! single intercept). `slope(cov|dims)` contributes `coef[dims] * cov`,
//! where the covariate is the year `t`, the occasion `k`, or `age - 1`.
//! Coefficients are only created for cells that some reachable parameter
//! entry uses, so e.g. `year*state` has no capture coefficient for a state
//! in a year where that state does not exist.
//!
//! Simplexes use the multinomial logit with the last (available) category
//! as reference, and N is written as `n + exp(theta_N)`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::transform::{expit, log_ratios, logit, masked_softmax, softmax_with_reference};
use crate::model::{
    capture_ages, normalized_logistic_weights, retention_ages, survival_ages, ParameterSet,
    StudyDesign,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Dim {
    Year,
    Occasion,
    Age,
    State,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Covariate {
    Year,
    Occasion,
    /// Age minus one, so the intercept refers to age 1.
    Age,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Term {
    /// One coefficient per cell of the listed dimensions; empty is an intercept.
    Factor(Vec<Dim>),
    Slope { covariate: Covariate, by: Vec<Dim> },
}

/// Specification of a probability-valued parameter (s, phi, p).
#[derive(Debug, Clone, PartialEq)]
pub enum LinearSpec {
    Fixed(f64),
    Logit(Vec<Term>),
}

/// Specification of a simplex-valued parameter (r, alpha, Psi).
#[derive(Debug, Clone, PartialEq)]
pub enum SimplexSpec {
    Uniform,
    /// One set of logits shared across years. For `r` this is the same as uniform.
    Constant,
    Year,
    /// Values applied in every year (for Psi, G x G row-major).
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrivalSpec {
    Uniform,
    /// A free simplex over occasions for each year.
    Free,
    /// Normalized `expit` weights of a linear predictor over (year, occasion).
    Logistic(Vec<Term>),
    Fixed(Vec<f64>),
}

/// Parameter keys accepted by the structure grammar, in canonical order.
pub const PARAMETER_KEYS: [&str; 7] = ["r", "s", "beta", "phi", "p", "alpha", "psi"];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelStructure {
    pub recruitment: SimplexSpec,
    pub survival: LinearSpec,
    pub arrival: ArrivalSpec,
    pub retention: LinearSpec,
    pub capture: LinearSpec,
    pub initial_state: SimplexSpec,
    pub transition: SimplexSpec,
}

impl Default for ModelStructure {
    /// Everything constant and shared across years.
    fn default() -> Self {
        let intercept = LinearSpec::Logit(vec![Term::Factor(vec![])]);
        ModelStructure {
            recruitment: SimplexSpec::Uniform,
            survival: intercept.clone(),
            arrival: ArrivalSpec::Uniform,
            retention: intercept.clone(),
            capture: intercept,
            initial_state: SimplexSpec::Constant,
            transition: SimplexSpec::Constant,
        }
    }
}

impl ModelStructure {
    pub fn constant() -> Self {
        Self::default()
    }

    /// The structure that generated the simulation scenario: year-dependent
    /// recruitment, constant survival, logistic arrival with a shared
    /// intercept and year-specific slope, retention with occasion effects
    /// and a linear age term, state-dependent capture, constant alpha and Psi.
    pub fn scenario() -> Self {
        "r = year; s = 1; beta = logistic(1 + slope(occ|year)); phi = occ + slope(age); \
         p = state; alpha = 1; psi = 1"
            .parse()
            .expect("built-in structure")
    }

    /// The scenario structure for one period analysed on its own.
    pub fn single_period() -> Self {
        "r = uniform; s = 1; beta = logistic(1 + slope(occ)); phi = occ + slope(age); \
         p = state; alpha = 1; psi = 1"
            .parse()
            .expect("built-in structure")
    }

    /// The shape selected for the long-term newt study: year-dependent
    /// recruitment, constant survival, arrival and retention regressions
    /// with a shared intercept and year-specific slopes, year x state
    /// capture, and year-specific alpha and Psi wherever a second state exists.
    pub fn newt() -> Self {
        "r = year; s = 1; beta = logistic(1 + slope(occ|year)); phi = 1 + slope(occ|year); \
         p = year*state; alpha = year; psi = year"
            .parse()
            .expect("built-in structure")
    }

    /// One free coefficient per parameter entry.
    pub fn saturated() -> Self {
        "r = year; s = year*age; beta = free; phi = year*occ*age; p = year*occ*age*state; \
         alpha = year; psi = year"
            .parse()
            .expect("built-in structure")
    }

    /// Looks up a built-in structure by name.
    pub fn named(name: &str) -> Option<Self> {
        match name {
            "constant" => Some(Self::constant()),
            "generating" | "scenario" => Some(Self::scenario()),
            "single-period" => Some(Self::single_period()),
            "newt" => Some(Self::newt()),
            "saturated" => Some(Self::saturated()),
            _ => None,
        }
    }

    /// Replaces one parameter's specification, e.g. `set("p", "year*state")`.
    pub fn set(&mut self, key: &str, spec: &str) -> Result<()> {
        let spec = spec.trim();
        match key.trim() {
            "r" => self.recruitment = spec.parse()?,
            "s" => self.survival = spec.parse()?,
            "beta" => self.arrival = spec.parse()?,
            "phi" => self.retention = spec.parse()?,
            "p" => self.capture = spec.parse()?,
            "alpha" => self.initial_state = spec.parse()?,
            "psi" => self.transition = spec.parse()?,
            other => {
                return Err(Error::Structure(format!(
                    "unknown parameter '{other}', expected one of {}",
                    PARAMETER_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Text form of one parameter's specification.
    pub fn spec_of(&self, key: &str) -> Option<String> {
        Some(match key {
            "r" => self.recruitment.to_string(),
            "s" => self.survival.to_string(),
            "beta" => self.arrival.to_string(),
            "phi" => self.retention.to_string(),
            "p" => self.capture.to_string(),
            "alpha" => self.initial_state.to_string(),
            "psi" => self.transition.to_string(),
            _ => return None,
        })
    }

    pub fn compile(&self, design: &StudyDesign) -> Result<CompiledStructure> {
        CompiledStructure::new(self, design)
    }
}

/// `expand_structure` as a free function: compiles and expands in one call.
pub fn expand_structure(
    structure: &ModelStructure,
    theta: &[f64],
    design: &StudyDesign,
    observed: u64,
) -> Result<ParameterSet> {
    structure.compile(design)?.expand(theta, observed)
}

// ---------------------------------------------------------------------------
// Text grammar

fn split_top_level(s: &str, sep: char) -> Vec<&str> {
    let mut depth = 0i32;
    let mut start = 0;
    let mut parts = Vec::new();
    for (i, c) in s.char_indices() {
        match c {
            '(' => depth += 1,
            ')' => depth -= 1,
            c if c == sep && depth == 0 => {
                parts.push(s[start..i].trim());
                start = i + c.len_utf8();
            }
            _ => {}
        }
    }
    parts.push(s[start..].trim());
    parts
}

fn call_args<'a>(s: &'a str, name: &str) -> Option<&'a str> {
    let rest = s.strip_prefix(name)?.trim_start();
    rest.strip_prefix('(')?.strip_suffix(')').map(str::trim)
}

fn parse_numbers(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| Error::Structure(format!("'{}' is not a number", x.trim())))
        })
        .collect()
}

fn fmt_numbers(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl Dim {
    fn as_str(self) -> &'static str {
        match self {
            Dim::Year => "year",
            Dim::Occasion => "occ",
            Dim::Age => "age",
            Dim::State => "state",
        }
    }
}

impl FromStr for Dim {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "year" => Ok(Dim::Year),
            "occ" | "occasion" => Ok(Dim::Occasion),
            "age" => Ok(Dim::Age),
            "state" => Ok(Dim::State),
            other => Err(Error::Structure(format!("unknown dimension '{other}'"))),
        }
    }
}

impl FromStr for Covariate {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "year" => Ok(Covariate::Year),
            "occ" | "occasion" => Ok(Covariate::Occasion),
            "age" => Ok(Covariate::Age),
            other => Err(Error::Structure(format!("unknown covariate '{other}'"))),
        }
    }
}

impl fmt::Display for Covariate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Covariate::Year => "year",
            Covariate::Occasion => "occ",
            Covariate::Age => "age",
        })
    }
}

fn parse_dims(s: &str) -> Result<Vec<Dim>> {
    if s.trim() == "1" {
        return Ok(Vec::new());
    }
    let mut dims = s
        .split('*')
        .map(str::parse)
        .collect::<Result<Vec<Dim>>>()?;
    dims.sort();
    let before = dims.len();
    dims.dedup();
    if dims.len() != before {
        return Err(Error::Structure(format!("repeated dimension in '{s}'")));
    }
    Ok(dims)
}

fn fmt_dims(dims: &[Dim]) -> String {
    if dims.is_empty() {
        "1".to_string()
    } else {
        dims.iter().map(|d| d.as_str()).collect::<Vec<_>>().join("*")
    }
}

impl FromStr for Term {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(inner) = call_args(s, "slope") {
            let mut parts = inner.splitn(2, '|');
            let covariate = parts.next().unwrap_or("").parse()?;
            let by = match parts.next() {
                Some(d) => parse_dims(d)?,
                None => Vec::new(),
            };
            return Ok(Term::Slope { covariate, by });
        }
        Ok(Term::Factor(parse_dims(s)?))
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Factor(d) => f.write_str(&fmt_dims(d)),
            Term::Slope { covariate, by } if by.is_empty() => write!(f, "slope({covariate})"),
            Term::Slope { covariate, by } => write!(f, "slope({covariate}|{})", fmt_dims(by)),
        }
    }
}

fn parse_terms(s: &str) -> Result<Vec<Term>> {
    let terms = split_top_level(s, '+')
        .into_iter()
        .map(str::parse)
        .collect::<Result<Vec<Term>>>()?;
    for (i, t) in terms.iter().enumerate() {
        if terms[..i].contains(t) {
            return Err(Error::Structure(format!("term '{t}' appears twice")));
        }
    }
    Ok(terms)
}

fn fmt_terms(terms: &[Term]) -> String {
    terms.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" + ")
}

impl FromStr for LinearSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(inner) = call_args(s, "fixed") {
            let v = parse_numbers(inner)?;
            if v.len() != 1 || !(0.0..=1.0).contains(&v[0]) {
                return Err(Error::Structure(format!("'{s}' needs one probability")));
            }
            return Ok(LinearSpec::Fixed(v[0]));
        }
        Ok(LinearSpec::Logit(parse_terms(s)?))
    }
}

impl fmt::Display for LinearSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LinearSpec::Fixed(v) => write!(f, "fixed({v})"),
            LinearSpec::Logit(t) => f.write_str(&fmt_terms(t)),
        }
    }
}

impl FromStr for SimplexSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(inner) = call_args(s, "fixed") {
            return Ok(SimplexSpec::Fixed(parse_numbers(inner)?));
        }
        match s {
            "uniform" => Ok(SimplexSpec::Uniform),
            "1" => Ok(SimplexSpec::Constant),
            "year" => Ok(SimplexSpec::Year),
            other => Err(Error::Structure(format!(
                "'{other}' is not a simplex structure (uniform, 1, year, fixed(..))"
            ))),
        }
    }
}

impl fmt::Display for SimplexSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimplexSpec::Uniform => f.write_str("uniform"),
            SimplexSpec::Constant => f.write_str("1"),
            SimplexSpec::Year => f.write_str("year"),
            SimplexSpec::Fixed(v) => write!(f, "fixed({})", fmt_numbers(v)),
        }
    }
}

impl FromStr for ArrivalSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(inner) = call_args(s, "fixed") {
            return Ok(ArrivalSpec::Fixed(parse_numbers(inner)?));
        }
        if let Some(inner) = call_args(s, "logistic") {
            return Ok(ArrivalSpec::Logistic(parse_terms(inner)?));
        }
        match s {
            "uniform" => Ok(ArrivalSpec::Uniform),
            "free" => Ok(ArrivalSpec::Free),
            other => Err(Error::Structure(format!(
                "'{other}' is not an arrival structure (uniform, free, logistic(..), fixed(..))"
            ))),
        }
    }
}

impl fmt::Display for ArrivalSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArrivalSpec::Uniform => f.write_str("uniform"),
            ArrivalSpec::Free => f.write_str("free"),
            ArrivalSpec::Logistic(t) => write!(f, "logistic({})", fmt_terms(t)),
            ArrivalSpec::Fixed(v) => write!(f, "fixed({})", fmt_numbers(v)),
        }
    }
}

impl FromStr for ModelStructure {
    type Err = Error;

    /// Parses `key = spec` entries; unspecified parameters keep the
    /// constant-model default.
    fn from_str(s: &str) -> Result<Self> {
        let mut out = ModelStructure::default();
        let mut seen = Vec::new();
        for line in s.lines() {
            let line = line.split('#').next().unwrap_or("");
            for entry in line.split(';') {
                let entry = entry.trim();
                if entry.is_empty() {
                    continue;
                }
                let (key, spec) = entry.split_once('=').ok_or_else(|| {
                    Error::Structure(format!("expected 'key = spec', found '{entry}'"))
                })?;
                let key = key.trim().to_string();
                if seen.contains(&key) {
                    return Err(Error::Structure(format!("'{key}' specified twice")));
                }
                out.set(&key, spec)?;
                seen.push(key);
            }
        }
        Ok(out)
    }
}

impl fmt::Display for ModelStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let entries: Vec<String> = PARAMETER_KEYS
            .iter()
            .map(|k| format!("{k} = {}", self.spec_of(k).unwrap_or_default()))
            .collect();
        f.write_str(&entries.join("; "))
    }
}

impl Serialize for ModelStructure {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ModelStructure {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

// ---------------------------------------------------------------------------
// Compilation

/// Position of a parameter entry; unused coordinates are zero.
#[derive(Debug, Clone, Copy, Default)]
struct Coord {
    year: usize,
    occ: usize,
    age: usize,
    state: usize,
}

impl Coord {
    fn dim(&self, d: Dim) -> usize {
        match d {
            Dim::Year => self.year,
            Dim::Occasion => self.occ,
            Dim::Age => self.age,
            Dim::State => self.state,
        }
    }

    fn covariate(&self, c: Covariate) -> f64 {
        match c {
            Covariate::Year => self.year as f64,
            Covariate::Occasion => self.occ as f64,
            Covariate::Age => self.age as f64 - 1.0,
        }
    }
}

/// Linear predictor of each entry as `(theta index, multiplier)` pairs.
#[derive(Debug, Clone)]
enum LinearBlock {
    Fixed(f64),
    Terms {
        rows: Vec<Vec<(usize, f64)>>,
        /// Entries that no individual can occupy; they expand to zero.
        structural_zero: Vec<bool>,
        first: usize,
        len: usize,
    },
}

impl LinearBlock {
    fn compile(
        spec: &LinearSpec,
        param: &str,
        coords: &[(Coord, bool)],
        allowed_dims: &[Dim],
        allowed_covariates: &[Covariate],
        names: &mut Vec<String>,
    ) -> Result<Self> {
        let terms = match spec {
            LinearSpec::Fixed(v) => return Ok(LinearBlock::Fixed(*v)),
            LinearSpec::Logit(t) => t,
        };
        let first = names.len();
        let mut rows = vec![Vec::new(); coords.len()];
        for term in terms {
            let (dims, covariate) = match term {
                Term::Factor(d) => (d, None),
                Term::Slope { covariate, by } => (by, Some(*covariate)),
            };
            if let Some(d) = dims.iter().find(|d| !allowed_dims.contains(d)) {
                return Err(Error::Structure(format!(
                    "{param} cannot depend on {}",
                    d.as_str()
                )));
            }
            if let Some(c) = covariate.filter(|c| !allowed_covariates.contains(c)) {
                return Err(Error::Structure(format!("{param} has no covariate {c}")));
            }
            let mut cells: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
            for (i, (c, reachable)) in coords.iter().enumerate() {
                if *reachable {
                    let key: Vec<usize> = dims.iter().map(|&d| c.dim(d)).collect();
                    cells.entry(key).or_default().push(i);
                }
            }
            for (key, members) in cells {
                let idx = names.len();
                let label: Vec<String> = dims
                    .iter()
                    .zip(&key)
                    .map(|(d, v)| format!("{}={v}", d.as_str()))
                    .collect();
                names.push(if label.is_empty() {
                    format!("{param}:{term}")
                } else {
                    format!("{param}:{term}[{}]", label.join(","))
                });
                for i in members {
                    let m = covariate.map_or(1.0, |c| coords[i].0.covariate(c));
                    rows[i].push((idx, m));
                }
            }
        }
        Ok(LinearBlock::Terms {
            rows,
            structural_zero: coords.iter().map(|(_, r)| !r).collect(),
            first,
            len: names.len() - first,
        })
    }

    fn predictors(&self, theta: &[f64]) -> Vec<f64> {
        match self {
            LinearBlock::Fixed(_) => unreachable!("fixed blocks have no predictor"),
            LinearBlock::Terms { rows, .. } => rows
                .iter()
                .map(|r| r.iter().map(|&(i, m)| theta[i] * m).sum())
                .collect(),
        }
    }

    /// Probabilities for every entry, in coordinate order.
    fn probabilities(&self, theta: &[f64], count: usize) -> Vec<f64> {
        match self {
            LinearBlock::Fixed(v) => vec![*v; count],
            LinearBlock::Terms {
                structural_zero, ..
            } => self
                .predictors(theta)
                .into_iter()
                .zip(structural_zero)
                .map(|(lp, &z)| if z { 0.0 } else { expit(lp) })
                .collect(),
        }
    }

    /// Least-squares fit of the coefficients to target predictors.
    fn invert(&self, targets: &[f64], theta: &mut [f64], param: &str) -> Result<()> {
        let LinearBlock::Terms {
            rows,
            structural_zero,
            first,
            len,
        } = self
        else {
            return Ok(());
        };
        if *len == 0 {
            return Ok(());
        }
        let used: Vec<usize> = (0..rows.len()).filter(|&i| !structural_zero[i]).collect();
        let mut x = DMatrix::<f64>::zeros(used.len(), *len);
        let mut y = DVector::<f64>::zeros(used.len());
        for (r, &i) in used.iter().enumerate() {
            if !targets[i].is_finite() {
                return Err(Error::NotRepresentable(format!(
                    "{param} has a probability at 0 or 1"
                )));
            }
            y[r] = targets[i];
            for &(j, m) in &rows[i] {
                x[(r, j - first)] += m;
            }
        }
        let svd = x.svd(true, true);
        let sol = svd
            .solve(&y, 1e-12)
            .map_err(|e| Error::NotRepresentable(format!("{param}: {e}")))?;
        theta[*first..first + len].copy_from_slice(sol.as_slice());
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum SimplexBlock {
    Uniform,
    /// Shared logits; `first` indexes `rows * (categories - 1)` values.
    Constant { first: usize },
    /// Per-year logits over available categories: `starts[t]` per row.
    Year { starts: Vec<Vec<Option<usize>>> },
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone)]
enum ArrivalBlock {
    Uniform,
    Free { starts: Vec<usize> },
    Logistic(LinearBlock),
    Fixed(Vec<f64>),
}

/// A structure bound to a study design, ready to map parameter vectors.
#[derive(Debug, Clone)]
pub struct CompiledStructure {
    structure: ModelStructure,
    design: StudyDesign,
    names: Vec<String>,
    recruitment: SimplexBlock,
    survival: LinearBlock,
    survival_coords: usize,
    arrival: ArrivalBlock,
    arrival_coords: Vec<(Coord, bool)>,
    retention: LinearBlock,
    retention_coords: usize,
    capture: LinearBlock,
    capture_coords: usize,
    initial_state: SimplexBlock,
    transition: SimplexBlock,
}

fn survival_coords(design: &StudyDesign) -> Vec<(Coord, bool)> {
    let mut out = Vec::new();
    for t in 0..design.periods().saturating_sub(1) {
        for age in 1..=survival_ages(design, t) {
            out.push((
                Coord {
                    year: t + 1,
                    age,
                    ..Coord::default()
                },
                true,
            ));
        }
    }
    out
}

fn retention_coords(design: &StudyDesign) -> Vec<(Coord, bool)> {
    let mut out = Vec::new();
    for t in 0..design.periods() {
        for k in 0..design.occasions[t] - 1 {
            for age in 1..=retention_ages(design, t, k) {
                out.push((
                    Coord {
                        year: t + 1,
                        occ: k + 1,
                        age,
                        state: 0,
                    },
                    true,
                ));
            }
        }
    }
    out
}

fn capture_coords(design: &StudyDesign) -> Vec<(Coord, bool)> {
    let mut out = Vec::new();
    for t in 0..design.periods() {
        for k in 0..design.occasions[t] {
            for g in 1..=design.states {
                let reachable = design.is_available(t, g);
                for age in 1..=capture_ages(design, t, k) {
                    out.push((
                        Coord {
                            year: t + 1,
                            occ: k + 1,
                            age,
                            state: g,
                        },
                        reachable,
                    ));
                }
            }
        }
    }
    out
}

fn arrival_coords(design: &StudyDesign) -> Vec<(Coord, bool)> {
    let mut out = Vec::new();
    for t in 0..design.periods() {
        for k in 0..design.occasions[t] {
            out.push((
                Coord {
                    year: t + 1,
                    occ: k + 1,
                    ..Coord::default()
                },
                true,
            ));
        }
    }
    out
}

fn compile_simplex(
    spec: &SimplexSpec,
    param: &str,
    rows: usize,
    categories: usize,
    design: &StudyDesign,
    masks: &[Vec<bool>],
    row_reachable: impl Fn(usize, usize) -> bool,
    names: &mut Vec<String>,
) -> Result<SimplexBlock> {
    Ok(match spec {
        SimplexSpec::Uniform => SimplexBlock::Uniform,
        SimplexSpec::Constant if param == "r" => SimplexBlock::Uniform,
        SimplexSpec::Constant => {
            let first = names.len();
            for i in 0..rows {
                for j in 0..categories - 1 {
                    names.push(if rows == 1 {
                        format!("{param}:1[state={}]", j + 1)
                    } else {
                        format!("{param}:1[from={},to={}]", i + 1, j + 1)
                    });
                }
            }
            SimplexBlock::Constant { first }
        }
        SimplexSpec::Year => {
            let mut starts = Vec::with_capacity(masks.len());
            for (t, mask) in masks.iter().enumerate() {
                let free = mask.iter().filter(|&&b| b).count().saturating_sub(1);
                let mut per_row = Vec::with_capacity(rows);
                for i in 0..rows {
                    if free == 0 || !row_reachable(t, i) {
                        per_row.push(None);
                        continue;
                    }
                    per_row.push(Some(names.len()));
                    let avail: Vec<usize> = (0..categories).filter(|&j| mask[j]).collect();
                    for &j in &avail[..avail.len() - 1] {
                        names.push(match (param, rows) {
                            ("r", _) => format!("r:year[year={}]", j + 1),
                            (_, 1) => format!("{param}:year[year={},state={}]", t + 1, j + 1),
                            _ => format!(
                                "{param}:year[year={},from={},to={}]",
                                t + 1,
                                i + 1,
                                j + 1
                            ),
                        });
                    }
                }
                starts.push(per_row);
            }
            SimplexBlock::Year { starts }
        }
        SimplexSpec::Fixed(v) => {
            if v.len() != rows * categories {
                return Err(Error::dim(
                    format!("fixed {param}"),
                    rows * categories,
                    v.len(),
                ));
            }
            if v.iter().any(|x| !(0.0..=1.0).contains(x)) {
                return Err(Error::Structure(format!("fixed {param} has a non-probability")));
            }
            for (t, mask) in masks.iter().enumerate() {
                for i in 0..rows {
                    if !row_reachable(t, i) {
                        continue;
                    }
                    let row = &v[i * categories..(i + 1) * categories];
                    let mass: f64 = row.iter().zip(mask).filter(|(_, &m)| m).map(|(x, _)| x).sum();
                    if mass <= 0.0 {
                        return Err(Error::Structure(format!(
                            "fixed {param} puts no mass on the states available in period {}",
                            t + 1
                        )));
                    }
                }
            }
            let _ = design;
            SimplexBlock::Fixed(v.clone())
        }
    })
}

/// Expands a simplex block into per-period rows.
fn expand_simplex(
    block: &SimplexBlock,
    theta: &[f64],
    rows: usize,
    categories: usize,
    masks: &[Vec<bool>],
) -> Vec<Vec<Vec<f64>>> {
    masks
        .iter()
        .enumerate()
        .map(|(t, mask)| {
            let m = mask.iter().filter(|&&b| b).count() as f64;
            let uniform: Vec<f64> = mask.iter().map(|&b| if b { 1.0 / m } else { 0.0 }).collect();
            (0..rows)
                .map(|i| match block {
                    SimplexBlock::Uniform => uniform.clone(),
                    SimplexBlock::Constant { first } => {
                        let start = first + i * (categories - 1);
                        let mut logits = theta[start..start + categories - 1].to_vec();
                        logits.push(0.0);
                        masked_softmax(&logits, mask)
                    }
                    SimplexBlock::Year { starts } => match starts[t][i] {
                        None => uniform.clone(),
                        Some(start) => {
                            let avail: Vec<usize> =
                                (0..categories).filter(|&j| mask[j]).collect();
                            let sm = softmax_with_reference(
                                &theta[start..start + avail.len() - 1],
                            );
                            let mut out = vec![0.0; categories];
                            for (&j, x) in avail.iter().zip(sm) {
                                out[j] = x;
                            }
                            out
                        }
                    },
                    SimplexBlock::Fixed(v) => {
                        let row = &v[i * categories..(i + 1) * categories];
                        let mut out: Vec<f64> = row
                            .iter()
                            .zip(mask)
                            .map(|(&x, &b)| if b { x } else { 0.0 })
                            .collect();
                        let total: f64 = out.iter().sum();
                        out.iter_mut().for_each(|x| *x /= total);
                        out
                    }
                })
                .collect()
        })
        .collect()
}

/// Fills `theta` so that `block` reproduces `values` (per period, per row).
fn invert_simplex(
    block: &SimplexBlock,
    values: &[Vec<Vec<f64>>],
    categories: usize,
    masks: &[Vec<bool>],
    theta: &mut [f64],
) {
    match block {
        SimplexBlock::Uniform | SimplexBlock::Fixed(_) => {}
        SimplexBlock::Constant { first } => {
            let rows = values.first().map_or(0, Vec::len);
            for i in 0..rows {
                for j in 0..categories - 1 {
                    // log-ratio against the last category, from any period
                    // where both are available and the row is in use
                    let t = (0..masks.len()).find(|&t| {
                        masks[t][j] && masks[t][categories - 1] && (rows == 1 || masks[t][i])
                    });
                    theta[first + i * (categories - 1) + j] = t
                        .map(|t| (values[t][i][j] / values[t][i][categories - 1]).ln())
                        .unwrap_or(0.0);
                }
            }
        }
        SimplexBlock::Year { starts } => {
            for (t, per_row) in starts.iter().enumerate() {
                for (i, start) in per_row.iter().enumerate() {
                    if let Some(start) = start {
                        let avail: Vec<f64> = (0..categories)
                            .filter(|&j| masks[t][j])
                            .map(|j| values[t][i][j])
                            .collect();
                        let lr = log_ratios(&avail);
                        theta[*start..start + lr.len()].copy_from_slice(&lr);
                    }
                }
            }
        }
    }
}

impl CompiledStructure {
    fn new(structure: &ModelStructure, design: &StudyDesign) -> Result<Self> {
        design.validate()?;
        let t_count = design.periods();
        let g = design.states;
        let mut names = vec!["N:log(N-n)".to_string()];

        let recruitment = compile_simplex(
            &structure.recruitment,
            "r",
            1,
            t_count,
            design,
            &[vec![true; t_count]],
            |_, _| true,
            &mut names,
        )?;

        let s_coords = survival_coords(design);
        let survival = LinearBlock::compile(
            &structure.survival,
            "s",
            &s_coords,
            &[Dim::Year, Dim::Age],
            &[Covariate::Year, Covariate::Age],
            &mut names,
        )?;

        let a_coords = arrival_coords(design);
        let arrival = match &structure.arrival {
            ArrivalSpec::Uniform => ArrivalBlock::Uniform,
            ArrivalSpec::Free => {
                let mut starts = Vec::with_capacity(t_count);
                for t in 0..t_count {
                    starts.push(names.len());
                    for k in 0..design.occasions[t] - 1 {
                        names.push(format!("beta:free[year={},occ={}]", t + 1, k + 1));
                    }
                }
                ArrivalBlock::Free { starts }
            }
            ArrivalSpec::Logistic(terms) => ArrivalBlock::Logistic(LinearBlock::compile(
                &LinearSpec::Logit(terms.clone()),
                "beta",
                &a_coords,
                &[Dim::Year, Dim::Occasion],
                &[Covariate::Year, Covariate::Occasion],
                &mut names,
            )?),
            ArrivalSpec::Fixed(v) => {
                if let Some(t) = (0..t_count).find(|&t| design.occasions[t] != v.len()) {
                    return Err(Error::dim(
                        format!("fixed beta for period {}", t + 1),
                        design.occasions[t],
                        v.len(),
                    ));
                }
                crate::model::conditional_arrival(v)
                    .map_err(|e| Error::Structure(format!("fixed beta: {e}")))?;
                ArrivalBlock::Fixed(v.clone())
            }
        };

        let r_coords = retention_coords(design);
        let retention = LinearBlock::compile(
            &structure.retention,
            "phi",
            &r_coords,
            &[Dim::Year, Dim::Occasion, Dim::Age],
            &[Covariate::Year, Covariate::Occasion, Covariate::Age],
            &mut names,
        )?;

        let p_coords = capture_coords(design);
        let capture = LinearBlock::compile(
            &structure.capture,
            "p",
            &p_coords,
            &[Dim::Year, Dim::Occasion, Dim::Age, Dim::State],
            &[Covariate::Year, Covariate::Occasion, Covariate::Age],
            &mut names,
        )?;

        let masks: Vec<Vec<bool>> = (0..t_count).map(|t| design.mask(t)).collect();
        let ever: Vec<bool> = (0..g).map(|i| masks.iter().any(|m| m[i])).collect();
        let initial_state = compile_simplex(
            &structure.initial_state,
            "alpha",
            1,
            g,
            design,
            &masks,
            |_, _| true,
            &mut names,
        )?;
        let transition = compile_simplex(
            &structure.transition,
            "psi",
            g,
            g,
            design,
            &masks,
            |t, i| masks[t][i],
            &mut names,
        )?;
        // constant Psi rows of never-available states carry no information
        if let (SimplexBlock::Constant { .. }, false) = (&transition, ever.iter().all(|&b| b)) {
            log::debug!("constant psi includes rows for states that never occur");
        }

        Ok(CompiledStructure {
            structure: structure.clone(),
            design: design.clone(),
            names,
            recruitment,
            survival,
            survival_coords: s_coords.len(),
            arrival,
            arrival_coords: a_coords,
            retention,
            retention_coords: r_coords.len(),
            capture,
            capture_coords: p_coords.len(),
            initial_state,
            transition,
        })
    }

    /// Length of the unconstrained parameter vector.
    pub fn dimension(&self) -> usize {
        self.names.len()
    }

    /// Label of each unconstrained coordinate.
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn design(&self) -> &StudyDesign {
        &self.design
    }

    pub fn structure(&self) -> &ModelStructure {
        &self.structure
    }

    /// Maps an unconstrained vector to natural-scale parameters, with
    /// `N = observed + exp(theta[0])`.
    pub fn expand(&self, theta: &[f64], observed: u64) -> Result<ParameterSet> {
        if theta.len() != self.dimension() {
            return Err(Error::dim("theta", self.dimension(), theta.len()));
        }
        let d = &self.design;
        let t_count = d.periods();
        let g = d.states;
        let masks: Vec<Vec<bool>> = (0..t_count).map(|t| d.mask(t)).collect();

        let recruitment = match &self.recruitment {
            SimplexBlock::Fixed(v) => {
                let total: f64 = v.iter().sum();
                v.iter().map(|x| x / total).collect()
            }
            block => expand_simplex(block, theta, 1, t_count, &[vec![true; t_count]])
                .swap_remove(0)
                .swap_remove(0),
        };

        let s_flat = self.survival.probabilities(theta, self.survival_coords);
        let mut it = s_flat.into_iter();
        let survival = (0..t_count.saturating_sub(1))
            .map(|t| it.by_ref().take(survival_ages(d, t)).collect())
            .collect();

        let arrival = match &self.arrival {
            ArrivalBlock::Uniform => d.occasions.iter().map(|&k| vec![1.0 / k as f64; k]).collect(),
            ArrivalBlock::Free { starts } => (0..t_count)
                .map(|t| softmax_with_reference(&theta[starts[t]..starts[t] + d.occasions[t] - 1]))
                .collect(),
            ArrivalBlock::Logistic(block) => {
                let lp = block.predictors(theta);
                let mut out = Vec::with_capacity(t_count);
                let mut pos = 0;
                for t in 0..t_count {
                    let k = d.occasions[t];
                    out.push(normalized_logistic_weights(&lp[pos..pos + k]));
                    pos += k;
                }
                debug_assert_eq!(pos, self.arrival_coords.len());
                out
            }
            ArrivalBlock::Fixed(v) => vec![v.clone(); t_count],
        };

        let r_flat = self.retention.probabilities(theta, self.retention_coords);
        let mut it = r_flat.into_iter();
        let retention = (0..t_count)
            .map(|t| {
                (0..d.occasions[t] - 1)
                    .map(|k| it.by_ref().take(retention_ages(d, t, k)).collect())
                    .collect()
            })
            .collect();

        let p_flat = self.capture.probabilities(theta, self.capture_coords);
        let mut it = p_flat.into_iter();
        let mut capture: Vec<Vec<Vec<Vec<f64>>>> = (0..t_count)
            .map(|t| {
                (0..d.occasions[t])
                    .map(|k| {
                        (0..g)
                            .map(|_| it.by_ref().take(capture_ages(d, t, k)).collect())
                            .collect()
                    })
                    .collect()
            })
            .collect();
        if let LinearBlock::Fixed(_) = self.capture {
            for (t, occ) in capture.iter_mut().enumerate() {
                for per_state in occ.iter_mut() {
                    for (gi, ages) in per_state.iter_mut().enumerate() {
                        if !masks[t][gi] {
                            ages.iter_mut().for_each(|x| *x = 0.0);
                        }
                    }
                }
            }
        }

        let initial_state = expand_simplex(&self.initial_state, theta, 1, g, &masks)
            .into_iter()
            .map(|mut rows| rows.swap_remove(0))
            .collect();
        let transition = expand_simplex(&self.transition, theta, g, g, &masks);
        let mut transition = transition;
        for (t, mask) in masks.iter().enumerate() {
            let m = mask.iter().filter(|&&b| b).count() as f64;
            for (i, row) in transition[t].iter_mut().enumerate() {
                if !mask[i] {
                    for (x, &b) in row.iter_mut().zip(mask) {
                        *x = if b { 1.0 / m } else { 0.0 };
                    }
                }
            }
        }

        Ok(ParameterSet {
            super_population: observed as f64 + theta[0].exp(),
            recruitment,
            survival,
            initial_state,
            transition,
            arrival,
            retention,
            capture,
        })
    }

    /// Unconstrained vector reproducing `params` under this structure.
    ///
    /// Fails with [`Error::NotRepresentable`] when `params` lies outside the
    /// family the structure describes (checked by re-expanding), and for
    /// logistic arrival, which has no closed-form inverse.
    pub fn to_unconstrained(&self, params: &ParameterSet, observed: u64) -> Result<Vec<f64>> {
        params.validate(&self.design)?;
        let d = &self.design;
        let t_count = d.periods();
        let g = d.states;
        let masks: Vec<Vec<bool>> = (0..t_count).map(|t| d.mask(t)).collect();
        let mut theta = vec![0.0; self.dimension()];

        let excess = params.super_population - observed as f64;
        if excess <= 0.0 {
            return Err(Error::NotRepresentable(format!(
                "N = {} does not exceed n = {observed}",
                params.super_population
            )));
        }
        theta[0] = excess.ln();

        invert_simplex(
            &self.recruitment,
            &[vec![params.recruitment.clone()]],
            t_count,
            &[vec![true; t_count]],
            &mut theta,
        );

        let logits = |v: &mut dyn Iterator<Item = &f64>| v.map(|&x| logit(x)).collect::<Vec<_>>();
        self.survival.invert(
            &logits(&mut params.survival.iter().flatten()),
            &mut theta,
            "s",
        )?;
        match &self.arrival {
            ArrivalBlock::Free { starts } => {
                for t in 0..t_count {
                    let lr = log_ratios(&params.arrival[t]);
                    theta[starts[t]..starts[t] + lr.len()].copy_from_slice(&lr);
                }
            }
            ArrivalBlock::Logistic(_) => {
                return Err(Error::NotRepresentable(
                    "logistic arrival has no closed-form inverse".into(),
                ))
            }
            ArrivalBlock::Uniform | ArrivalBlock::Fixed(_) => {}
        }
        self.retention.invert(
            &logits(&mut params.retention.iter().flatten().flatten()),
            &mut theta,
            "phi",
        )?;
        self.capture.invert(
            &logits(&mut params.capture.iter().flatten().flatten().flatten()),
            &mut theta,
            "p",
        )?;
        let alpha: Vec<Vec<Vec<f64>>> = params
            .initial_state
            .iter()
            .map(|row| vec![row.clone()])
            .collect();
        invert_simplex(&self.initial_state, &alpha, g, &masks, &mut theta);
        invert_simplex(&self.transition, &params.transition, g, &masks, &mut theta);

        let mut canonical = params.clone();
        canonical.canonicalize(d);
        let back = self.expand(&theta, observed)?;
        let err = back.max_abs_diff(&canonical);
        if !(err < 1e-8) {
            return Err(Error::NotRepresentable(format!(
                "closest fit differs by {err:.3e}"
            )));
        }
        Ok(theta)
    }

    /// Indices of coordinates with |theta| above `threshold`, signalling an
    /// estimate on the boundary of the natural parameter space.
    pub fn boundary(&self, theta: &[f64], threshold: f64) -> Vec<String> {
        theta
            .iter()
            .zip(&self.names)
            .filter(|(x, _)| x.abs() > threshold)
            .map(|(_, n)| n.clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario_design() -> StudyDesign {
        StudyDesign::new(vec![5, 5, 5], 2).unwrap()
    }

    #[test]
    fn grammar_round_trip() {
        for s in [
            ModelStructure::constant(),
            ModelStructure::scenario(),
            ModelStructure::newt(),
            ModelStructure::saturated(),
            ModelStructure::single_period(),
        ] {
            let text = s.to_string();
            let back: ModelStructure = text.parse().unwrap();
            assert_eq!(back, s, "{text}");
        }
    }

    #[test]
    fn grammar_normalizes_dimension_order() {
        let a: LinearSpec = "state*year".parse().unwrap();
        let b: LinearSpec = "year*state".parse().unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_string(), "year*state");
    }

    #[test]
    fn grammar_rejects_garbage() {
        assert!("p = banana".parse::<ModelStructure>().is_err());
        assert!("q = 1".parse::<ModelStructure>().is_err());
        assert!("p = 1; p = year".parse::<ModelStructure>().is_err());
        assert!("p = year + year".parse::<ModelStructure>().is_err());
        assert!("alpha = logistic(1)".parse::<ModelStructure>().is_err());
        assert!("s = fixed(1.5)".parse::<ModelStructure>().is_err());
    }

    #[test]
    fn dependency_checked_per_parameter() {
        let s: ModelStructure = "s = state".parse().unwrap();
        assert!(s.compile(&scenario_design()).is_err());
        let s: ModelStructure = "beta = logistic(age)".parse().unwrap();
        assert!(s.compile(&scenario_design()).is_err());
    }

    #[test]
    fn expand_examples() {
        let c = ModelStructure::constant().compile(&scenario_design()).unwrap();
        let theta = vec![0.0; c.dimension()];
        let p = c.expand(&theta, 106).unwrap();
        assert_eq!(p.super_population, 107.0);
        assert_eq!(p.survival[0][0], 0.5);
        assert_eq!(p.capture[1][3][1][2], 0.5);

        let s: ModelStructure = "alpha = 1".parse().unwrap();
        let c = s.compile(&StudyDesign::new(vec![2], 3).unwrap()).unwrap();
        let p = c.expand(&vec![0.0; c.dimension()], 0).unwrap();
        for x in &p.initial_state[0] {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let c = ModelStructure::constant().compile(&scenario_design()).unwrap();
        assert!(matches!(
            c.expand(&[0.0], 1),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn scenario_structure_dimension() {
        // N, r (2), s, eta (3) + delta, tau (4) + gamma, alpha, p (2), psi (2)
        let c = ModelStructure::scenario().compile(&scenario_design()).unwrap();
        assert_eq!(c.dimension(), 1 + 2 + 1 + 4 + 5 + 1 + 2 + 2);
    }

    #[test]
    fn scenario_structure_reproduces_logistic_forms() {
        let d = scenario_design();
        let c = ModelStructure::scenario().compile(&d).unwrap();
        let mut theta = vec![0.0; c.dimension()];
        for (i, name) in c.names().iter().enumerate() {
            theta[i] = match name.as_str() {
                "beta:1" => 1.0,
                "beta:slope(occ|year)[year=1]" => -1.0,
                "beta:slope(occ|year)[year=3]" => -2.0,
                "phi:occ[occ=1]" => 2.5,
                "phi:occ[occ=2]" => 1.8,
                "phi:occ[occ=3]" => 2.1,
                "phi:occ[occ=4]" => 1.4,
                "phi:slope(age)" => -1.0,
                _ => 0.0,
            };
        }
        let p = c.expand(&theta, 0).unwrap();
        let expected = crate::model::arrival_from_logistic(-1.0, 1.0, 5);
        for (a, b) in p.arrival[0].iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(p.arrival[1].iter().all(|&x| (x - 0.2).abs() < 1e-15));
        let phi = crate::model::retention_from_logistic(&[2.5, 1.8, 2.1, 1.4], -1.0);
        assert_eq!(p.retention[2], phi);
    }

    #[test]
    fn newt_shape_parameter_layout() {
        let d = StudyDesign::new(vec![20; 12], 2)
            .unwrap()
            .with_availability(
                (0..12)
                    .map(|t| if t >= 8 { vec![1, 2] } else { vec![1] })
                    .collect(),
            )
            .unwrap();
        let c = ModelStructure::newt().compile(&d).unwrap();
        let names = c.names();
        let count = |prefix: &str| names.iter().filter(|n| n.starts_with(prefix)).count();
        assert_eq!(count("r:"), 11);
        assert_eq!(count("s:"), 1);
        assert_eq!(count("beta:"), 13);
        assert_eq!(count("phi:"), 13);
        assert_eq!(count("p:"), 12 + 4);
        assert_eq!(count("alpha:"), 4);
        assert_eq!(count("psi:"), 8);
        let p = c.expand(&vec![0.3; c.dimension()], 50).unwrap();
        p.validate(&d).unwrap();
        assert_eq!(p.initial_state[3], vec![1.0, 0.0]);
        assert_eq!(p.capture[2][4][1], vec![0.0; 5]);
        assert!(p.initial_state[9][1] > 0.0);
    }

    #[test]
    fn saturated_round_trip() {
        let d = StudyDesign::new(vec![3, 2], 2).unwrap();
        let c = ModelStructure::saturated().compile(&d).unwrap();
        let theta: Vec<f64> = (0..c.dimension()).map(|i| ((i * 37 % 11) as f64 - 5.0) / 3.0).collect();
        let p = c.expand(&theta, 4).unwrap();
        let back = c.to_unconstrained(&p, 4).unwrap();
        for (a, b) in theta.iter().zip(&back) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn out_of_family_parameters_are_rejected() {
        let d = StudyDesign::new(vec![3, 2], 1).unwrap();
        let sat = ModelStructure::saturated().compile(&d).unwrap();
        let theta: Vec<f64> = (0..sat.dimension()).map(|i| i as f64 * 0.1 - 0.4).collect();
        let p = sat.expand(&theta, 0).unwrap();
        let c = ModelStructure::constant().compile(&d).unwrap();
        assert!(matches!(
            c.to_unconstrained(&p, 0),
            Err(Error::NotRepresentable(_))
        ));
    }
}
