//! History files, run configuration and result files.
//!
//! A history file starts with a header line of `key=value` fields and then
//! has one row per unique history: `sum K(t)` outcomes followed by a count.
//!
//! ```text
//! # three periods, states 1 and 2 everywhere
//! T=3 K=5,5,5 G=2 avail=1,2;1,2;1,2 Aprime=3 aprime=5,5,5
//! 0 1 0 0 0 0 0 0 0 0 2 2 0 0 0 4
//! ```
//!
//! `K` and `aprime` may be a single value applied to every period, `avail`
//! a single list applied to every period; `avail`, `Aprime` and `aprime`
//! default to all states, `T` and `K(t)`. `#` starts a comment.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::{BootstrapResult, FitResult, Quantity, Selection};
use crate::model::{Dataset, StudyDesign};
use crate::optim::OptimizerConfig;
use crate::structure::ModelStructure;

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn parse_list(line: usize, key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|x| {
            x.trim()
                .parse::<usize>()
                .map_err(|_| parse_err(line, format!("{key}: '{x}' is not a non-negative integer")))
        })
        .collect()
}

fn broadcast(line: usize, key: &str, v: Vec<usize>, periods: usize) -> Result<Vec<usize>> {
    match v.len() {
        1 => Ok(vec![v[0]; periods]),
        n if n == periods => Ok(v),
        n => Err(parse_err(line, format!("{key} lists {n} values for T = {periods}"))),
    }
}

fn parse_header(line: usize, text: &str) -> Result<StudyDesign> {
    let mut fields = std::collections::BTreeMap::new();
    for token in text.split_whitespace() {
        let (k, v) = token
            .split_once('=')
            .ok_or_else(|| parse_err(line, format!("header field '{token}' is not key=value")))?;
        if fields.insert(k.to_string(), v.to_string()).is_some() {
            return Err(parse_err(line, format!("header repeats '{k}'")));
        }
    }
    let take = |k: &str| fields.get(k).map(String::as_str);
    for k in fields.keys() {
        if !["T", "K", "G", "avail", "Aprime", "aprime"].contains(&k.as_str()) {
            return Err(parse_err(line, format!("unknown header field '{k}'")));
        }
    }
    let single = |k: &str| -> Result<usize> {
        let v = take(k).ok_or_else(|| parse_err(line, format!("header is missing {k}")))?;
        v.parse()
            .map_err(|_| parse_err(line, format!("{k}: '{v}' is not a non-negative integer")))
    };
    let periods = single("T")?;
    let states = single("G")?;
    let k_raw = take("K").ok_or_else(|| parse_err(line, "header is missing K"))?;
    let occasions = broadcast(line, "K", parse_list(line, "K", k_raw)?, periods)?;
    let err = |e: Error| parse_err(line, e.to_string());
    let mut design = StudyDesign::new(occasions, states).map_err(err)?;
    if let Some(a) = take("avail") {
        let lists = a
            .split(';')
            .map(|p| parse_list(line, "avail", p))
            .collect::<Result<Vec<_>>>()?;
        let lists = match lists.len() {
            1 => vec![lists[0].clone(); periods],
            n if n == periods => lists,
            n => return Err(parse_err(line, format!("avail lists {n} periods for T = {periods}"))),
        };
        design = design.with_availability(lists).map_err(err)?;
    }
    let max_age = match take("Aprime") {
        Some(_) => single("Aprime")?,
        None => periods,
    };
    let max_occasion_age = match take("aprime") {
        Some(v) => broadcast(line, "aprime", parse_list(line, "aprime", v)?, periods)?,
        None => design.occasions.clone(),
    };
    design.with_max_ages(max_age, max_occasion_age).map_err(err)
}

/// Parses history-file text; also returns how many rows were merged into
/// an earlier identical row.
pub fn parse_history_str(text: &str) -> Result<(Dataset, usize)> {
    let mut design = None;
    let mut rows = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some(d) = &design else {
            design = Some(parse_header(line, content)?);
            continue;
        };
        let d: &StudyDesign = d;
        let values = content
            .split_whitespace()
            .map(|x| {
                x.parse::<u64>()
                    .map_err(|_| parse_err(line, format!("'{x}' is not a non-negative integer")))
            })
            .collect::<Result<Vec<u64>>>()?;
        let expected = d.total_occasions() + 1;
        if values.len() != expected {
            return Err(parse_err(
                line,
                format!("row has {} fields, expected {expected}", values.len()),
            ));
        }
        let count = values[expected - 1];
        if count == 0 {
            return Err(parse_err(line, "count must be at least 1"));
        }
        let mut history = Vec::with_capacity(expected - 1);
        for t in 0..d.periods() {
            let off = d.offset(t);
            for &x in &values[off..off + d.occasions[t]] {
                if x as usize > d.states {
                    return Err(parse_err(line, format!("state {x} outside 0..={}", d.states)));
                }
                if x != 0 && !d.is_available(t, x as usize) {
                    return Err(parse_err(
                        line,
                        format!("state {x} is not available in period {}", t + 1),
                    ));
                }
                history.push(x as u8);
            }
        }
        if history.iter().all(|&x| x == 0) {
            return Err(parse_err(line, "history is never captured"));
        }
        rows.push((history, count));
    }
    let design = design.ok_or_else(|| parse_err(1, "missing header line"))?;
    Dataset::from_rows(design, rows)
}

/// Reads a history file, merging duplicate rows with a warning.
pub fn parse_history_file(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let (data, duplicates) = parse_history_str(&text)?;
    if duplicates > 0 {
        log::warn!(
            "{}: merged {duplicates} duplicate history rows",
            path.display()
        );
    }
    Ok(data)
}

fn join(v: &[usize], sep: &str) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(sep)
}

pub fn format_header(design: &StudyDesign) -> String {
    let avail: Vec<String> = design.available.iter().map(|a| join(a, ",")).collect();
    format!(
        "T={} K={} G={} avail={} Aprime={} aprime={}",
        design.periods(),
        join(&design.occasions, ","),
        design.states,
        avail.join(";"),
        design.max_age,
        join(&design.max_occasion_age, ",")
    )
}

pub fn write_history_str(dataset: &Dataset) -> String {
    let mut out = format_header(&dataset.design);
    out.push('\n');
    for (h, c) in dataset.histories().iter().zip(dataset.counts()) {
        for x in h {
            let _ = write!(out, "{x} ");
        }
        let _ = writeln!(out, "{c}");
    }
    out
}

pub fn write_history_file(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    std::fs::write(path, write_history_str(dataset))?;
    Ok(())
}

/// Settings shared by the fitting commands, read from TOML.
///
/// ```toml
/// structure = "generating"      # a built-in name or inline grammar
/// seed = 7
/// starts = 10
/// replicates = 200
/// moves = ["r = year", "s = year"]
/// [optimizer]
/// max_iter = 500
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub structure: Option<String>,
    pub seed: u64,
    pub starts: usize,
    pub jitter: f64,
    pub replicates: usize,
    pub moves: Vec<String>,
    pub out: Option<String>,
    pub optimizer: OptimizerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            structure: None,
            seed: 1,
            starts: 10,
            jitter: 0.5,
            replicates: 100,
            moves: Vec::new(),
            out: None,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start].matches('\n').count() + 1)
                .unwrap_or(1);
            parse_err(line, e.message().to_string())
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

/// Resolves a structure argument: a built-in name, a file holding the
/// grammar, or inline grammar text.
pub fn resolve_structure(arg: &str) -> Result<ModelStructure> {
    if let Some(s) = ModelStructure::named(arg.trim()) {
        return Ok(s);
    }
    let path = Path::new(arg);
    if !arg.contains('=') && path.is_file() {
        return std::fs::read_to_string(path)?.parse();
    }
    arg.parse()
}

/// Aligned plain-text table; `None` cells print as `-`.
pub fn quantity_table(rows: &[(&Quantity, Option<f64>, Option<f64>, Option<f64>)]) -> String {
    let header = [
        "parameter", "year", "occ", "state", "to", "age", "estimate", "se", "ci_low", "ci_high",
    ];
    let fmt_idx = |v: Option<usize>| v.map_or("-".to_string(), |x| x.to_string());
    let fmt_num = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.6}"));
    let mut cells: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for (q, se, lo, hi) in rows {
        cells.push(vec![
            q.parameter.clone(),
            fmt_idx(q.year),
            fmt_idx(q.occasion),
            fmt_idx(q.state),
            fmt_idx(q.to),
            fmt_idx(q.age),
            format!("{:.6}", q.value),
            fmt_num(*se),
            fmt_num(*lo),
            fmt_num(*hi),
        ]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|j| cells.iter().map(|r| r[j].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in cells {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(j, (c, w))| if j == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

fn fit_summary(fit: &FitResult) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "structure: {}", fit.structure);
    let _ = writeln!(out, "observed individuals: {}", fit.observed);
    let _ = writeln!(out, "converged: {}", fit.converged);
    let _ = writeln!(out, "log-likelihood: {:.6}", fit.loglik);
    let _ = writeln!(out, "parameters: {}", fit.n_params);
    let _ = writeln!(
        out,
        "AIC: {:.6} (= -2 * {:.6} + 2 * {})",
        fit.aic, fit.loglik, fit.n_params
    );
    let d = &fit.diagnostics;
    let _ = writeln!(
        out,
        "optimizer: {} ({}), {} iterations, scaled gradient {:.3e}, {}/{} starts converged",
        d.method, d.message, d.iterations, d.scaled_gradient, d.starts_converged, d.starts
    );
    if !d.boundary.is_empty() {
        let _ = writeln!(out, "boundary estimates: {}", d.boundary.join(", "));
    }
    out
}

pub fn fit_report(fit: &FitResult) -> String {
    let mut out = fit_summary(fit);
    out.push('\n');
    let q = crate::estimate::natural_quantities(&fit.params_hat, &fit.design);
    let rows: Vec<_> = q.iter().map(|q| (q, None, None, None)).collect();
    out.push_str(&quantity_table(&rows));
    out
}

pub fn bootstrap_report(result: &BootstrapResult) -> String {
    let mut out = fit_summary(&result.fit);
    let _ = writeln!(
        out,
        "bootstrap: {} replicates, {} not converged",
        result.replicates, result.failures
    );
    for s in result.summary.iter().filter(|s| {
        matches!(s.quantity.parameter.as_str(), "N" | "N(t)" | "s")
    }) {
        let _ = writeln!(out, "  {:<20} {}", s.quantity.label(), s.display());
    }
    out.push('\n');
    let rows: Vec<_> = result
        .summary
        .iter()
        .map(|s| (&s.quantity, s.se, s.ci_low, s.ci_high))
        .collect();
    out.push_str(&quantity_table(&rows));
    out
}

pub fn selection_report(sel: &Selection) -> String {
    let mut out = String::new();
    let label = |e: &crate::estimate::TraceEntry| e.step.clone().unwrap_or_else(|| "(base)".into());
    let w = sel.trace.iter().map(|e| label(e).len()).max().unwrap_or(0).max(4);
    let _ = writeln!(
        out,
        "round  {:<w$}  params      loglik          AIC  converged  accepted",
        "move"
    );
    for e in &sel.trace {
        let _ = writeln!(
            out,
            "{:>5}  {:<w$}  {:>6}  {:>10.4}  {:>11.4}  {:>9}  {:>8}",
            e.round,
            label(e),
            e.n_params,
            e.loglik,
            e.aic,
            e.converged,
            e.accepted
        );
    }
    let _ = writeln!(out, "\nselected: {}\n", sel.best);
    out.push_str(&fit_report(&sel.best_fit));
    out
}
