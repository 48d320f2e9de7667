//! Acceptance criteria, one test each. Every test prints a single
//! `criterion N: PASS|FAIL ...` line before asserting.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use proptest::test_runner::{Config, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;

use msstopover::estimate::{derived_abundance, fit, FitConfig, FitResult};
use msstopover::hmm::{log_likelihood, primary_likelihood};
use msstopover::oracle::{all_histories, brute_force_likelihood, random_parameters};
use msstopover::simulate::{paper_scenario, simulate};
use msstopover::{Dataset, ModelStructure, ParameterSet, StudyDesign};

/// Written straight to the stdout handle so the line shows up even when the
/// test harness captures output.
fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "criterion {n} ({name}): {} {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

#[test]
fn criterion_1_oracle_equivalence() {
    let start = Instant::now();
    let design = StudyDesign::new(vec![2, 2], 2).unwrap();
    let histories = all_histories(&design);
    let mut runner = TestRunner::new(Config::with_cases(200));
    let worst = std::cell::Cell::new(0.0f64);
    let cases = std::cell::Cell::new(0usize);
    let outcome = runner.run(&proptest::num::u64::ANY, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = random_parameters(&mut rng, &design);
        for h in &histories {
            let fast = primary_likelihood(h, &params, &design).unwrap().value();
            let slow = brute_force_likelihood(h, &params, &design).unwrap();
            let diff = (fast - slow).abs();
            worst.set(worst.get().max(diff));
            proptest::prop_assert!(diff < 1e-10, "history {h:?}: {fast} vs {slow}");
        }
        cases.set(cases.get() + 1);
        Ok(())
    });
    let secs = start.elapsed().as_secs_f64();
    let pass = outcome.is_ok() && cases.get() >= 200 && secs < 60.0;
    report(
        1,
        "oracle equivalence",
        pass,
        &format!(
            "max |HMM - brute force| = {:.2e} over {} instances x {} histories in {secs:.1}s",
            worst.get(),
            cases.get(),
            histories.len()
        ),
    );
    outcome.unwrap();
    assert!(pass);
}

fn fixed_tiny_instance() -> (StudyDesign, ParameterSet) {
    let design = StudyDesign::new(vec![2, 2], 2).unwrap();
    let mut p = ParameterSet::uniform(&design, 2.0);
    p.recruitment = vec![0.65, 0.35];
    p.survival = vec![vec![0.7]];
    p.initial_state = vec![vec![0.35, 0.65], vec![0.5, 0.5]];
    p.transition = vec![
        vec![vec![0.4, 0.6], vec![0.3, 0.7]],
        vec![vec![0.9, 0.1], vec![0.2, 0.8]],
    ];
    p.arrival = vec![vec![0.6, 0.4], vec![0.25, 0.75]];
    p.retention = vec![vec![vec![0.8]], vec![vec![0.55]]];
    p.capture = vec![
        vec![vec![vec![0.6], vec![0.8]], vec![vec![0.5, 0.4], vec![0.7, 0.9]]],
        vec![vec![vec![0.3], vec![0.45]], vec![vec![0.6, 0.2], vec![0.1, 0.95]]],
    ];
    p.validate(&design).unwrap();
    (design, p)
}

#[test]
fn criterion_2_total_probability() {
    let (design, params) = fixed_tiny_instance();
    let histories = all_histories(&design);
    assert_eq!(histories.len(), 81);
    let total: f64 = histories
        .iter()
        .map(|h| primary_likelihood(h, &params, &design).unwrap().value())
        .sum();
    let history_err = (total - 1.0).abs();

    // the multinomial over all datasets of N = 2 individuals, with the
    // never-captured cell carrying N - n of them
    let captured = &histories[1..];
    let mut mass = 0.0;
    let mut eval = |rows: Vec<(Vec<u8>, u64)>| {
        let (data, _) = Dataset::from_rows(design.clone(), rows).unwrap();
        mass += log_likelihood(&data, &params).unwrap().exp();
    };
    eval(Vec::new());
    for (i, a) in captured.iter().enumerate() {
        eval(vec![(a.clone(), 1)]);
        eval(vec![(a.clone(), 2)]);
        for b in &captured[i + 1..] {
            eval(vec![(a.clone(), 1), (b.clone(), 1)]);
        }
    }
    let multinomial_err = (mass - 1.0).abs();
    let pass = history_err < 1e-8 && multinomial_err < 1e-8;
    report(
        2,
        "total probability",
        pass,
        &format!(
            "|sum over 81 histories - 1| = {history_err:.2e}, |multinomial mass (N=2) - 1| = {multinomial_err:.2e}"
        ),
    );
    assert!(pass);
}

fn iqr(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    msstopover::estimate::quantile(v, 0.75) - msstopover::estimate::quantile(v, 0.25)
}

#[test]
fn criterion_3_simulation_recovery() {
    let start = Instant::now();
    let (truth, design) = paper_scenario(100);
    let config = FitConfig {
        starts: 3,
        ..FitConfig::default()
    };
    let replicates = 200u64;
    let fits: Vec<(Option<FitResult>, Vec<Option<FitResult>>)> = (0..replicates)
        .into_par_iter()
        .map(|i| {
            let (data, _) = simulate(&truth, &design, 30_000 + i).unwrap();
            let multi = fit(&data, &ModelStructure::scenario(), &config)
                .ok()
                .filter(|f| f.converged);
            let single = (0..3)
                .map(|t| {
                    let d = data.restrict_to_period(t).ok()?;
                    if d.is_empty() {
                        return None;
                    }
                    fit(&d, &ModelStructure::single_period(), &config)
                        .ok()
                        .filter(|f| f.converged)
                })
                .collect();
            (multi, single)
        })
        .collect();

    let multi: Vec<&FitResult> = fits.iter().filter_map(|f| f.0.as_ref()).collect();
    let truths = [40.0, 48.0, 73.6];
    let mut bias_ok = true;
    let mut bias_text = Vec::new();
    for t in 0..3 {
        let mut v: Vec<f64> = multi.iter().map(|f| derived_abundance(f)[t]).collect();
        v.sort_by(f64::total_cmp);
        let median = msstopover::estimate::quantile(&v, 0.5);
        let rel = (median - truths[t]) / truths[t];
        bias_ok &= rel.abs() <= 0.08;
        bias_text.push(format!("N({}) median {median:.2} ({:+.1}%)", t + 1, 100.0 * rel));
    }

    let mut not_larger = 0;
    let mut entries = 0;
    for t in 0..3 {
        let singles: Vec<&FitResult> = fits.iter().filter_map(|f| f.1[t].as_ref()).collect();
        for i in 0..2 {
            for j in 0..2 {
                let mut m: Vec<f64> = multi.iter().map(|f| f.params_hat.transition[t][i][j]).collect();
                let mut s: Vec<f64> = singles
                    .iter()
                    .map(|f| f.params_hat.transition[0][i][j])
                    .collect();
                entries += 1;
                if iqr(&mut m) <= iqr(&mut s) {
                    not_larger += 1;
                }
            }
        }
    }
    let single_converged: Vec<usize> = (0..3)
        .map(|t| fits.iter().filter(|f| f.1[t].is_some()).count())
        .collect();
    let share = not_larger as f64 / entries as f64;
    let secs = start.elapsed().as_secs_f64();
    let pass = bias_ok && share >= 0.7 && secs <= 7200.0;
    report(
        3,
        "simulation recovery",
        pass,
        &format!(
            "{}; multi-period Psi IQR <= single-period in {not_larger}/{entries} entries; converged: multi {}/{replicates}, single {:?}; {secs:.0}s",
            bias_text.join(", "),
            multi.len(),
            single_converged
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_4_large_sample_consistency() {
    let (truth, design) = paper_scenario(1000);
    let (data, _) = simulate(&truth, &design, 2024).unwrap();
    let f = fit(&data, &ModelStructure::scenario(), &FitConfig::default()).unwrap();
    let p = &f.params_hat;
    // last column: sampling SD of each estimator over 60 simulated
    // datasets at N = 1000 (see recovery_study example)
    let checks = [
        ("s", p.survival[0][0], 0.7, 0.05, 0.017),
        ("p1", p.capture[0][0][0][0], 0.6, 0.07, 0.121),
        ("p2", p.capture[0][0][1][0], 0.8, 0.05, 0.071),
        ("alpha1", p.initial_state[0][0], 0.35, 0.07, 0.059),
    ];
    let mut pass = f.converged;
    let mut within_3sd = f.converged;
    let mut text = Vec::new();
    for (name, est, tru, tol, sd) in checks {
        let ok = (est - tru).abs() <= tol;
        pass &= ok;
        within_3sd &= (est - tru).abs() <= 3.0 * sd;
        text.push(format!(
            "{name} = {est:.4} (truth {tru}, tol {tol}) {}",
            if ok { "ok" } else { "out" }
        ));
    }
    report(
        4,
        "large-sample consistency",
        pass,
        &format!(
            "seed 2024, n = {}: {}; all within 3 simulated SDs: {within_3sd}",
            data.observed(),
            text.join("; ")
        ),
    );
    assert!(pass);
}

/// Single-period, single-state likelihood written as an explicit sum over
/// arrival occasion `b` and last occasion present `d`.
fn direct_single_period(data: &Dataset, p: &ParameterSet) -> f64 {
    let k = data.design.occasions[0];
    let beta = &p.arrival[0];
    let phi = |occ: usize, age: usize| {
        if age >= data.design.max_occasion_age[0] {
            0.0
        } else {
            p.retention[0][occ][age - 1]
        }
    };
    let cap = |occ: usize, age: usize| p.capture[0][occ][0][age - 1];
    let prob = |h: &[u8]| {
        let mut total = 0.0;
        for b in 0..k {
            for d in b..k.min(b + data.design.max_occasion_age[0]) {
                let mut w = beta[b];
                for occ in b..d {
                    w *= phi(occ, occ - b + 1);
                }
                if d + 1 < k {
                    w *= 1.0 - phi(d, d - b + 1);
                }
                for (occ, &y) in h.iter().enumerate() {
                    if occ < b || occ > d {
                        if y != 0 {
                            w = 0.0;
                        }
                    } else {
                        let c = cap(occ, occ - b + 1);
                        w *= if y == 1 { c } else { 1.0 - c };
                    }
                }
                total += w;
            }
        }
        total
    };
    let n = data.observed() as f64;
    let big_n = p.super_population;
    let mut ll = ln_gamma(big_n + 1.0) - ln_gamma(big_n - n + 1.0)
        + (big_n - n) * prob(&vec![0; k]).ln();
    for (h, &c) in data.histories().iter().zip(data.counts()) {
        ll += c as f64 * prob(h).ln() - ln_gamma(c as f64 + 1.0);
    }
    ll
}

#[test]
fn criterion_5_single_period_reduction() {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    for k in [1usize, 2, 4, 6] {
        for a_prime in [1, k.div_ceil(2), k] {
            let design = StudyDesign::new(vec![k], 1)
                .unwrap()
                .with_max_ages(1, vec![a_prime])
                .unwrap();
            for _ in 0..10 {
                let params = random_parameters(&mut rng, &design);
                let mut sim = params.clone();
                sim.super_population = 60.0;
                let (data, _) = simulate(&sim, &design, rand::Rng::random(&mut rng)).unwrap();
                let mut eval = params.clone();
                eval.super_population = data.observed() as f64 + 7.25;
                let a = log_likelihood(&data, &eval).unwrap();
                let b = direct_single_period(&data, &eval);
                worst = worst.max((a - b).abs());
            }
        }
    }
    let pass = worst < 1e-10;
    report(
        5,
        "single-period reduction",
        pass,
        &format!("max |log L - direct sum| = {worst:.2e} over 120 datasets"),
    );
    assert!(pass);
}

fn newt_design() -> StudyDesign {
    StudyDesign::new(vec![5; 12], 2)
        .unwrap()
        .with_availability(
            (0..12)
                .map(|t| if t >= 8 { vec![1, 2] } else { vec![1] })
                .collect(),
        )
        .unwrap()
}

fn newt_truth(design: &StudyDesign) -> (ParameterSet, Vec<f64>) {
    let compiled = ModelStructure::newt().compile(design).unwrap();
    let theta: Vec<f64> = compiled
        .names()
        .iter()
        .map(|name| {
            if name == "s:1" {
                1.516 // logit 0.82
            } else if name == "beta:1" {
                0.5
            } else if name.starts_with("beta:slope") {
                -0.4
            } else if name == "phi:1" {
                1.2
            } else if name.starts_with("phi:slope") {
                0.1
            } else if name.starts_with("p:") {
                if name.contains("state=2") { 0.3 } else { -0.2 }
            } else if name.starts_with("alpha:") {
                -0.4
            } else if name.starts_with("psi:") {
                if name.contains("from=1") { -0.5 } else { 0.6 }
            } else {
                0.0
            }
        })
        .collect();
    let mut params = compiled.expand(&theta, 0).unwrap();
    params.super_population = 500.0;
    (params, theta)
}

#[test]
fn criterion_6_newt_structure() {
    let design = newt_design();
    let newt = ModelStructure::newt();
    let text = newt.to_string();
    let reparsed: ModelStructure = text.parse().unwrap();
    let compiled = newt.compile(&design).unwrap();
    let count = |prefix: &str| compiled.names().iter().filter(|n| n.starts_with(prefix)).count();
    let shape_ok = reparsed == newt
        && count("r:") == 11
        && count("s:") == 1
        && count("beta:") == 1 + 12
        && count("phi:") == 1 + 12
        && count("p:") == 12 + 4
        && count("alpha:") == 4
        && count("psi:") == 8;

    let (truth, _) = newt_truth(&design);
    truth.validate(&design).unwrap();
    let expanded_ok = (0..8).all(|t| truth.initial_state[t] == vec![1.0, 0.0])
        && (8..12).all(|t| truth.initial_state[t][1] > 0.0)
        && truth.capture[3][2][1].iter().all(|&x| x == 0.0);

    let (data, _) = simulate(&truth, &design, 99).unwrap();
    let config = FitConfig {
        starts: 2,
        ..FitConfig::default()
    };
    let f = fit(&data, &newt, &config).unwrap();
    let mut at_truth = truth.clone();
    at_truth.super_population = truth.super_population;
    let ll_truth = log_likelihood(&data, &at_truth).unwrap();
    let s_hat = f.params_hat.survival[0][0];
    let re_expanded = compiled.expand(&f.theta_hat, data.observed()).unwrap();
    let fit_ok = f.converged
        && f.loglik >= ll_truth - 1e-6
        && (s_hat - 0.82).abs() < 0.1
        && (f.params_hat.super_population - 500.0).abs() < 75.0
        && re_expanded == f.params_hat;
    let pass = shape_ok && expanded_ok && fit_ok;
    report(
        6,
        "newt-shaped structure",
        pass,
        &format!(
            "grammar round-trip and layout {}, {} parameters; fit n = {}: converged {}, loglik {:.3} vs {:.3} at truth, s = {s_hat:.3}, N = {:.1}",
            if shape_ok && expanded_ok { "ok" } else { "wrong" },
            compiled.dimension(),
            data.observed(),
            f.converged,
            f.loglik,
            ll_truth,
            f.params_hat.super_population
        ),
    );
    assert!(pass);
}

fn run_cli(dir: &Path, args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_msstopover"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap();
    assert!(
        status.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&status.stderr)
    );
}

fn run_all_commands(dir: &Path) {
    run_cli(dir, &["simulate", "--paper-scenario", "100", "--seed", "7", "--out", "sim"]);
    run_cli(
        dir,
        &["fit", "--design", "sim.hist", "--structure", "generating", "--seed", "3", "--starts", "3", "--out", "fit"],
    );
    run_cli(
        dir,
        &["bootstrap", "--design", "sim.hist", "--structure", "generating", "--seed", "3", "--starts", "2", "--replicates", "6", "--out", "boot"],
    );
    run_cli(
        dir,
        &["select", "--design", "sim.hist", "--structure", "constant", "--move", "p = state", "--move", "r = year", "--seed", "5", "--starts", "2", "--out", "select"],
    );
    let (truth, design) = paper_scenario(100);
    let model = serde_json::json!({ "design": design, "params": truth });
    std::fs::write(dir.join("truth.json"), model.to_string()).unwrap();
    run_cli(dir, &["loglik", "--design", "sim.hist", "--params", "truth.json", "--out", "loglik"]);
    run_cli(dir, &["oracle-check", "--instances", "10", "--seed", "4", "--out", "oracle"]);
}

#[test]
fn criterion_7_reproducibility() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_all_commands(a.path());
    run_all_commands(b.path());
    let mut names: Vec<String> = std::fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let mut differing = Vec::new();
    for name in &names {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap_or_default();
        if x != y {
            differing.push(name.clone());
        }
    }
    let pass = differing.is_empty() && names.len() >= 12;
    report(
        7,
        "reproducibility",
        pass,
        &format!(
            "{} files compared across two runs, differing: {:?}",
            names.len(),
            differing
        ),
    );
    assert!(pass);
}
