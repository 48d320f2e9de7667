//! A twelve-year design with a second state from year nine, fitted with the
//! newt structure (logistic arrival and retention slopes by year, year x
//! state capture).
//!
//! cargo run --release --example newt_shaped_model -- [N] [seed]

use std::time::Instant;

use msstopover::estimate::{derived_abundance, fit, FitConfig};
use msstopover::simulate::simulate;
use msstopover::{ModelStructure, StudyDesign};

fn main() -> msstopover::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let n: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(500.0);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(99);

    let design = StudyDesign::new(vec![5; 12], 2)?.with_availability(
        (0..12)
            .map(|t| if t >= 8 { vec![1, 2] } else { vec![1] })
            .collect(),
    )?;
    let structure = ModelStructure::newt();
    let compiled = structure.compile(&design)?;
    println!("structure: {structure}");
    println!("{} coefficients", compiled.dimension());

    let theta: Vec<f64> = compiled
        .names()
        .iter()
        .map(|name| match name.split(['[', ':']).take(2).collect::<Vec<_>>()[..] {
            ["s", _] => 1.5,
            ["beta", "1"] => 0.5,
            ["beta", _] => -0.4,
            ["phi", "1"] => 1.2,
            ["phi", _] => 0.1,
            ["p", _] if name.contains("state=2") => 0.3,
            ["p", _] => -0.2,
            ["alpha", _] => -0.4,
            ["psi", _] if name.contains("from=1") => -0.5,
            ["psi", _] => 0.6,
            _ => 0.0,
        })
        .collect();
    let mut truth = compiled.expand(&theta, 0)?;
    truth.super_population = n;
    let (data, _) = simulate(&truth, &design, seed)?;
    println!("observed n = {}, {} unique histories", data.observed(), data.unique());

    let start = Instant::now();
    let result = fit(
        &data,
        &structure,
        &FitConfig {
            starts: 2,
            ..FitConfig::default()
        },
    )?;
    println!(
        "fit in {:.1?}: converged = {}, loglik = {:.3}, AIC = {:.3}",
        start.elapsed(),
        result.converged,
        result.loglik,
        result.aic
    );
    println!("N-hat = {:.1} (true {n}), s-hat = {:.3} (true {:.3})",
        result.params_hat.super_population,
        result.params_hat.survival[0][0],
        truth.survival[0][0]
    );
    let abundance: Vec<String> = derived_abundance(&result).iter().map(|x| format!("{x:.0}")).collect();
    println!("N(t): {}", abundance.join(" "));
    for t in 8..12 {
        println!(
            "year {:>2}: alpha-hat {:.3} {:.3}",
            t + 1,
            result.params_hat.initial_state[t][0],
            result.params_hat.initial_state[t][1]
        );
    }
    Ok(())
}
