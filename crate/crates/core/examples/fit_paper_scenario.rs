//! Simulates the three-period scenario and fits the generating structure.
//!
//! cargo run --release --example fit_paper_scenario -- [N] [seed]

use std::time::Instant;

use msstopover::estimate::{derived_abundance, fit, FitConfig};
use msstopover::simulate::{expected_abundance, paper_scenario, simulate};
use msstopover::ModelStructure;

fn main() -> msstopover::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let n: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2024);

    let (truth, design) = paper_scenario(n);
    let (data, _) = simulate(&truth, &design, seed)?;
    println!("N = {n}, seed = {seed}: observed n = {}, unique histories = {}", data.observed(), data.unique());

    let start = Instant::now();
    let result = fit(&data, &ModelStructure::scenario(), &FitConfig::default())?;
    println!(
        "fit in {:.2?}: converged = {}, loglik = {:.4}, AIC = {:.4}, {} parameters",
        start.elapsed(),
        result.converged,
        result.loglik,
        result.aic,
        result.n_params
    );
    println!(
        "optimizer: {} ({}), {} iterations, {} evaluations over {} starts ({} converged)",
        result.diagnostics.method,
        result.diagnostics.message,
        result.diagnostics.iterations,
        result.diagnostics.evaluations,
        result.diagnostics.starts,
        result.diagnostics.starts_converged
    );
    let p = &result.params_hat;
    println!("N-hat     {:>9.3}   (true {n})", p.super_population);
    println!("s-hat     {:>9.4}   (true 0.7)", p.survival[0][0]);
    println!("p-hat     {:>9.4} {:>9.4}   (true 0.6 0.8)", p.capture[0][0][0][0], p.capture[0][0][1][0]);
    println!("alpha-hat {:>9.4} {:>9.4}   (true 0.35 0.65)", p.initial_state[0][0], p.initial_state[0][1]);
    println!(
        "psi-hat   {:>9.4} {:>9.4} / {:>9.4} {:>9.4}",
        p.transition[0][0][0], p.transition[0][0][1], p.transition[0][1][0], p.transition[0][1][1]
    );
    let expected = expected_abundance(&truth, &design);
    for (t, (est, tru)) in derived_abundance(&result).iter().zip(&expected).enumerate() {
        println!("N({})      {:>9.3}   (true {:.1})", t + 1, est, tru);
    }
    Ok(())
}
