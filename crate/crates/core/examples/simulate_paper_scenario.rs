//! Simulates the three-period scenario and summarizes the latent truth.
//!
//! cargo run --release --example simulate_paper_scenario -- [N] [seed]

use msstopover::io::write_history_str;
use msstopover::simulate::{expected_abundance, paper_scenario, simulate};

fn main() -> msstopover::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let n: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);

    let (params, design) = paper_scenario(n);
    let (data, truth) = simulate(&params, &design, seed)?;
    let expected = expected_abundance(&params, &design);
    println!("N = {n}, seed = {seed}");
    for t in 0..design.periods() {
        println!(
            "period {}: present {:>5}, expected {:>8.1}",
            t + 1,
            truth.abundance[t],
            expected[t]
        );
    }
    let captured = truth.individuals.iter().filter(|i| i.captured()).count();
    println!("captured at least once: {captured} ({} unique histories)", data.unique());

    if let Some(ind) = truth.individuals.iter().find(|i| i.periods.len() > 1 && i.captured()) {
        println!("\none individual, recruited in period {}:", ind.recruitment + 1);
        for r in &ind.periods {
            println!(
                "  period {}: occasions {}..={} in states {:?}",
                r.period + 1,
                r.arrival + 1,
                r.departure + 1,
                r.states
            );
        }
        println!("  history {:?}", ind.history);
    }

    println!("\nfirst lines of the history file:");
    for line in write_history_str(&data).lines().take(6) {
        println!("  {line}");
    }
    Ok(())
}
