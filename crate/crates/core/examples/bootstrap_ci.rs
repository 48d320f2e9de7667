//! Fits the scenario structure and attaches bootstrap standard errors and
//! percentile intervals.
//!
//! cargo run --release --example bootstrap_ci -- [replicates] [seed]

use msstopover::estimate::{bootstrap, fit, BootstrapConfig, FitConfig};
use msstopover::io::bootstrap_report;
use msstopover::simulate::{paper_scenario, simulate};
use msstopover::ModelStructure;

fn main() -> msstopover::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let replicates: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(50);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(7);

    let (truth, design) = paper_scenario(100);
    let (data, _) = simulate(&truth, &design, seed)?;
    let structure = ModelStructure::scenario();
    let original = fit(
        &data,
        &structure,
        &FitConfig {
            starts: 4,
            seed,
            ..FitConfig::default()
        },
    )?;
    let config = BootstrapConfig {
        replicates,
        seed,
        ..BootstrapConfig::default()
    };
    let result = bootstrap(&data, &structure, &original, &config)?;
    print!("{}", bootstrap_report(&result));
    for s in result.summary.iter().take(4) {
        println!("{:<12} {}", s.quantity.label(), s.display());
    }
    Ok(())
}
