//! Greedy AIC step-up from the constant structure on scenario data.
//!
//! cargo run --release --example step_up_selection -- [N] [seed]

use msstopover::estimate::{step_up_selection, FitConfig, Move};
use msstopover::io::selection_report;
use msstopover::simulate::{paper_scenario, simulate};
use msstopover::ModelStructure;

fn main() -> msstopover::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let n: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3);

    let (truth, design) = paper_scenario(n);
    let (data, _) = simulate(&truth, &design, seed)?;
    let moves = [
        Move::new("r", "year"),
        Move::new("s", "year"),
        Move::new("p", "state"),
        Move::new("phi", "occ"),
        Move::new("beta", "logistic(1 + slope(occ|year))"),
    ];
    let config = FitConfig {
        starts: 2,
        seed,
        ..FitConfig::default()
    };
    let sel = step_up_selection(&data, &moves, &ModelStructure::constant(), &config)?;
    print!("{}", selection_report(&sel));
    println!("selected: {}", sel.best);
    Ok(())
}
