//! Compares the HMM likelihood with exhaustive enumeration of latent paths
//! on random small designs.
//!
//! cargo run --release --example oracle_check -- [instances] [seed]

use msstopover::oracle::{oracle_check, path_space};
use msstopover::StudyDesign;

fn main() -> msstopover::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let instances: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);

    let designs = [
        StudyDesign::new(vec![2, 2], 2)?,
        StudyDesign::new(vec![3, 2, 2], 1)?,
        StudyDesign::new(vec![2, 3], 2)?
            .with_availability(vec![vec![1], vec![1, 2]])?,
    ];
    for design in &designs {
        let r = oracle_check(design, instances, seed)?;
        println!(
            "K = {:?}, G = {}: {} paths, {} histories, max diff {:.2e}, max |1 - total| {:.2e}",
            design.occasions,
            design.states,
            path_space(design),
            r.histories_checked,
            r.max_abs_diff,
            r.max_total_probability_error
        );
    }
    Ok(())
}
