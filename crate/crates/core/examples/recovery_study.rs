//! Repeated simulate-and-fit under the scenario, reporting the mean and
//! spread of key estimates.
//!
//! cargo run --release --example recovery_study -- [N] [replicates] [starts]

use msstopover::estimate::{derived_abundance, fit, FitConfig};
use msstopover::simulate::{paper_scenario, simulate};
use msstopover::ModelStructure;

fn summarize(name: &str, v: &[f64], truth: f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt();
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    println!(
        "{name:<8} truth {truth:>8.3}  mean {m:>8.3}  median {:>8.3}  sd {sd:>7.3}",
        s[s.len() / 2]
    );
}

fn main() -> msstopover::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let n: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(100);
    let reps: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(20);
    let starts: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2);

    let (truth, design) = paper_scenario(n);
    let config = FitConfig {
        starts,
        ..FitConfig::default()
    };
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); 9];
    let mut failed = 0;
    for seed in 0..reps {
        let (data, _) = simulate(&truth, &design, 1000 + seed)?;
        let f = fit(&data, &ModelStructure::scenario(), &config)?;
        if !f.converged {
            failed += 1;
            continue;
        }
        let p = &f.params_hat;
        let ab = derived_abundance(&f);
        for (c, v) in cols.iter_mut().zip([
            p.super_population,
            p.survival[0][0],
            p.capture[0][0][0][0],
            p.capture[0][0][1][0],
            p.initial_state[0][0],
            p.transition[0][0][1],
            ab[0],
            ab[1],
            ab[2],
        ]) {
            c.push(v);
        }
    }
    println!("{reps} replicates at N = {n}, {failed} not converged");
    let truths = [n as f64, 0.7, 0.6, 0.8, 0.35, 0.6, 0.4 * n as f64, 0.48 * n as f64, 0.736 * n as f64];
    let names = ["N", "s", "p1", "p2", "alpha1", "psi12", "N(1)", "N(2)", "N(3)"];
    for ((name, col), t) in names.iter().zip(&cols).zip(truths) {
        summarize(name, col, t);
    }
    Ok(())
}
