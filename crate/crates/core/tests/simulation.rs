use msstopover::simulate::{expected_abundance, paper_scenario, simulate, SimTruth};

fn big_truth() -> SimTruth {
    let (params, design) = paper_scenario(100_000);
    simulate(&params, &design, 11).unwrap().1
}

fn within_3se(count: usize, total: usize, p: f64) -> bool {
    let se = (p * (1.0 - p) / total as f64).sqrt();
    (count as f64 / total as f64 - p).abs() <= 3.0 * se
}

#[test]
fn recruitment_and_survival_frequencies() {
    let truth = big_truth();
    let n = truth.individuals.len();
    assert_eq!(n, 100_000);
    for (t, &r) in [0.4, 0.2, 0.4].iter().enumerate() {
        let c = truth.individuals.iter().filter(|i| i.recruitment == t).count();
        assert!(within_3se(c, n, r), "r({}) {c}/{n}", t + 1);
    }
    let first: Vec<_> = truth.individuals.iter().filter(|i| i.recruitment == 0).collect();
    let survived = first.iter().filter(|i| i.periods.len() >= 2).count();
    assert!(within_3se(survived, first.len(), 0.7));
}

#[test]
fn arrival_state_and_transition_frequencies() {
    let truth = big_truth();
    let params = &truth.params;
    let records: Vec<_> = truth.individuals.iter().flat_map(|i| &i.periods).collect();

    for t in 0..3 {
        let here: Vec<_> = records.iter().filter(|r| r.period == t).collect();
        for k in 0..5 {
            let c = here.iter().filter(|r| r.arrival == k).count();
            assert!(within_3se(c, here.len(), params.arrival[t][k]), "beta({t},{k})");
        }
    }

    let first_state1 = records.iter().filter(|r| r.states[0] == 1).count();
    assert!(within_3se(first_state1, records.len(), 0.35));

    let mut moves = [[0usize; 2]; 2];
    for r in &records {
        for w in r.states.windows(2) {
            moves[w[0] as usize - 1][w[1] as usize - 1] += 1;
        }
    }
    for (i, row) in moves.iter().enumerate() {
        let total = row[0] + row[1];
        assert!(within_3se(row[1], total, params.transition[0][i][1]), "psi from {}", i + 1);
    }
}

#[test]
fn capture_frequencies_by_state() {
    let truth = big_truth();
    let design = &truth.design;
    let mut seen = [0usize; 2];
    let mut present = [0usize; 2];
    for ind in &truth.individuals {
        for r in &ind.periods {
            let off = design.offset(r.period);
            for (i, &g) in r.states.iter().enumerate() {
                let y = ind.history[off + r.arrival + i];
                present[g as usize - 1] += 1;
                if y != 0 {
                    assert_eq!(y, g);
                    seen[g as usize - 1] += 1;
                }
            }
            for (k, &y) in ind.history[off..off + 5].iter().enumerate() {
                if k < r.arrival || k > r.departure {
                    assert_eq!(y, 0);
                }
            }
        }
    }
    assert!(within_3se(seen[0], present[0], 0.6));
    assert!(within_3se(seen[1], present[1], 0.8));
}

#[test]
fn monte_carlo_abundance_matches_expectation() {
    let (params, design) = paper_scenario(100);
    let expected = expected_abundance(&params, &design);
    for (e, want) in expected.iter().zip([40.0, 48.0, 73.6]) {
        assert!((e - want).abs() < 1e-9);
    }
    let reps = 1000;
    let mut sums = [0.0; 3];
    for seed in 0..reps {
        let (_, truth) = simulate(&params, &design, seed).unwrap();
        for t in 0..3 {
            sums[t] += truth.abundance[t] as f64;
        }
    }
    for t in 0..3 {
        let mean = sums[t] / reps as f64;
        assert!((mean - expected[t]).abs() <= 1.5, "N({}) mean {mean}", t + 1);
    }
}

#[test]
fn simulation_is_deterministic_in_the_seed() {
    let (params, design) = paper_scenario(100);
    let (a, ta) = simulate(&params, &design, 5).unwrap();
    let (b, tb) = simulate(&params, &design, 5).unwrap();
    let (c, _) = simulate(&params, &design, 6).unwrap();
    assert_eq!(a, b);
    assert_eq!(ta, tb);
    assert_ne!(a, c);
}

#[test]
fn dataset_holds_exactly_the_captured_individuals() {
    let (params, design) = paper_scenario(1000);
    let (data, truth) = simulate(&params, &design, 21).unwrap();
    let captured = truth.individuals.iter().filter(|i| i.captured()).count();
    assert_eq!(data.observed() as usize, captured);
}

#[test]
fn non_integral_population_is_rejected() {
    let (mut params, design) = paper_scenario(100);
    params.super_population = 100.5;
    assert!(simulate(&params, &design, 1).is_err());
}
