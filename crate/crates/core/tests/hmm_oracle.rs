use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use msstopover::hmm::{
    build_observation_diagonal, build_primary_initial, build_primary_observation,
    build_primary_transition, build_secondary_initial, build_secondary_transition, log_likelihood,
    primary_likelihood, secondary_index, secondary_likelihood, SecondaryChain,
};
use msstopover::oracle::{
    all_histories, brute_force_likelihood, brute_force_log_likelihood, path_space,
    random_parameters,
};
use msstopover::simulate::simulate;
use msstopover::{Dataset, StudyDesign};

#[test]
fn secondary_initial_small_case() {
    let v = build_secondary_initial(0.4, &[0.25, 0.75], 3);
    assert_eq!(v.len(), 8);
    assert_abs_diff_eq!(v[0], 0.6);
    assert_abs_diff_eq!(v[1], 0.1);
    assert_abs_diff_eq!(v[2], 0.3);
    assert!(v[3..].iter().all(|&x| x == 0.0));
}

#[test]
fn secondary_transition_small_case() {
    let psi = vec![vec![0.9, 0.1], vec![0.4, 0.6]];
    let m = build_secondary_transition(0.5, &[0.3, 0.7], &[0.8, 0.6], &psi, 3).unwrap();
    assert_eq!(m.nrows(), 8);
    assert_abs_diff_eq!(m[(0, 0)], 0.5);
    assert_abs_diff_eq!(m[(0, 1)], 0.15);
    assert_abs_diff_eq!(m[(0, 2)], 0.35);
    // age 1, state 2 retained with 0.8 and moved through Psi
    let from = secondary_index(1, 2, 2);
    assert_abs_diff_eq!(m[(from, secondary_index(2, 1, 2))], 0.8 * 0.4, epsilon = 1e-15);
    assert_abs_diff_eq!(m[(from, secondary_index(2, 2, 2))], 0.8 * 0.6, epsilon = 1e-15);
    assert_abs_diff_eq!(m[(from, 7)], 0.2, epsilon = 1e-15);
    // oldest age always departs
    assert_abs_diff_eq!(m[(secondary_index(3, 1, 2), 7)], 1.0);
    assert_abs_diff_eq!(m[(7, 7)], 1.0);
}

#[test]
fn observation_small_case() {
    let p = vec![vec![0.2, 0.3], vec![0.6]];
    let miss = build_observation_diagonal(0, &p, 2).unwrap();
    assert_eq!(miss, vec![1.0, 0.8, 0.4, 0.7, 1.0, 1.0]);
    let seen = build_observation_diagonal(2, &p, 2).unwrap();
    assert_eq!(seen, vec![0.0, 0.0, 0.6, 0.0, 0.0, 0.0]);
    assert!(build_observation_diagonal(3, &p, 2).is_err());
}

#[test]
fn primary_builders_small_case() {
    assert_eq!(build_primary_initial(0.3, 2), vec![0.7, 0.3, 0.0, 0.0]);
    let m = build_primary_transition(0.25, &[0.9], 2);
    assert_abs_diff_eq!(m[(0, 0)], 0.75);
    assert_abs_diff_eq!(m[(0, 1)], 0.25);
    assert_abs_diff_eq!(m[(1, 2)], 0.9);
    assert_abs_diff_eq!(m[(1, 3)], 0.1, epsilon = 1e-15);
    assert_abs_diff_eq!(m[(2, 3)], 1.0);
    assert_eq!(build_primary_observation(true, 0.2, 2), vec![0.0, 0.2, 0.2, 0.0]);
    assert_eq!(build_primary_observation(false, 0.9, 2), vec![1.0, 0.9, 0.9, 1.0]);
}

fn design_strategy() -> impl Strategy<Value = StudyDesign> {
    (
        prop::collection::vec(1usize..=3, 1..=3),
        1usize..=2,
        any::<bool>(),
    )
        .prop_map(|(occasions, states, restrict)| {
            let t = occasions.len();
            let mut d = StudyDesign::new(occasions, states).unwrap();
            if restrict && states == 2 && t > 1 {
                let avail = (0..t)
                    .map(|i| if i == 0 { vec![1] } else { vec![1, 2] })
                    .collect();
                d = d.with_availability(avail).unwrap();
            }
            d
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn transition_rows_are_stochastic(
        beta in 0.0f64..=1.0,
        a1 in 0.0f64..=1.0,
        phi in prop::collection::vec(0.0f64..=1.0, 3),
        q in prop::collection::vec(0.0f64..=1.0, 2),
    ) {
        let psi = vec![vec![q[0], 1.0 - q[0]], vec![q[1], 1.0 - q[1]]];
        let m = build_secondary_transition(beta, &[a1, 1.0 - a1], &phi, &psi, 4).unwrap();
        for i in 0..m.nrows() {
            prop_assert!((m.row(i).sum() - 1.0).abs() < 1e-12);
            prop_assert!(m.row(i).iter().all(|&x| x >= 0.0));
        }
        let s = build_primary_transition(beta, &phi, 4);
        for i in 0..s.nrows() {
            prop_assert!((s.row(i).sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn observation_outcomes_partition_unity(
        p in prop::collection::vec(prop::collection::vec(0.0f64..=1.0, 3), 1..=3),
    ) {
        let g = p.len();
        let mut total = vec![0.0; 3 * g + 2];
        for outcome in 0..=g {
            let d = build_observation_diagonal(outcome, &p, 3).unwrap();
            for (t, x) in total.iter_mut().zip(d) {
                *t += x;
            }
        }
        prop_assert!(total.iter().all(|&x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn hmm_matches_enumeration(design in design_strategy(), seed in any::<u64>()) {
        prop_assume!(path_space(&design) < 1_000_000);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = random_parameters(&mut rng, &design);
        let mut total = 0.0;
        for h in all_histories(&design) {
            let fast = primary_likelihood(&h, &params, &design).unwrap().value();
            let slow = brute_force_likelihood(&h, &params, &design).unwrap();
            prop_assert!((fast - slow).abs() < 1e-10, "{h:?}: {fast} vs {slow}");
            total += fast;
        }
        prop_assert!((total - 1.0).abs() < 1e-10);
    }

    #[test]
    fn scaled_secondary_matches_dense_product(seed in any::<u64>(), k in 1usize..=5) {
        let design = StudyDesign::new(vec![k], 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = random_parameters(&mut rng, &design);
        let chain = SecondaryChain::new(&design, &params, 0).unwrap();
        let slice: Vec<u8> = (0..k).map(|i| ((seed >> (2 * i)) % 3) as u8).collect();
        let dense = chain.likelihood(&slice);
        let scaled = secondary_likelihood(&slice, &params, &design, 0).unwrap().value();
        prop_assert!((dense - scaled).abs() < 1e-13);
    }
}

#[test]
fn dataset_loglik_matches_enumeration() {
    let design = StudyDesign::new(vec![2, 3], 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for i in 0..5 {
        let mut params = random_parameters(&mut rng, &design);
        params.super_population = 80.0;
        let (data, _) = simulate(&params, &design, i).unwrap();
        params.super_population = data.observed() as f64 + 3.5;
        let fast = log_likelihood(&data, &params).unwrap();
        let slow = brute_force_log_likelihood(&data, &params).unwrap();
        assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
    }
}

#[test]
fn long_histories_stay_finite_on_log_scale() {
    let design = StudyDesign::new(vec![400, 400, 400], 2).unwrap();
    let params = msstopover::ParameterSet::uniform(&design, 10.0);
    let h = vec![1u8; 1200];
    let p = primary_likelihood(&h, &params, &design).unwrap();
    assert!(p.ln().is_finite());
    assert!(p.ln() < -800.0);
    assert_eq!(p.value(), 0.0);
}

#[test]
fn unavailable_state_capture_has_zero_probability() {
    let design = StudyDesign::new(vec![2, 2], 2)
        .unwrap()
        .with_availability(vec![vec![1], vec![1, 2]])
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let params = random_parameters(&mut rng, &design);
    let p = primary_likelihood(&[2, 0, 0, 0], &params, &design).unwrap();
    assert_eq!(p.value(), 0.0);
    assert!(Dataset::new(design, vec![vec![2, 0, 0, 0]], vec![1]).is_err());
}
