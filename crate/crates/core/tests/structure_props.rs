use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use msstopover::model::{
    arrival_from_logistic, conditional_arrival, conditional_recruitment, stick_breaking,
};
use msstopover::model::transform::{expit, log_ratios, logit, softmax_with_reference};
use msstopover::oracle::random_parameters;
use msstopover::{expand_structure, Error, ModelStructure, StudyDesign};

fn designs() -> Vec<StudyDesign> {
    vec![
        StudyDesign::new(vec![5, 5, 5], 2).unwrap(),
        StudyDesign::new(vec![3, 1, 4, 2], 3)
            .unwrap()
            .with_availability(vec![vec![1], vec![1, 2], vec![1, 2, 3], vec![2, 3]])
            .unwrap()
            .with_max_ages(3, vec![2, 1, 3, 2])
            .unwrap(),
        StudyDesign::new(vec![4], 1).unwrap(),
    ]
}

fn structures() -> Vec<ModelStructure> {
    let mut v = vec![
        ModelStructure::constant(),
        ModelStructure::scenario(),
        ModelStructure::newt(),
        ModelStructure::saturated(),
    ];
    v.push(
        "r = fixed(0.5, 0.2, 0.2, 0.1); s = year + slope(age); beta = free; \
         phi = occ*year; p = state + slope(age); alpha = year; psi = 1"
            .parse()
            .unwrap(),
    );
    v
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn every_expansion_is_a_valid_parameter_set(
        seed in any::<u64>(),
        scale in 0.0f64..8.0,
        which in 0usize..15,
    ) {
        let design = &designs()[which % 3];
        let structure = &structures()[which / 3];
        let Ok(compiled) = structure.compile(design) else {
            // fixed(..) recruitment only fits four-period designs
            return Ok(());
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta: Vec<f64> = (0..compiled.dimension())
            .map(|_| scale * (rand::Rng::random::<f64>(&mut rng) * 2.0 - 1.0))
            .collect();
        let params = compiled.expand(&theta, 17).unwrap();
        prop_assert!(params.validate(design).is_ok());
        prop_assert!(params.super_population > 17.0);
    }

    #[test]
    fn stick_breaking_inverts_conditionals(w in prop::collection::vec(0.01f64..1.0, 1..8)) {
        let total: f64 = w.iter().sum();
        let simplex: Vec<f64> = w.iter().map(|x| x / total).collect();
        let back = stick_breaking(&conditional_recruitment(&simplex).unwrap());
        for (a, b) in simplex.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        let back = stick_breaking(&conditional_arrival(&simplex).unwrap());
        for (a, b) in simplex.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn logistic_arrival_is_a_simplex(eta in -50.0f64..50.0, delta in -200.0f64..200.0, k in 1usize..40) {
        let beta = arrival_from_logistic(eta, delta, k);
        prop_assert_eq!(beta.len(), k);
        prop_assert!(beta.iter().all(|&b| (0.0..=1.0).contains(&b)));
        prop_assert!((beta.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn logit_and_softmax_round_trip(
        x in -15.0f64..15.0,
        logits in prop::collection::vec(-10.0f64..10.0, 1..6),
    ) {
        prop_assert!((logit(expit(x)) - x).abs() < 1e-6 * (1.0 + x.abs()));
        let simplex = softmax_with_reference(&logits);
        let back = log_ratios(&simplex);
        for (a, b) in logits.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn saturated_round_trip(seed in any::<u64>(), which in 0usize..3) {
        let design = &designs()[which];
        let compiled = ModelStructure::saturated().compile(design).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = random_parameters(&mut rng, design);
        params.super_population = 250.5;
        let theta = compiled.to_unconstrained(&params, 90).unwrap();
        let back = compiled.expand(&theta, 90).unwrap();
        let mut canonical = params.clone();
        canonical.canonicalize(design);
        prop_assert!(back.max_abs_diff(&canonical) < 1e-10);
        let again = compiled.to_unconstrained(&back, 90).unwrap();
        for (a, b) in theta.iter().zip(&again) {
            prop_assert!((a - b).abs() < 1e-8 * (1.0 + a.abs()));
        }
    }
}

#[test]
fn constant_structure_cannot_represent_year_effects() {
    let design = StudyDesign::new(vec![3, 3], 1).unwrap();
    let compiled = ModelStructure::constant().compile(&design).unwrap();
    let mut params = msstopover::ParameterSet::uniform(&design, 40.0);
    params.capture[0][0][0][0] = 0.9;
    assert!(matches!(
        compiled.to_unconstrained(&params, 10),
        Err(Error::NotRepresentable(_))
    ));
}

#[test]
fn logistic_arrival_has_no_inverse() {
    let design = StudyDesign::new(vec![5, 5, 5], 2).unwrap();
    let compiled = ModelStructure::scenario().compile(&design).unwrap();
    let theta = vec![0.1; compiled.dimension()];
    let params = compiled.expand(&theta, 5).unwrap();
    assert!(matches!(
        compiled.to_unconstrained(&params, 5),
        Err(Error::NotRepresentable(_))
    ));
}

#[test]
fn free_function_matches_compiled_expansion() {
    let design = &designs()[1];
    let s = ModelStructure::newt();
    let c = s.compile(design).unwrap();
    let theta: Vec<f64> = (0..c.dimension()).map(|i| (i as f64 * 0.37).sin()).collect();
    assert_eq!(
        expand_structure(&s, &theta, design, 3).unwrap(),
        c.expand(&theta, 3).unwrap()
    );
}

#[test]
fn coefficient_names_are_unique() {
    for design in designs() {
        for s in structures() {
            let Ok(c) = s.compile(&design) else { continue };
            let mut names = c.names().to_vec();
            names.sort();
            names.dedup();
            assert_eq!(names.len(), c.dimension());
        }
    }
}
