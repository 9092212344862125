use minary::affine::{apply_phi, c_dev, exact_operator_norm, operator_norm, AffinePiece, Composition};
use minary::closed_forms::limit_expectation;
use minary::io::{CompetencySpec, ConfigFile};
use minary::model::{sample_active_set, sample_signals, seeded_rng};
use minary::{step, step_forced, CompetencyMatrix, DeltaState, SignalDistribution, SimConfig};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn setup() -> impl Strategy<Value = (SimConfig, CompetencyMatrix)> {
    (1usize..=6, 1usize..=6)
        .prop_flat_map(|(n, m)| {
            (
                Just(n),
                Just(m),
                1..=m,
                0.001f64..0.666,
                prop::collection::vec(0.0f64..=1.0, n * m),
                any::<u64>(),
            )
        })
        .prop_map(|(n, m, k, alpha, entries, seed)| {
            let c = CompetencyMatrix::new(DMatrix::from_row_slice(n, m, &entries)).unwrap();
            (SimConfig::new(n, m, k, alpha).with_seed(seed), c)
        })
}

fn delta_for(n: usize, m: usize) -> impl Strategy<Value = DeltaState> {
    prop::collection::vec(-1.0f64..1.0, n * m)
        .prop_map(move |v| DeltaState::from_matrix(DMatrix::from_row_slice(n, m, &v)).unwrap())
}

fn setup_with_delta() -> impl Strategy<Value = (SimConfig, CompetencyMatrix, DeltaState)> {
    setup().prop_flat_map(|(cfg, c)| {
        let (n, m) = (cfg.n, cfg.m);
        (Just(cfg), Just(c), delta_for(n, m))
    })
}

fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).abs().max()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn learning_signals_sum_to_zero((cfg, c) in setup(), steps in 1usize..200) {
        let mut rng = seeded_rng(cfg.seed, 0);
        let mut state = DeltaState::zeros(cfg.n, cfg.m);
        for _ in 0..steps {
            let trace = step(&state, &c, &cfg, &mut rng);
            prop_assert!(trace.learning.iter().sum::<f64>().abs() <= 1e-12);
            state = trace.delta_after;
        }
        for mean in state.column_means() {
            prop_assert!(mean.abs() <= 1e-10);
        }
    }

    #[test]
    fn signals_cancel((cfg, c, delta) in setup_with_delta(), seed in any::<u64>()) {
        let mut rng = seeded_rng(seed, 0);
        let active = sample_active_set(&mut rng, cfg.m, cfg.k);
        let x1 = sample_signals(&mut rng, &active, &SignalDistribution::Uniform01);
        let x2 = sample_signals(&mut rng, &active, &SignalDistribution::Beta { a: 0.5, b: 3.0 });
        let a = step_forced(&delta, &c, cfg.alpha, &active, &x1);
        let b = step_forced(&delta, &c, cfg.alpha, &active, &x2);
        for (u, v) in a.learning.iter().zip(&b.learning) {
            prop_assert!((u - v).abs() <= 1e-12);
        }
        prop_assert!(max_abs_diff(&a.delta_after.entries, &b.delta_after.entries) <= 1e-12);
    }

    #[test]
    fn step_is_the_affine_map((cfg, c, delta) in setup_with_delta(), seed in any::<u64>()) {
        let mut rng = seeded_rng(seed, 0);
        let trace = step(&delta, &c, &cfg, &mut rng);
        let piece = AffinePiece::new(trace.active.clone(), cfg.alpha, c_dev(&c));
        let phi = apply_phi(&piece, &delta.entries);
        prop_assert!((&trace.delta_after.entries - phi).norm() <= 1e-12);
    }

    #[test]
    fn inactive_columns_are_untouched((cfg, c, delta) in setup_with_delta(), seed in any::<u64>()) {
        let mut rng = seeded_rng(seed, 0);
        let trace = step(&delta, &c, &cfg, &mut rng);
        for j in (0..cfg.m).filter(|j| !trace.active.contains(*j)) {
            for i in 0..cfg.n {
                prop_assert_eq!(trace.delta_after.entries[(i, j)], delta.entries[(i, j)]);
            }
        }
    }

    #[test]
    fn coupled_averaging_uses_every_active_column((cfg, c, delta) in setup_with_delta(), seed in any::<u64>()) {
        // bumping one active column of one perspective's memory moves that
        // perspective's average by bump / k
        let mut rng = seeded_rng(seed, 0);
        let active = sample_active_set(&mut rng, cfg.m, cfg.k);
        let x = sample_signals(&mut rng, &active, &SignalDistribution::Uniform01);
        let base = step_forced(&delta, &c, cfg.alpha, &active, &x);
        let j = active.indices()[0];
        let mut bumped = delta.clone();
        bumped.entries[(0, j)] += 0.5;
        let moved = step_forced(&bumped, &c, cfg.alpha, &active, &x);
        prop_assert!((moved.averaged[0] - base.averaged[0] - 0.5 / cfg.k as f64).abs() <= 1e-12);
    }

    #[test]
    fn perspective_order_does_not_matter((cfg, c, delta) in setup_with_delta(), seed in any::<u64>()) {
        let n = cfg.n;
        let perm: Vec<usize> = (0..n).rev().collect();
        let c_perm = CompetencyMatrix::new(DMatrix::from_fn(n, cfg.m, |i, j| c[(perm[i], j)])).unwrap();
        let d_perm = DeltaState::from_matrix(DMatrix::from_fn(n, cfg.m, |i, j| delta.entries[(perm[i], j)])).unwrap();
        let mut rng = seeded_rng(seed, 0);
        let active = sample_active_set(&mut rng, cfg.m, cfg.k);
        let x = sample_signals(&mut rng, &active, &SignalDistribution::Uniform01);
        let a = step_forced(&delta, &c, cfg.alpha, &active, &x);
        let b = step_forced(&d_perm, &c_perm, cfg.alpha, &active, &x);
        prop_assert!((a.consensus - b.consensus).abs() <= 1e-12);
        for (i, &p) in perm.iter().enumerate() {
            prop_assert!((a.learning[p] - b.learning[i]).abs() <= 1e-12);
            for j in 0..cfg.m {
                prop_assert!((a.delta_after.entries[(p, j)] - b.delta_after.entries[(i, j)]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn c_dev_has_zero_column_means((_, c) in setup()) {
        let d = c_dev(&c);
        for col in d.column_iter() {
            prop_assert!((col.sum() / col.len() as f64).abs() <= 1e-14);
        }
    }

    #[test]
    fn config_round_trip((cfg, c) in setup(), steps in 0u64..10_000, a in 0.1f64..5.0, b in 0.1f64..5.0) {
        let file = ConfigFile {
            n: cfg.n,
            m: cfg.m,
            k: cfg.k,
            alpha: cfg.alpha,
            mu: SignalDistribution::Beta { a, b },
            competency: CompetencySpec::Matrix(c.rows()),
            seed: cfg.seed,
            steps,
            allow_alpha_above_two_thirds: false,
            delta0: None,
        };
        let parsed = ConfigFile::from_json_str(&file.to_json_pretty()).unwrap();
        prop_assert_eq!(&parsed, &file);
        let resolved = parsed.resolve().unwrap();
        prop_assert_eq!(resolved.competency, c);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn single_piece_is_nonexpansive((cfg, c) in setup(), seed in any::<u64>()) {
        let mut rng = seeded_rng(seed, 0);
        let piece = AffinePiece::new(sample_active_set(&mut rng, cfg.m, cfg.k), cfg.alpha, c_dev(&c));
        let est = operator_norm(&piece).unwrap();
        prop_assert!(est.value <= 1.0 + 1e-9);
        let exact = exact_operator_norm(&piece).unwrap();
        prop_assert!((est.value - exact).abs() <= 1e-8);
    }

    #[test]
    fn covering_composition_contracts((cfg, c) in setup(), seed in any::<u64>()) {
        let mut rng = seeded_rng(seed, 0);
        let cdev = c_dev(&c);
        let mut pieces = Vec::new();
        let mut covered = vec![false; cfg.m];
        while covered.iter().any(|c| !c) {
            let s = sample_active_set(&mut rng, cfg.m, cfg.k);
            s.iter().for_each(|j| covered[j] = true);
            pieces.push(AffinePiece::new(s, cfg.alpha, cdev.clone()));
        }
        let comp = Composition(pieces);
        prop_assert!(comp.covers());
        let exact = exact_operator_norm(&comp).unwrap();
        prop_assert!(exact < 1.0);
    }

    #[test]
    fn limit_is_a_fixed_point_of_the_mean_dynamics((cfg, c) in setup()) {
        let solved = minary::affine::stationary_expectation_oracle(&c, &cfg).unwrap();
        let closed = limit_expectation(&c, cfg.k);
        prop_assert!(max_abs_diff(&solved, &closed) <= 1e-10);
    }
}
