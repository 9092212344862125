use minary::affine::{
    apply_phi, c_dev, expected_operator_via, inclusion_second_moment, solve_fixed_point, AffinePiece, AssemblyPath,
};
use minary::closed_forms::{averages, conditional_mean, conditional_variance, eta, limit_expectation, SignVariant};
use minary::scenarios::{build, ScenarioName};
use minary::verify::enumerated_consensus_moments;
use minary::{step_forced, CompetencyMatrix, DeltaState, SignalDistribution};

fn generalist() -> CompetencyMatrix {
    build(ScenarioName::Generalist).competency
}

#[test]
fn generalist_limit_matches_linear_solve() {
    let c = generalist();
    let u = limit_expectation(&c, 3);
    assert!((eta(6, 3) - 1.0 / 6.0).abs() < 1e-15);
    assert!((u[(0, 0)] - 0.075).abs() < 1e-12);
    assert!((u[(2, 5)] - 0.075).abs() < 1e-12);
    assert!(u.row(1).abs().max() < 1e-15);
    for path in [AssemblyPath::Enumerate, AssemblyPath::ClosedForm] {
        let op = expected_operator_via(&c, 3, 0.02, path).unwrap();
        let solved = solve_fixed_point(&op).unwrap();
        assert!((solved - &u).abs().max() <= 1e-10);
    }
}

#[test]
fn halo_limit_matches_linear_solve() {
    let sc = build(ScenarioName::Halo);
    let avg = averages(&sc.competency);
    assert!((avg.col_means[13] - 0.58).abs() < 1e-15);
    assert!(avg.col_means.iter().enumerate().all(|(j, &v)| j == 13 || (v - 0.5).abs() < 1e-15));
    let op = expected_operator_via(&sc.competency, 3, 0.02, AssemblyPath::Auto).unwrap();
    assert_eq!(op.path, AssemblyPath::Enumerate);
    let solved = solve_fixed_point(&op).unwrap();
    let u = limit_expectation(&sc.competency, 3);
    assert!((solved - u).abs().max() <= 1e-10);
}

#[test]
fn small_inclusion_moments() {
    let w = inclusion_second_moment(2, 1);
    assert_eq!(w, nalgebra::DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.5]));
    let w = inclusion_second_moment(4, 4);
    assert!(w.iter().all(|&v| v == 1.0));
}

#[test]
fn main_step_equals_affine_map() {
    let sc = build(ScenarioName::Main);
    let zero = DeltaState::zeros(5, 3);
    let trace = step_forced(&zero, &sc.competency, 0.02, &sc.forced.active, &sc.forced.signals);
    let piece = AffinePiece::new(sc.forced.active.clone(), 0.02, c_dev(&sc.competency));
    let phi = apply_phi(&piece, &zero.entries);
    assert!((trace.delta_after.entries - phi).abs().max() <= 1e-12);
}

#[test]
fn conditional_mean_hand_example() {
    // column means (0.2, 0.4, 0.6), k = 2, first dimension
    let c = CompetencyMatrix::from_rows(&[vec![0.2, 0.4, 0.6]]).unwrap();
    let mu = SignalDistribution::Uniform01;
    let derived = conditional_mean(&c, &mu, 2, 0, SignVariant::Derived).unwrap();
    assert!((derived - 0.15).abs() < 1e-15);
    let (enumerated, _) = enumerated_consensus_moments(&c, &mu, 2, 0);
    assert!((derived - enumerated).abs() < 1e-15);
    let printed = conditional_mean(&c, &mu, 2, 0, SignVariant::Printed).unwrap();
    assert!((printed - enumerated).abs() > 0.1);
}

#[test]
fn conditional_variance_hand_example() {
    let c = CompetencyMatrix::from_rows(&[vec![0.1, 0.3, 0.5, 0.7]]).unwrap();
    let mu = SignalDistribution::Uniform01;
    let closed = conditional_variance(&c, &mu, 2, 0).unwrap();
    let (_, enumerated) = enumerated_consensus_moments(&c, &mu, 2, 0);
    assert!((closed - enumerated).abs() <= 1e-12);
    // subsets {1,2}, {1,3}, {1,4} shift the mean by -(0.1 + c_r)/2
    let shifts = [0.2, 0.3, 0.4];
    let mean = shifts.iter().sum::<f64>() / 3.0;
    let spread = shifts.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / 3.0;
    assert!((closed - (1.0 / 24.0 + spread)).abs() <= 1e-15);
}

#[test]
fn enumeration_agrees_for_every_small_configuration() {
    let mut rng = minary::seeded_rng(23, 0);
    use rand::Rng;
    for m in 3..=6 {
        for n in [1, 2, 5] {
            let c = CompetencyMatrix::new(nalgebra::DMatrix::from_fn(n, m, |_, _| rng.random())).unwrap();
            for mu in [
                SignalDistribution::Uniform01,
                SignalDistribution::Point { value: 0.25 },
                SignalDistribution::Beta { a: 3.0, b: 1.5 },
            ] {
                for k in 1..=m {
                    for j in 0..m {
                        let (mean, var) = enumerated_consensus_moments(&c, &mu, k, j);
                        let cm = conditional_mean(&c, &mu, k, j, SignVariant::Derived).unwrap();
                        let cv = conditional_variance(&c, &mu, k, j).unwrap();
                        assert!((cm - mean).abs() <= 1e-12, "m={m} k={k} j={j}");
                        assert!((cv - var).abs() <= 1e-12, "m={m} k={k} j={j}");
                    }
                }
            }
        }
    }
}

#[test]
fn full_active_set_variance_is_signal_only() {
    let c = generalist();
    let mu = SignalDistribution::Uniform01;
    for j in 0..6 {
        assert_eq!(conditional_variance(&c, &mu, 6, j).unwrap(), mu.variance() / 6.0);
    }
}
