//! Verification suites: each one draws random configurations from a seeded
//! stream, runs the simulator against an independent oracle, and records
//! the worst discrepancy as a [`Check`].

use std::fmt;
use std::str::FromStr;

use itertools::Itertools;
use nalgebra::DMatrix;
use rand::Rng;
use serde::Serialize;

use crate::affine::{
    c_dev, exact_operator_norm, expected_operator_via, inclusion_second_moment, operator_norm, p1, p2,
    q_matrix, qs_square, solve_fixed_point, AffinePiece, AssemblyPath, Composition, LinearMap,
};
use crate::closed_forms::{
    averages, conditional_mean, conditional_variance, limit_expectation, row_deviation, SignVariant,
};
use crate::io::Resolved;
use crate::model::{
    sample_active_set, sample_signals, seeded_rng, step, step_forced, ActiveSet, CompetencyMatrix, DeltaState,
    SignalDistribution, SimConfig, SimRng,
};
use crate::montecarlo::{
    compare_report, compare_report_family, estimate_conditional_consensus, estimate_delta_mean, inclusion_rate,
    run_ensemble, EnsembleSpec, EstimateReport, FAMILY_PASS_FRACTION, Z_THRESHOLD,
};
use crate::scenarios::{build, ScenarioName};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Conservation,
    Affine,
    Lipschitz,
    Limit,
    ConsensusMoments,
    Identities,
    All,
}

impl Suite {
    pub const EACH: [Suite; 6] = [
        Self::Conservation,
        Self::Affine,
        Self::Lipschitz,
        Self::Limit,
        Self::ConsensusMoments,
        Self::Identities,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Conservation => "conservation",
            Self::Affine => "affine",
            Self::Lipschitz => "lipschitz",
            Self::Limit => "limit",
            Self::ConsensusMoments => "consensus-moments",
            Self::Identities => "identities",
            Self::All => "all",
        }
    }

    fn stream(self) -> u64 {
        Self::EACH.iter().position(|s| *s == self).map_or(0, |p| p as u64 + 1)
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::EACH
            .iter()
            .chain(std::iter::once(&Self::All))
            .find(|suite| suite.as_str() == s)
            .copied()
            .ok_or_else(|| {
                format!("unknown suite `{s}` (expected conservation, affine, lipschitz, limit, consensus-moments, identities or all)")
            })
    }
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    /// Random configurations per suite.
    pub trials: usize,
    pub seed: u64,
    /// Replicas for the Monte Carlo limit test; 0 skips it.
    pub replicas: usize,
    pub burn_in: u64,
    pub measure_steps: u64,
    /// Variant whose conditional-mean checks gate the consensus suite.
    pub sign_variant: SignVariant,
    pub z_threshold: f64,
    pub family_pass_fraction: f64,
    /// Used by the Monte Carlo parts instead of the built-in configurations.
    pub config: Option<(String, Resolved)>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            trials: 100,
            seed: 7,
            replicas: 400,
            burn_in: 2_000,
            measure_steps: 1_000,
            sign_variant: SignVariant::Derived,
            z_threshold: Z_THRESHOLD,
            family_pass_fraction: FAMILY_PASS_FRACTION,
            config: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    /// Worst value of the checked quantity over all cases.
    pub observed: f64,
    pub bound: f64,
    /// `"<="`, `"<"` or `">="`.
    pub relation: &'static str,
    pub cases: usize,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub details: Vec<String>,
}

impl Check {
    pub fn at_most(name: impl Into<String>, observed: f64, bound: f64, cases: usize) -> Self {
        Self::make(name, observed, bound, "<=", observed <= bound, cases)
    }

    pub fn below(name: impl Into<String>, observed: f64, bound: f64, cases: usize) -> Self {
        Self::make(name, observed, bound, "<", observed < bound, cases)
    }

    pub fn at_least(name: impl Into<String>, observed: f64, bound: f64, cases: usize) -> Self {
        Self::make(name, observed, bound, ">=", observed >= bound, cases)
    }

    fn make(name: impl Into<String>, observed: f64, bound: f64, relation: &'static str, pass: bool, cases: usize) -> Self {
        Self {
            name: name.into(),
            pass,
            observed,
            bound,
            relation,
            cases,
            details: Vec::new(),
        }
    }

    pub fn with_details(mut self, details: Vec<String>) -> Self {
        self.details = details;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub pass: bool,
    pub checks: Vec<Check>,
    /// Monte Carlo estimates, including report-only ones.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub estimates: Vec<EstimateReport>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl SuiteReport {
    fn new(suite: Suite, checks: Vec<Check>, estimates: Vec<EstimateReport>, notes: Vec<String>) -> Self {
        Self {
            suite,
            pass: checks.iter().all(|c| c.pass),
            checks,
            estimates,
            notes,
        }
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub pass: bool,
    pub seed: u64,
    pub trials: usize,
    pub suites: Vec<SuiteReport>,
}

pub fn run(suite: Suite, opts: &VerifyOptions) -> VerifyReport {
    let suites: Vec<SuiteReport> = match suite {
        Suite::All => Suite::EACH.iter().map(|s| run_one(*s, opts)).collect(),
        s => vec![run_one(s, opts)],
    };
    VerifyReport {
        pass: suites.iter().all(|s| s.pass),
        seed: opts.seed,
        trials: opts.trials,
        suites,
    }
}

pub fn run_one(suite: Suite, opts: &VerifyOptions) -> SuiteReport {
    let mut rng = seeded_rng(opts.seed, suite.stream());
    match suite {
        Suite::Conservation => conservation(opts, &mut rng),
        Suite::Affine => affine(opts, &mut rng),
        Suite::Lipschitz => lipschitz(opts, &mut rng),
        Suite::Limit => limit(opts, &mut rng),
        Suite::ConsensusMoments => consensus_moments(opts, &mut rng),
        Suite::Identities => identities(opts, &mut rng),
        Suite::All => unreachable!("expanded by run"),
    }
}

/// Largest-so-far that lets NaN win, so a NaN anywhere fails the check.
fn worse(acc: f64, x: f64) -> f64 {
    if x.is_nan() || x > acc {
        x
    } else {
        acc
    }
}

fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).fold(0.0, |acc, (x, y)| worse(acc, (x - y).abs()))
}

fn random_distribution(rng: &mut SimRng) -> SignalDistribution {
    match rng.random_range(0..3u32) {
        0 => SignalDistribution::Uniform01,
        1 => SignalDistribution::Beta {
            a: rng.random_range(0.5..5.0),
            b: rng.random_range(0.5..5.0),
        },
        _ => SignalDistribution::Point {
            value: rng.random(),
        },
    }
}

/// Random valid configuration with `n, m <= 8` and `α` inside `(0, 2/3)`.
pub fn random_setup(rng: &mut SimRng) -> (SimConfig, CompetencyMatrix) {
    let n = rng.random_range(1..=8usize);
    let m = rng.random_range(1..=8usize);
    random_setup_with(rng, n, m)
}

fn random_setup_with(rng: &mut SimRng, n: usize, m: usize) -> (SimConfig, CompetencyMatrix) {
    let k = rng.random_range(1..=m);
    let alpha = rng.random_range(1e-3..(2.0 / 3.0 - 1e-3));
    let c = CompetencyMatrix::new(DMatrix::from_fn(n, m, |_, _| rng.random())).expect("entries in [0, 1)");
    let cfg = SimConfig::new(n, m, k, alpha)
        .with_mu(random_distribution(rng))
        .with_seed(rng.random());
    (cfg, c)
}

fn random_delta(rng: &mut SimRng, n: usize, m: usize) -> DeltaState {
    DeltaState::from_matrix(DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0))).expect("finite")
}

const STEPS_PER_CONFIG: usize = 1_000;
const TUPLES_PER_CONFIG: usize = 100;
const PIECES_PER_CONFIG: usize = 10;

fn conservation(opts: &VerifyOptions, rng: &mut SimRng) -> SuiteReport {
    let mut worst_sum = 0.0_f64;
    let mut worst_col_mean = 0.0_f64;
    let mut steps = 0;
    for _ in 0..opts.trials {
        let (cfg, c) = random_setup(rng);
        let mut state = DeltaState::zeros(cfg.n, cfg.m);
        let mut sim_rng = seeded_rng(cfg.seed, 0);
        for _ in 0..STEPS_PER_CONFIG {
            let trace = step(&state, &c, &cfg, &mut sim_rng);
            worst_sum = worse(worst_sum, trace.learning.iter().sum::<f64>().abs());
            for mean in trace.delta_after.column_means() {
                worst_col_mean = worse(worst_col_mean, mean.abs());
            }
            state = trace.delta_after;
            steps += 1;
        }
    }
    SuiteReport::new(
        Suite::Conservation,
        vec![
            Check::at_most("max |sum_i d_i|", worst_sum, 1e-12, steps),
            Check::at_most("max |column mean of Delta|", worst_col_mean, 1e-10, steps),
        ],
        Vec::new(),
        Vec::new(),
    )
}

/// Splits `M` into its column-mean part (all rows equal) and the rest.
fn split_columns(m: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = m.nrows() as f64;
    let means: Vec<f64> = m.column_iter().map(|c| c.sum() / n).collect();
    let v = DMatrix::from_fn(m.nrows(), m.ncols(), |_, j| means[j]);
    let perp = m - &v;
    (v, perp)
}

fn affine(opts: &VerifyOptions, rng: &mut SimRng) -> SuiteReport {
    let mut step_gap = 0.0_f64;
    let mut learning_gap = 0.0_f64;
    let mut paired_delta_gap = 0.0_f64;
    let mut leak_v = 0.0_f64;
    let mut leak_perp = 0.0_f64;
    let mut v_formula = 0.0_f64;
    let mut perp_formula = 0.0_f64;
    let mut inactive_gap = 0.0_f64;
    let mut tuples = 0;
    for _ in 0..opts.trials {
        let (cfg, c) = random_setup(rng);
        let cdev = c_dev(&c);
        for _ in 0..TUPLES_PER_CONFIG {
            let state = random_delta(rng, cfg.n, cfg.m);
            let active = sample_active_set(rng, cfg.m, cfg.k);
            let x1 = sample_signals(rng, &active, &SignalDistribution::Uniform01);
            let x2 = sample_signals(rng, &active, &SignalDistribution::Uniform01);
            let t1 = step_forced(&state, &c, cfg.alpha, &active, &x1);
            let t2 = step_forced(&state, &c, cfg.alpha, &active, &x2);

            let piece = AffinePiece::new(active.clone(), cfg.alpha, cdev.clone());
            let phi = piece.apply(&state.entries);
            step_gap = worse(step_gap, (&t1.delta_after.entries - &phi).norm());

            for (a, b) in t1.learning.iter().zip(&t2.learning) {
                learning_gap = worse(learning_gap, (a - b).abs());
            }
            paired_delta_gap = worse(paired_delta_gap, max_abs_diff(&t1.delta_after.entries, &t2.delta_after.entries));

            let (v, perp) = split_columns(&state.entries);
            let av = piece.apply_linear(&v);
            let aperp = piece.apply_linear(&perp);
            leak_v = worse(leak_v, split_columns(&av).1.norm());
            leak_perp = worse(leak_perp, split_columns(&aperp).0.norm());
            let d = DMatrix::from_fn(cfg.m, cfg.m, |a, b| {
                if a == b && active.contains(a) {
                    cfg.alpha
                } else {
                    0.0
                }
            });
            let scaled = &v * (DMatrix::identity(cfg.m, cfg.m) - d);
            v_formula = worse(v_formula, max_abs_diff(&av, &scaled));
            let q = q_matrix(&active, cfg.alpha, cfg.k, cfg.m);
            perp_formula = worse(perp_formula, max_abs_diff(&aperp, &(&perp * q)));

            let image = piece.apply_linear(&state.entries);
            for j in (0..cfg.m).filter(|j| !active.contains(*j)) {
                for i in 0..cfg.n {
                    inactive_gap = worse(inactive_gap, (image[(i, j)] - state.entries[(i, j)]).abs());
                }
            }
            tuples += 1;
        }
    }
    SuiteReport::new(
        Suite::Affine,
        vec![
            Check::at_most("||step(Delta) - Phi_S(Delta)||_F", step_gap, 1e-12, tuples),
            Check::at_most("signal cancellation: max |d(x) - d(x')|", learning_gap, 1e-12, tuples),
            Check::at_most("signal cancellation: max |Delta(x) - Delta(x')|", paired_delta_gap, 1e-12, tuples),
            Check::at_most("A_S maps equal-row matrices into themselves (leakage)", leak_v, 1e-12, tuples),
            Check::at_most("A_S maps zero-column-sum matrices into themselves (leakage)", leak_perp, 1e-12, tuples),
            Check::at_most("A_S(M) = M(I - alpha D) on equal-row matrices", v_formula, 1e-12, tuples),
            Check::at_most("A_S(M) = M Q_S on zero-column-sum matrices", perp_formula, 1e-12, tuples),
            Check::at_most("A_S leaves inactive columns unchanged", inactive_gap, 0.0, tuples),
        ],
        Vec::new(),
        Vec::new(),
    )
}

/// Active sets drawn until their union is all of `0..m`.
fn covering_composition(rng: &mut SimRng, cfg: &SimConfig, cdev: &DMatrix<f64>) -> Composition {
    let mut pieces = Vec::new();
    let mut covered = vec![false; cfg.m];
    while !covered.iter().all(|c| *c) {
        let active = sample_active_set(rng, cfg.m, cfg.k);
        for j in active.iter() {
            covered[j] = true;
        }
        pieces.push(AffinePiece::new(active, cfg.alpha, cdev.clone()));
    }
    Composition(pieces)
}

fn lipschitz(opts: &VerifyOptions, rng: &mut SimRng) -> SuiteReport {
    let mut worst_piece = 0.0_f64;
    let mut worst_composition = 0.0_f64;
    let mut worst_svd_gap = 0.0_f64;
    let mut pieces = 0;
    let mut compositions = 0;
    let mut svd_cases = 0;
    let mut errors = Vec::new();
    let mut record_svd = |map: &dyn LinearMap, estimate: f64, gap: &mut f64, cases: &mut usize| {
        let (n, m) = map.shape();
        if n * m <= 400 {
            match exact_operator_norm(map) {
                Ok(exact) => {
                    *gap = worse(*gap, (exact - estimate).abs());
                    *cases += 1;
                }
                Err(e) => errors.push(e.to_string()),
            }
        }
    };
    let mut failures = Vec::new();
    for _ in 0..opts.trials {
        let (cfg, c) = random_setup(rng);
        let cdev = c_dev(&c);
        for _ in 0..PIECES_PER_CONFIG {
            let active = sample_active_set(rng, cfg.m, cfg.k);
            let piece = AffinePiece::new(active, cfg.alpha, cdev.clone());
            match operator_norm(&piece) {
                Ok(est) => {
                    worst_piece = worse(worst_piece, est.value);
                    record_svd(&piece, est.value, &mut worst_svd_gap, &mut svd_cases);
                }
                Err(e) => {
                    failures.push(format!("piece: {e}"));
                    worst_piece = f64::NAN;
                }
            }
            pieces += 1;
        }
        let comp = covering_composition(rng, &cfg, &cdev);
        match operator_norm(&comp) {
            Ok(est) => {
                worst_composition = worse(worst_composition, est.value);
                record_svd(&comp, est.value, &mut worst_svd_gap, &mut svd_cases);
            }
            Err(e) => {
                failures.push(format!("composition: {e}"));
                worst_composition = f64::NAN;
            }
        }
        compositions += 1;
    }
    failures.extend(errors);
    let mut notes = Vec::new();
    if worst_composition.is_finite() {
        notes.push(format!("smallest contraction margin over covering compositions: {:.3e}", 1.0 - worst_composition));
    }
    SuiteReport::new(
        Suite::Lipschitz,
        vec![
            Check::at_most("Lip(A_S), alpha in (0, 2/3)", worst_piece, 1.0 + 1e-9, pieces).with_details(failures.clone()),
            Check::below("Lip of compositions covering all dimensions", worst_composition, 1.0, compositions),
            Check::at_most("|power iteration - SVD|", worst_svd_gap, 1e-8, svd_cases),
        ],
        Vec::new(),
        notes,
    )
}

/// Closed-form limit against the linear solve, worst cells listed on failure.
fn limit_against_solve(cfg: &SimConfig, c: &CompetencyMatrix, label: &str, worst: &mut f64, details: &mut Vec<String>) {
    let op = match expected_operator_via(c, cfg.k, cfg.alpha, AssemblyPath::Auto) {
        Ok(op) => op,
        Err(e) => {
            *worst = f64::NAN;
            details.push(format!("{label}: {e}"));
            return;
        }
    };
    let solved = match solve_fixed_point(&op) {
        Ok(s) => s,
        Err(e) => {
            *worst = f64::NAN;
            details.push(format!("{label}: {e}"));
            return;
        }
    };
    let closed = limit_expectation(c, cfg.k);
    for i in 0..cfg.n {
        for j in 0..cfg.m {
            let gap = (closed[(i, j)] - solved[(i, j)]).abs();
            *worst = worse(*worst, gap);
            if gap.is_nan() || gap > 1e-10 {
                details.push(format!(
                    "{label} cell ({},{}): closed form {:e}, linear solve {:e}",
                    i + 1,
                    j + 1,
                    closed[(i, j)],
                    solved[(i, j)]
                ));
            }
        }
    }
}

fn limit(opts: &VerifyOptions, rng: &mut SimRng) -> SuiteReport {
    let mut worst = 0.0_f64;
    let mut details = Vec::new();
    for t in 0..opts.trials {
        let (cfg, c) = random_setup(rng);
        limit_against_solve(&cfg, &c, &format!("random config {t}"), &mut worst, &mut details);
    }
    let mut cases = opts.trials;
    for name in [ScenarioName::Generalist, ScenarioName::Halo] {
        let sc = build(name);
        limit_against_solve(&sc.config, &sc.competency, name.as_str(), &mut worst, &mut details);
        cases += 1;
    }
    let mut checks = vec![Check::at_most("max |closed-form limit - linear solve|", worst, 1e-10, cases).with_details(details)];
    let mut estimates = Vec::new();
    let mut notes = Vec::new();

    if opts.replicas > 0 {
        let (label, cfg, c) = match &opts.config {
            Some((label, r)) => (label.clone(), r.config.clone(), r.competency.clone()),
            None => {
                let sc = build(ScenarioName::Generalist);
                ("generalist".to_string(), sc.config, sc.competency)
            }
        };
        let spec = EnsembleSpec::new(cfg, opts.replicas, opts.burn_in, opts.measure_steps, opts.seed);
        match run_ensemble(&spec, &c) {
            Ok(out) => {
                let est = estimate_delta_mean(&out, &c, opts.z_threshold);
                let summary = compare_report_family(&est.reports, opts.family_pass_fraction);
                let mut check = Check::at_least(
                    format!("{label}: fraction of Delta cells with |z| <= {}", opts.z_threshold),
                    est.pass_fraction(),
                    opts.family_pass_fraction,
                    est.reports.len(),
                )
                .with_details(summary.failed.clone());
                check.pass = summary.pass;
                checks.push(check);
                notes.push(format!(
                    "{label}: {} replicas, burn-in {}, {} measured steps, max |z| = {:.3}",
                    opts.replicas, opts.burn_in, opts.measure_steps, summary.max_abs_z
                ));
                if !est.insufficient_burn_in.is_empty() {
                    notes.push(format!(
                        "burn-in may be too short; half-window drift exceeds the standard error in: {}",
                        est.insufficient_burn_in.join(", ")
                    ));
                }
                notes.extend(summary.warnings);
                estimates = est.reports;
            }
            Err(e) => checks.push(Check::at_least(format!("{label}: ensemble"), f64::NAN, 0.0, 0).with_details(vec![e.to_string()])),
        }
    }
    SuiteReport::new(Suite::Limit, checks, estimates, notes)
}

/// Conditional mean and variance of `Ḡ` given `j ∈ S`, by enumerating every
/// `(k-1)`-subset of the other dimensions. The memory's column means are zero,
/// so given `S` the consensus is `(1/k) Σ_{r∈S} (x_r - C̄_r)`.
pub fn enumerated_consensus_moments(
    competency: &CompetencyMatrix,
    mu: &SignalDistribution,
    k: usize,
    j: usize,
) -> (f64, f64) {
    let c = competency.matrix();
    let (n, m) = c.shape();
    let col: Vec<f64> = (0..m).map(|r| (0..n).map(|i| c[(i, r)]).sum::<f64>() / n as f64).collect();
    let kf = k as f64;
    let conditional_means: Vec<f64> = (0..m)
        .filter(|&r| r != j)
        .combinations(k - 1)
        .map(|rest| mu.mean() - (col[j] + rest.iter().map(|&r| col[r]).sum::<f64>()) / kf)
        .collect();
    let count = conditional_means.len() as f64;
    let mean = conditional_means.iter().sum::<f64>() / count;
    let spread = conditional_means.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / count;
    (mean, mu.variance() / kf + spread)
}

fn builtin_consensus_configs() -> Vec<(String, SimConfig, CompetencyMatrix)> {
    let small = CompetencyMatrix::from_rows(&[vec![0.1, 0.3, 0.9], vec![0.3, 0.5, 0.5], vec![0.2, 0.4, 0.7]])
        .expect("valid");
    let five = CompetencyMatrix::from_rows(&[
        vec![0.9, 0.2, 0.4, 0.6, 0.1],
        vec![0.7, 0.1, 0.5, 0.8, 0.3],
        vec![0.8, 0.3, 0.6, 0.7, 0.2],
        vec![0.6, 0.2, 0.3, 0.9, 0.0],
    ])
    .expect("valid");
    let point = CompetencyMatrix::from_rows(&[vec![0.1, 0.3, 0.5, 0.7], vec![0.1, 0.3, 0.5, 0.7]]).expect("valid");
    vec![
        ("m=3, k=2, uniform".to_string(), SimConfig::new(3, 3, 2, 0.1), small),
        (
            "m=5, k=3, beta(2, 3)".to_string(),
            SimConfig::new(4, 5, 3, 0.05).with_mu(SignalDistribution::Beta { a: 2.0, b: 3.0 }),
            five,
        ),
        (
            "m=4, k=2, point mass".to_string(),
            SimConfig::new(2, 4, 2, 0.1).with_mu(SignalDistribution::Point { value: 0.4 }),
            point,
        ),
    ]
}

const CONSENSUS_REPLICAS: usize = 16;
const CONSENSUS_STEPS: u64 = 2_500;
const MIN_MONTE_CARLO_SAMPLES: u64 = 10_000;

fn consensus_moments(opts: &VerifyOptions, rng: &mut SimRng) -> SuiteReport {
    let variant = opts.sign_variant;
    let mut mean_gap = 0.0_f64;
    let mut var_gap = 0.0_f64;
    let mut other_gap = 0.0_f64;
    let mut var_floor = 0.0_f64;
    let mut cases = 0;
    let mut errors = Vec::new();
    let other = match variant {
        SignVariant::Derived => SignVariant::Printed,
        SignVariant::Printed => SignVariant::Derived,
    };
    for _ in 0..opts.trials {
        let n = rng.random_range(1..=8usize);
        let m = rng.random_range(3..=6usize);
        let (cfg, c) = random_setup_with(rng, n, m);
        for k in 1..=m {
            for j in 0..m {
                let (mean, var) = enumerated_consensus_moments(&c, &cfg.mu, k, j);
                match (
                    conditional_mean(&c, &cfg.mu, k, j, variant),
                    conditional_mean(&c, &cfg.mu, k, j, other),
                    conditional_variance(&c, &cfg.mu, k, j),
                ) {
                    (Ok(cm), Ok(om), Ok(cv)) => {
                        mean_gap = worse(mean_gap, (cm - mean).abs());
                        other_gap = worse(other_gap, (om - mean).abs());
                        var_gap = worse(var_gap, (cv - var).abs());
                        var_floor = worse(var_floor, cfg.mu.variance() / k as f64 - cv);
                    }
                    (a, b, v) => {
                        for e in [a.err(), b.err(), v.err()].into_iter().flatten() {
                            errors.push(e.to_string());
                        }
                        mean_gap = f64::NAN;
                    }
                }
                cases += 1;
            }
        }
    }
    let mut checks = vec![
        Check::at_most(format!("|conditional mean ({}) - enumeration|", variant.label()), mean_gap, 1e-12, cases)
            .with_details(errors),
        Check::at_most("|conditional variance - enumeration|", var_gap, 1e-12, cases),
        Check::at_most("variance below sigma^2/k", var_floor, 1e-14, cases),
    ];
    let mut notes = vec![format!(
        "conditional mean ({}) vs enumeration, worst gap: {:.3e} (report only)",
        other.label(),
        other_gap
    )];

    let configs = match &opts.config {
        Some((label, r)) => vec![(label.clone(), r.config.clone(), r.competency.clone())],
        None => builtin_consensus_configs(),
    };
    let mut estimates = Vec::new();
    let mut gated = Vec::new();
    let mut rate_worst = 0.0_f64;
    let mut rate_cases = 0;
    let mut fewest_samples = u64::MAX;
    let mut mc_errors = Vec::new();
    for (idx, (label, cfg, c)) in configs.iter().enumerate() {
        let spec = EnsembleSpec::new(
            cfg.clone(),
            CONSENSUS_REPLICAS,
            0,
            CONSENSUS_STEPS,
            opts.seed.wrapping_add(idx as u64),
        );
        let out = match run_ensemble(&spec, c) {
            Ok(out) => out,
            Err(e) => {
                mc_errors.push(format!("{label}: {e}"));
                continue;
            }
        };
        let p = cfg.k as f64 / cfg.m as f64;
        for j in 0..cfg.m {
            let (hits, total) = inclusion_rate(&out, j);
            let se = (p * (1.0 - p) / total as f64).sqrt();
            let z = crate::montecarlo::z_score(hits as f64 / total as f64, se, p);
            rate_worst = worse(rate_worst, z.abs());
            rate_cases += 1;
            match estimate_conditional_consensus(&out, c, j, variant, opts.z_threshold) {
                Ok(est) => {
                    fewest_samples = fewest_samples.min(est.samples);
                    let tag = |mut r: EstimateReport| {
                        r.quantity = format!("{label}: {}", r.quantity);
                        r
                    };
                    gated.push(tag(est.mean.clone()));
                    gated.push(tag(est.variance.clone()));
                    estimates.push(tag(est.mean));
                    estimates.push(tag(est.variance));
                    let alt = tag(est.alternate_mean);
                    notes.push(format!(
                        "{}: z = {:.2} ({})",
                        alt.quantity,
                        alt.z_score,
                        if alt.pass { "within threshold" } else { "rejected" }
                    ));
                    estimates.push(alt);
                }
                Err(e) => mc_errors.push(format!("{label}, dimension {}: {e}", j + 1)),
            }
        }
    }
    let summary = compare_report(&gated);
    let mut mc = Check::at_most(
        format!("Monte Carlo conditional moments ({}), max |z|", variant.label()),
        summary.max_abs_z,
        opts.z_threshold,
        summary.checks,
    )
    .with_details(summary.failed.iter().cloned().chain(mc_errors.iter().cloned()).collect());
    mc.pass = summary.pass && mc_errors.is_empty();
    checks.push(mc);
    checks.push(Check::at_least(
        "fewest conditioned samples per dimension",
        if rate_cases == 0 { 0.0 } else { fewest_samples as f64 },
        MIN_MONTE_CARLO_SAMPLES as f64,
        rate_cases,
    ));
    checks.push(Check::at_most("inclusion rate of each dimension vs k/m, max |z|", rate_worst, opts.z_threshold, rate_cases));
    SuiteReport::new(Suite::ConsensusMoments, checks, estimates, notes)
}

fn identities(opts: &VerifyOptions, rng: &mut SimRng) -> SuiteReport {
    let mut q_gap = 0.0_f64;
    let mut rw_gap = 0.0_f64;
    let mut cw_gap = 0.0_f64;
    let mut fixed_gap = 0.0_f64;
    let mut path_gap = 0.0_f64;
    let mut col_mean = 0.0_f64;
    let mut row_avg = 0.0_f64;
    let mut errors = Vec::new();
    for _ in 0..opts.trials {
        let (cfg, c) = random_setup(rng);
        let (m, k, alpha) = (cfg.m, cfg.k, cfg.alpha);
        let active: ActiveSet = sample_active_set(rng, m, k);
        let q = q_matrix(&active, alpha, k, m);
        q_gap = worse(q_gap, max_abs_diff(&(&q * &q), &qs_square(&active, alpha, k, m)));

        let w = inclusion_second_moment(m, k);
        let r = row_deviation(&c);
        let cdev = c_dev(&c);
        let kk = (k * k) as f64 / m as f64;
        rw_gap = worse(rw_gap, max_abs_diff(&(&r * &w), &(&r * kk)));
        let rhs = &cdev * (p1(m, k) - p2(m, k)) + &r * (p2(m, k) * m as f64);
        cw_gap = worse(cw_gap, max_abs_diff(&(&cdev * &w), &rhs));

        let u = limit_expectation(&c, k);
        match (
            expected_operator_via(&c, k, alpha, AssemblyPath::Enumerate),
            expected_operator_via(&c, k, alpha, AssemblyPath::ClosedForm),
        ) {
            (Ok(enumerated), Ok(closed)) => {
                fixed_gap = worse(fixed_gap, max_abs_diff(&enumerated.apply(&u), &u));
                fixed_gap = worse(fixed_gap, max_abs_diff(&closed.apply(&u), &u));
                path_gap = worse(path_gap, max_abs_diff(&enumerated.linear, &closed.linear));
                path_gap = worse(path_gap, max_abs_diff(&enumerated.offset, &closed.offset));
            }
            (a, b) => {
                for e in [a.err(), b.err()].into_iter().flatten() {
                    errors.push(e.to_string());
                }
                fixed_gap = f64::NAN;
            }
        }

        let avg = averages(&c);
        for j in 0..m {
            col_mean = worse(col_mean, (u.column(j).sum() / cfg.n as f64).abs());
        }
        for i in 0..cfg.n {
            let mean = u.row(i).sum() / m as f64;
            // the C_dev term contributes eta (row mean - global mean) as well
            row_avg = worse(row_avg, (mean - 0.5 * (avg.row_means[i] - avg.global_mean)).abs());
        }
    }
    let t = opts.trials;
    SuiteReport::new(
        Suite::Identities,
        vec![
            Check::at_most("Q_S Q_S = I - a(2-a)D + (a/k)(3a-2) dd^T", q_gap, 1e-12, t),
            Check::at_most("R W = (k^2/m) R", rw_gap, 1e-12, t),
            Check::at_most("C_dev W = (p1-p2) C_dev + p2 m R", cw_gap, 1e-12, t),
            Check::at_most("U = E[A] U + E[B]", fixed_gap, 1e-12, t).with_details(errors),
            Check::at_most("E[A], E[B]: enumeration = closed form", path_gap, 1e-12, t),
            Check::at_most("column means of U", col_mean, 1e-12, t),
            Check::at_most("row means of U = (1/2)(row mean - global mean)", row_avg, 1e-12, t),
        ],
        Vec::new(),
        Vec::new(),
    )
}
