//! The three worked examples as executable fixtures.
//!
//! Each fixture forces one step (fixed active set and signals, zero starting
//! memory) and carries the expected values for that step, both as printed
//! (rounded to the printed precision) and, where they differ, as exact
//! rational recomputations. A free-running run follows the forced step; for
//! `main` it is checked for boundedness and conservation, for the other two
//! only a structural summary is reported, since the long-run matrices shown
//! for them come from an unknown random schedule.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::closed_forms::limit_expectation;
use crate::error::UnknownScenario;
use crate::io::{CompetencyRule, CompetencySpec, ConfigFile};
use crate::model::{step_forced, ActiveSet, CompetencyMatrix, DeltaState, SimConfig, Simulation, StepTrace};
use crate::numeric::within;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ScenarioName {
    Main,
    Generalist,
    Halo,
}

impl ScenarioName {
    pub const ALL: [ScenarioName; 3] = [Self::Main, Self::Generalist, Self::Halo];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Main => "main",
            Self::Generalist => "generalist",
            Self::Halo => "halo",
        }
    }
}

impl fmt::Display for ScenarioName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioName {
    type Err = UnknownScenario;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "main" => Ok(Self::Main),
            "generalist" => Ok(Self::Generalist),
            "halo" => Ok(Self::Halo),
            other => Err(UnknownScenario(other.to_string())),
        }
    }
}

/// A scalar inside a [`StepTrace`]. Indices are zero-based; `col` indexes
/// the active set for `Raw`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum TraceValue {
    Raw { row: usize, col: usize },
    Averaged(usize),
    Consensus,
    Normalized,
    Learning(usize),
    LearningSum,
    Delta { row: usize, col: usize },
}

impl TraceValue {
    pub fn read(&self, trace: &StepTrace) -> f64 {
        match *self {
            Self::Raw { row, col } => trace.raw[(row, col)],
            Self::Averaged(i) => trace.averaged[i],
            Self::Consensus => trace.consensus,
            Self::Normalized => trace.normalized,
            Self::Learning(i) => trace.learning[i],
            Self::LearningSum => trace.learning.iter().sum(),
            Self::Delta { row, col } => trace.delta_after.entries[(row, col)],
        }
    }
}

/// Where an expected value comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    /// The published figure, compared at its print precision.
    Printed,
    /// Exact rational recomputation from the same inputs.
    ExactRational,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Expectation {
    pub label: String,
    pub value: TraceValue,
    pub expected: f64,
    pub tolerance: f64,
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForcedStep {
    pub active: ActiveSet,
    pub signals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: ScenarioName,
    pub config: SimConfig,
    pub competency: CompetencyMatrix,
    /// One-based labels shown for each column of `competency`.
    pub column_labels: Vec<usize>,
    pub row_labels: Vec<&'static str>,
    pub forced: ForcedStep,
    pub expected: Vec<Expectation>,
    /// Long-run matrix shown for the example, kept for comparison only.
    pub illustrative_long_run: Option<DMatrix<f64>>,
    rule: Option<CompetencyRule>,
}

impl Scenario {
    /// The scenario in the JSON configuration format, so it can be re-run
    /// and edited with the command-line tools.
    pub fn to_config_file(&self) -> ConfigFile {
        let competency = match &self.rule {
            Some(rule) => CompetencySpec::Rule(rule.clone()),
            None => CompetencySpec::Matrix(self.competency.rows()),
        };
        ConfigFile {
            n: self.config.n,
            m: self.config.m,
            k: self.config.k,
            alpha: self.config.alpha,
            mu: self.config.mu,
            competency,
            seed: self.config.seed,
            steps: self.config.steps,
            allow_alpha_above_two_thirds: false,
            delta0: None,
        }
    }
}

fn push(
    out: &mut Vec<Expectation>,
    label: impl Into<String>,
    value: TraceValue,
    expected: f64,
    tolerance: f64,
    source: Source,
) {
    out.push(Expectation {
        label: label.into(),
        value,
        expected,
        tolerance,
        source,
    });
}

const ALPHA: f64 = 0.02;
const LONG_RUN_SEED: u64 = 20_240_601;

pub fn scenario(name: &str) -> Result<Scenario, UnknownScenario> {
    Ok(build(name.parse()?))
}

pub fn build(name: ScenarioName) -> Scenario {
    match name {
        ScenarioName::Main => main_scenario(),
        ScenarioName::Generalist => generalist_scenario(),
        ScenarioName::Halo => halo_scenario(),
    }
}

/// Five perspectives restricted to the three active dimensions 5, 14, 16.
fn main_scenario() -> Scenario {
    let competency = CompetencyMatrix::from_rows(&[
        vec![0.95, 0.20, 0.50],
        vec![0.70, 0.97, 0.30],
        vec![0.50, 0.30, 0.95],
        vec![0.80, 0.87, 0.10],
        vec![0.60, 0.70, 0.30],
    ])
    .expect("fixture is valid");
    let signals = vec![0.6394, 0.0250, 0.2750];
    let mut expected = Vec::new();

    let raw = [
        [-0.3106, -0.1750, -0.2250],
        [-0.0606, -0.9450, -0.0250],
        [0.1394, -0.2750, -0.6750],
        [-0.1606, -0.8450, 0.1750],
        [0.0394, -0.6750, -0.0250],
    ];
    for (i, row) in raw.iter().enumerate() {
        for (p, &v) in row.iter().enumerate() {
            push(&mut expected, format!("r[{},{}]", i + 1, p + 1), TraceValue::Raw { row: i, col: p }, v, 1e-12, Source::Printed);
        }
    }
    let averaged = [-0.2368, -0.3435, -0.2702, -0.2768, -0.2202];
    for (i, &v) in averaged.iter().enumerate() {
        push(&mut expected, format!("R[{}]", i + 1), TraceValue::Averaged(i), v, 1e-3, Source::Printed);
    }
    push(&mut expected, "G", TraceValue::Consensus, -1.3476, 1e-3, Source::Printed);
    push(&mut expected, "G", TraceValue::Consensus, -4.0430 / 3.0, 1e-12, Source::ExactRational);
    push(&mut expected, "Gbar", TraceValue::Normalized, -0.2695, 1e-3, Source::Printed);
    let learning = [-0.0327, 0.0740, 0.0007, 0.0073, -0.0493];
    for (i, &v) in learning.iter().enumerate() {
        push(&mut expected, format!("d[{}]", i + 1), TraceValue::Learning(i), v, 1e-3, Source::Printed);
    }
    push(&mut expected, "sum d", TraceValue::LearningSum, 0.0, 1e-12, Source::Printed);
    let delta = [-0.000653, 0.001480, 0.000013, 0.000147, -0.000987];
    for (i, &v) in delta.iter().enumerate() {
        for j in 0..3 {
            push(&mut expected, format!("Delta[{},{}]", i + 1, j + 1), TraceValue::Delta { row: i, col: j }, v, 1e-5, Source::Printed);
        }
    }

    Scenario {
        name: ScenarioName::Main,
        config: SimConfig::new(5, 3, 3, ALPHA)
            .with_seed(LONG_RUN_SEED)
            .with_steps(10_000),
        competency,
        column_labels: vec![5, 14, 16],
        row_labels: vec!["True Artist", "Executive Director", "Technician", "Critic", "Fan"],
        forced: ForcedStep {
            active: ActiveSet::full(3),
            signals,
        },
        expected,
        illustrative_long_run: None,
        rule: None,
    }
}

fn generalist_scenario() -> Scenario {
    let competency = CompetencyMatrix::from_rows(&[
        vec![0.95, 0.90, 0.85, 0.15, 0.10, 0.05],
        vec![0.50, 0.50, 0.50, 0.50, 0.50, 0.50],
        vec![0.05, 0.10, 0.15, 0.85, 0.90, 0.95],
    ])
    .expect("fixture is valid");
    let active = ActiveSet::from_labels(&[1, 4, 5], 6).expect("fixture is valid");
    let mut expected = Vec::new();

    let raw = [[-0.25, 0.15, 0.50], [0.20, -0.20, 0.10], [0.65, -0.55, -0.30]];
    for (i, row) in raw.iter().enumerate() {
        for (p, &v) in row.iter().enumerate() {
            push(&mut expected, format!("r[{},{}]", i + 1, [1, 4, 5][p]), TraceValue::Raw { row: i, col: p }, v, 1e-12, Source::Printed);
        }
    }
    let printed_avg = [0.133, 0.033, -0.067];
    let exact_avg = [2.0 / 15.0, 1.0 / 30.0, -1.0 / 15.0];
    for i in 0..3 {
        push(&mut expected, format!("R[{}]", i + 1), TraceValue::Averaged(i), printed_avg[i], 1e-3, Source::Printed);
        push(&mut expected, format!("R[{}]", i + 1), TraceValue::Averaged(i), exact_avg[i], 1e-12, Source::ExactRational);
    }
    push(&mut expected, "G", TraceValue::Consensus, 0.099, 1e-3, Source::Printed);
    push(&mut expected, "G", TraceValue::Consensus, 0.1, 1e-12, Source::ExactRational);
    push(&mut expected, "Gbar", TraceValue::Normalized, 0.033, 1e-3, Source::Printed);
    push(&mut expected, "Gbar", TraceValue::Normalized, 1.0 / 30.0, 1e-12, Source::ExactRational);
    let printed_d = [-0.100, 0.000, 0.100];
    let exact_d = [-0.1, 0.0, 0.1];
    for (i, (&printed, &exact)) in printed_d.iter().zip(&exact_d).enumerate() {
        push(&mut expected, format!("d[{}]", i + 1), TraceValue::Learning(i), printed, 1e-3, Source::Printed);
        push(&mut expected, format!("d[{}]", i + 1), TraceValue::Learning(i), exact, 1e-12, Source::ExactRational);
    }
    push(&mut expected, "sum d", TraceValue::LearningSum, 0.0, 1e-12, Source::ExactRational);
    for (i, &d) in exact_d.iter().enumerate() {
        for j in 0..6 {
            let v = if active.contains(j) { ALPHA * d } else { 0.0 };
            push(&mut expected, format!("Delta[{},{}]", i + 1, j + 1), TraceValue::Delta { row: i, col: j }, v, 1e-12, Source::ExactRational);
        }
    }

    Scenario {
        name: ScenarioName::Generalist,
        config: SimConfig::new(3, 6, 3, ALPHA)
            .with_seed(LONG_RUN_SEED)
            .with_steps(1_000),
        competency,
        column_labels: (1..=6).collect(),
        row_labels: vec!["Specialist", "Generalist", "Anti-Specialist"],
        forced: ForcedStep {
            active,
            signals: vec![0.70, 0.30, 0.60],
        },
        expected,
        illustrative_long_run: Some(DMatrix::from_row_slice(
            3,
            6,
            &[
                -0.08, -0.07, -0.06, 0.06, 0.07, 0.08, //
                0.01, 0.01, 0.00, 0.00, -0.01, -0.01, //
                0.07, 0.06, 0.06, -0.06, -0.07, -0.08,
            ],
        )),
        rule: None,
    }
}

/// One expert at dimension 14 among five perspectives on nineteen dimensions.
fn halo_scenario() -> Scenario {
    let rule = CompetencyRule::Halo {
        expert_row: 1,
        expert_col: 14,
        hi: 0.9,
        lo: 0.5,
    };
    let competency = CompetencyMatrix::single_expert(5, 19, 0, 13, 0.9, 0.5).expect("fixture is valid");
    let active = ActiveSet::from_labels(&[3, 14, 16], 19).expect("fixture is valid");
    let mut expected = Vec::new();

    push(&mut expected, "R[1]", TraceValue::Averaged(0), -0.1, 1e-12, Source::Printed);
    for i in 1..5 {
        push(&mut expected, format!("R[{}]", i + 1), TraceValue::Averaged(i), 0.033, 1e-3, Source::Printed);
        push(&mut expected, format!("R[{}]", i + 1), TraceValue::Averaged(i), 1.0 / 30.0, 1e-12, Source::ExactRational);
    }
    // printed from the rounded 0.033 per generalist; the unrounded sum is 1/30
    push(&mut expected, "G", TraceValue::Consensus, 0.032, 5e-3, Source::Printed);
    push(&mut expected, "G", TraceValue::Consensus, 1.0 / 30.0, 1e-12, Source::ExactRational);
    push(&mut expected, "Gbar", TraceValue::Normalized, 0.0064, 1e-3, Source::Printed);
    push(&mut expected, "Gbar", TraceValue::Normalized, 1.0 / 150.0, 1e-12, Source::ExactRational);
    push(&mut expected, "d[1]", TraceValue::Learning(0), 0.1064, 1e-3, Source::Printed);
    push(&mut expected, "d[1]", TraceValue::Learning(0), 8.0 / 75.0, 1e-12, Source::ExactRational);
    for i in 1..5 {
        push(&mut expected, format!("d[{}]", i + 1), TraceValue::Learning(i), -0.0266, 1e-3, Source::Printed);
        push(&mut expected, format!("d[{}]", i + 1), TraceValue::Learning(i), -2.0 / 75.0, 1e-12, Source::ExactRational);
    }
    push(&mut expected, "sum d", TraceValue::LearningSum, 0.0, 1e-12, Source::ExactRational);
    for j in active.iter() {
        push(&mut expected, format!("Delta[1,{}]", j + 1), TraceValue::Delta { row: 0, col: j }, ALPHA * 8.0 / 75.0, 1e-12, Source::ExactRational);
        for i in 1..5 {
            push(&mut expected, format!("Delta[{},{}]", i + 1, j + 1), TraceValue::Delta { row: i, col: j }, ALPHA * -2.0 / 75.0, 1e-12, Source::ExactRational);
        }
    }

    Scenario {
        name: ScenarioName::Halo,
        config: SimConfig::new(5, 19, 3, ALPHA)
            .with_seed(LONG_RUN_SEED)
            .with_steps(1_000),
        competency,
        column_labels: (1..=19).collect(),
        row_labels: vec!["Sole Expert", "Generalist A", "Generalist B", "Generalist C", "Generalist D"],
        forced: ForcedStep {
            active,
            signals: vec![0.7, 0.3, 0.6],
        },
        expected,
        illustrative_long_run: None,
        rule: Some(rule),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub label: String,
    pub source: Source,
    pub expected: f64,
    pub actual: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Summary of the free-running part of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LongRunReport {
    pub steps: u64,
    pub seed: u64,
    pub finite: bool,
    pub max_abs_delta: f64,
    pub max_abs_learning_sum: f64,
    pub max_abs_column_mean: f64,
    /// Whether the bounded/finite/conserving checks are enforced.
    pub enforced: bool,
    pub pass: bool,
    /// Final memory, row-major.
    pub final_delta: Vec<Vec<f64>>,
    /// Closed-form limiting mean, row-major.
    pub limit_mean: Vec<Vec<f64>>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub name: ScenarioName,
    pub trace: StepTrace,
    pub checks: Vec<CheckResult>,
    pub long_run: LongRunReport,
}

impl Verdict {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass) && self.long_run.pass
    }

    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.pass).collect()
    }
}

pub fn run_scenario(name: &str) -> Result<Verdict, UnknownScenario> {
    Ok(run_built(&scenario(name)?))
}

/// Forced step against every expectation, then the free-running checks.
pub fn run_built(sc: &Scenario) -> Verdict {
    let (n, m) = sc.competency.shape();
    let trace = step_forced(
        &DeltaState::zeros(n, m),
        &sc.competency,
        sc.config.alpha,
        &sc.forced.active,
        &sc.forced.signals,
    );
    let checks = sc
        .expected
        .iter()
        .map(|e| {
            let actual = e.value.read(&trace);
            CheckResult {
                label: e.label.clone(),
                source: e.source,
                expected: e.expected,
                actual,
                tolerance: e.tolerance,
                pass: within(actual, e.expected, e.tolerance),
            }
        })
        .collect();
    Verdict {
        name: sc.name,
        trace,
        checks,
        long_run: long_run(sc),
    }
}

fn long_run(sc: &Scenario) -> LongRunReport {
    let (n, m) = sc.competency.shape();
    let sim = Simulation::new(sc.config.clone(), &sc.competency, DeltaState::zeros(n, m))
        .expect("fixture config is valid");
    let mut finite = true;
    let mut max_abs_delta = 0.0_f64;
    let mut max_abs_learning_sum = 0.0_f64;
    let mut max_abs_column_mean = 0.0_f64;
    let mut last = DeltaState::zeros(n, m);
    for trace in sim {
        finite &= trace.delta_after.is_finite();
        max_abs_delta = max_abs_delta.max(trace.delta_after.max_abs());
        max_abs_learning_sum = max_abs_learning_sum.max(trace.learning.iter().sum::<f64>().abs());
        for mean in trace.delta_after.column_means() {
            max_abs_column_mean = max_abs_column_mean.max(mean.abs());
        }
        last = trace.delta_after;
    }
    let last = last.entries;
    let limit = limit_expectation(&sc.competency, sc.config.k);
    let mut notes = Vec::new();
    let enforced = sc.name == ScenarioName::Main;
    let pass = !enforced || (finite && max_abs_delta < 1.0 && max_abs_learning_sum <= 1e-12);
    match sc.name {
        ScenarioName::Main => notes.push(format!(
            "{} free-running steps: finite = {finite}, max |Delta| = {max_abs_delta:.3e}, max |sum d| = {max_abs_learning_sum:.1e}",
            sc.config.steps
        )),
        ScenarioName::Generalist => {
            if let Some(shown) = &sc.illustrative_long_run {
                notes.extend(sign_agreement(shown, &last, "final Delta"));
                notes.extend(sign_agreement(shown, &limit, "limiting mean"));
            }
        }
        ScenarioName::Halo => {
            let expert: f64 = (0..m).map(|j| last[(0, j)]).sum::<f64>() / m as f64;
            let others: f64 =
                (1..n).flat_map(|i| (0..m).map(move |j| (i, j))).map(|idx| last[idx]).sum::<f64>() / ((n - 1) * m) as f64;
            notes.push(format!(
                "final Delta: expert row mean {expert:.4}, generalist mean {others:.4} (shown: 0.08..0.12 and -0.02..-0.03)"
            ));
            notes.push(format!(
                "limiting mean: expert at dimension 14 {:.4}, expert elsewhere {:.4}, generalists elsewhere {:.4}",
                limit[(0, 13)],
                limit[(0, 0)],
                limit[(1, 0)]
            ));
        }
    }
    LongRunReport {
        steps: sc.config.steps,
        seed: sc.config.seed,
        finite,
        max_abs_delta,
        max_abs_learning_sum,
        max_abs_column_mean,
        enforced,
        pass,
        final_delta: crate::model::matrix_rows(&last),
        limit_mean: crate::model::matrix_rows(&limit),
        notes,
    }
}

fn sign_agreement(shown: &DMatrix<f64>, other: &DMatrix<f64>, what: &str) -> Option<String> {
    let mut agree = 0;
    let mut compared = 0;
    for (a, b) in shown.iter().zip(other.iter()) {
        if *a != 0.0 {
            compared += 1;
            if a.signum() == b.signum() {
                agree += 1;
            }
        }
    }
    Some(format!(
        "{what}: sign agrees with the illustrative long-run matrix in {agree} of {compared} nonzero cells"
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_name_is_rejected() {
        assert_eq!(scenario("nope").unwrap_err(), UnknownScenario("nope".into()));
    }

    #[test]
    fn forced_schedules_are_valid() {
        for name in ScenarioName::ALL {
            let sc = build(name);
            assert_eq!(sc.forced.active.len(), sc.config.k);
            assert_eq!(sc.forced.signals.len(), sc.config.k);
            assert!(crate::model::validate_config(sc.config.clone(), &sc.competency).is_ok());
        }
    }

    #[test]
    fn all_scenarios_pass() {
        for name in ScenarioName::ALL {
            let v = run_scenario(name.as_str()).unwrap();
            assert!(v.pass(), "{name}: {:#?}", v.failures());
        }
    }

    #[test]
    fn config_file_round_trip() {
        for name in ScenarioName::ALL {
            let sc = build(name);
            let file = sc.to_config_file();
            let parsed = ConfigFile::from_json_str(&file.to_json_pretty()).unwrap();
            assert_eq!(parsed, file);
            let resolved = parsed.resolve().unwrap();
            assert_eq!(resolved.competency, sc.competency);
            assert_eq!(resolved.config, sc.config);
        }
    }

    #[test]
    fn scenario_runs_are_reproducible() {
        let a = run_scenario("generalist").unwrap();
        let b = run_scenario("generalist").unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.long_run, b.long_run);
    }
}
