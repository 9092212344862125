//! Seeded replica ensembles and z-score estimators against the closed forms.
//!
//! Replica `r` of an ensemble runs on ChaCha8 stream `r` of `master_seed`,
//! so replica seeds are distinct by construction and replica 0 reproduces a
//! plain run with `seed = master_seed`. Replicas run on the rayon pool and are
//! reduced in replica order, so results do not depend on the worker count.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::closed_forms::{conditional_mean, conditional_variance, limit_expectation, SignVariant};
use crate::error::{ConfigError, EnsembleError};
use crate::model::{validate_config, CompetencyMatrix, DeltaState, SimConfig, Simulation};
use crate::numeric::compensated_sum;

/// Default two-sided z threshold per estimate.
pub const Z_THRESHOLD: f64 = 4.0;
/// Default fraction of cells that must pass for a family of estimates.
pub const FAMILY_PASS_FRACTION: f64 = 0.95;
/// Fewest conditioned samples accepted by the consensus estimators.
pub const MIN_CONDITIONED_SAMPLES: u64 = 1_000;

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleSpec {
    /// `seed` and `steps` of the base config are ignored.
    pub base: SimConfig,
    pub replicas: usize,
    pub burn_in: u64,
    pub measure_steps: u64,
    pub master_seed: u64,
    /// Starting memory for every replica; zeros when `None`.
    pub delta0: Option<DeltaState>,
}

impl EnsembleSpec {
    pub fn new(base: SimConfig, replicas: usize, burn_in: u64, measure_steps: u64, master_seed: u64) -> Self {
        Self {
            base,
            replicas,
            burn_in,
            measure_steps,
            master_seed,
            delta0: None,
        }
    }
}

/// Streaming central moments up to fourth order, mergeable in any grouping.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Moments {
    pub count: u64,
    pub mean: f64,
    m2: f64,
    m3: f64,
    m4: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.merge(&Moments {
            count: 1,
            mean: x,
            ..Moments::default()
        });
    }

    pub fn merge(&mut self, other: &Moments) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = *other;
            return;
        }
        let na = self.count as f64;
        let nb = other.count as f64;
        let n = na + nb;
        let delta = other.mean - self.mean;
        let d2 = delta * delta;
        let mean = self.mean + delta * nb / n;
        let m2 = self.m2 + other.m2 + d2 * na * nb / n;
        let m3 = self.m3
            + other.m3
            + d2 * delta * na * nb * (na - nb) / (n * n)
            + 3.0 * delta * (na * other.m2 - nb * self.m2) / n;
        let m4 = self.m4
            + other.m4
            + d2 * d2 * na * nb * (na * na - na * nb + nb * nb) / (n * n * n)
            + 6.0 * d2 * (na * na * other.m2 + nb * nb * self.m2) / (n * n)
            + 4.0 * delta * (na * other.m3 - nb * self.m3) / n;
        *self = Moments {
            count: self.count + other.count,
            mean,
            m2,
            m3,
            m4,
        };
    }

    /// Unbiased sample variance.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            return 0.0;
        }
        self.m2 / (self.count - 1) as f64
    }

    pub fn std_error_of_mean(&self) -> f64 {
        if self.count < 2 {
            return 0.0;
        }
        (self.variance() / self.count as f64).sqrt()
    }

    /// `sqrt((μ4 - (N-3)/(N-1) σ⁴) / N)`, with plug-in central moments.
    pub fn std_error_of_variance(&self) -> f64 {
        if self.count < 4 {
            return 0.0;
        }
        let n = self.count as f64;
        let mu4 = self.m4 / n;
        let s2 = self.m2 / n;
        let v = (mu4 - (n - 3.0) / (n - 1.0) * s2 * s2) / n;
        v.max(0.0).sqrt()
    }
}

/// What one replica leaves behind.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicaOutput {
    pub terminal: DeltaState,
    /// Time average of the memory over the first half of the measurement window.
    pub first_half_mean: DMatrix<f64>,
    /// Time average over the second half.
    pub second_half_mean: DMatrix<f64>,
    /// Per dimension: moments of `Ḡ` over measured steps where it was active.
    pub conditional: Vec<Moments>,
    /// Per dimension: how many measured steps had it active.
    pub inclusion_counts: Vec<u64>,
    pub measured_steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleOutput {
    pub spec: EnsembleSpec,
    pub replicas: Vec<ReplicaOutput>,
}

pub fn run_ensemble(
    spec: &EnsembleSpec,
    competency: &CompetencyMatrix,
) -> Result<EnsembleOutput, ConfigError> {
    let base = validate_config(spec.base.clone(), competency)?;
    let (n, m) = (base.n, base.m);
    let delta0 = spec.delta0.clone().unwrap_or_else(|| DeltaState::zeros(n, m));
    let cfg = SimConfig {
        seed: spec.master_seed,
        steps: spec.burn_in + spec.measure_steps,
        ..base
    };
    // Fail fast on a bad initial state before spawning replicas.
    Simulation::new(cfg.clone(), competency, delta0.clone())?;

    let replicas = (0..spec.replicas)
        .into_par_iter()
        .map(|r| {
            let sim = Simulation::with_stream(cfg.clone(), competency, delta0.clone(), r as u64)
                .expect("config validated above");
            run_replica(sim, spec.burn_in, spec.measure_steps, n, m)
        })
        .collect();
    Ok(EnsembleOutput {
        spec: spec.clone(),
        replicas,
    })
}

fn run_replica(
    mut sim: Simulation<'_>,
    burn_in: u64,
    measure_steps: u64,
    n: usize,
    m: usize,
) -> ReplicaOutput {
    for _ in 0..burn_in {
        sim.next();
    }
    let first_len = measure_steps / 2;
    let second_len = measure_steps - first_len;
    let mut first = DMatrix::zeros(n, m);
    let mut second = DMatrix::zeros(n, m);
    let mut conditional = vec![Moments::default(); m];
    let mut inclusion_counts = vec![0u64; m];
    for t in 0..measure_steps {
        let trace = sim.next().expect("run length covers the measurement window");
        for j in trace.active.iter() {
            conditional[j].push(trace.normalized);
            inclusion_counts[j] += 1;
        }
        if t < first_len {
            first += &trace.delta_after.entries;
        } else {
            second += &trace.delta_after.entries;
        }
    }
    if first_len > 0 {
        first /= first_len as f64;
    }
    if second_len > 0 {
        second /= second_len as f64;
    }
    ReplicaOutput {
        terminal: sim.into_state(),
        first_half_mean: first,
        second_half_mean: second,
        conditional,
        inclusion_counts,
        measured_steps: measure_steps,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateReport {
    pub quantity: String,
    pub estimate: f64,
    pub std_error: f64,
    pub target: f64,
    pub z_score: f64,
    pub pass: bool,
}

impl EstimateReport {
    pub fn new(quantity: impl Into<String>, estimate: f64, std_error: f64, target: f64, z_threshold: f64) -> Self {
        let z_score = z_score(estimate, std_error, target);
        Self {
            quantity: quantity.into(),
            estimate,
            std_error,
            target,
            z_score,
            pass: z_score.abs() <= z_threshold,
        }
    }
}

/// Differences this small are rounding, not sampling error.
pub const NUMERICAL_FLOOR: f64 = 1e-12;

/// `(estimate - target) / std_error`. A difference within
/// [`NUMERICAL_FLOOR`] scores 0 whatever the standard error, so cells that
/// are deterministic up to rounding do not divide noise by noise; otherwise a
/// zero standard error gives an infinite score.
pub fn z_score(estimate: f64, std_error: f64, target: f64) -> f64 {
    let diff = estimate - target;
    if diff.abs() <= NUMERICAL_FLOOR {
        0.0
    } else if std_error > 0.0 {
        diff / std_error
    } else {
        diff.signum() * f64::INFINITY
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeltaMeanEstimate {
    /// Row-major over the `n x m` cells.
    pub reports: Vec<EstimateReport>,
    /// Cells whose half-window drift exceeds the standard error (advisory).
    pub insufficient_burn_in: Vec<String>,
}

impl DeltaMeanEstimate {
    pub fn pass_fraction(&self) -> f64 {
        if self.reports.is_empty() {
            return 1.0;
        }
        self.reports.iter().filter(|r| r.pass).count() as f64 / self.reports.len() as f64
    }
}

fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let count = values.len();
    if count == 0 {
        return (0.0, 0.0);
    }
    let mean = compensated_sum(values.iter().copied()) / count as f64;
    if count < 2 {
        return (mean, 0.0);
    }
    let ss = compensated_sum(values.iter().map(|v| (v - mean).powi(2)));
    (mean, (ss / (count - 1) as f64 / count as f64).sqrt())
}

/// Cross-replica mean of the terminal memory, cell by cell, against the
/// closed-form limit.
///
/// The burn-in advisory compares the replica-averaged drift between the two
/// half-window time averages with the cell's standard error, after allowing
/// two standard errors of the drift itself.
pub fn estimate_delta_mean(
    output: &EnsembleOutput,
    competency: &CompetencyMatrix,
    z_threshold: f64,
) -> DeltaMeanEstimate {
    if output.spec.measure_steps == 0 || output.replicas.is_empty() {
        return DeltaMeanEstimate {
            reports: Vec::new(),
            insufficient_burn_in: Vec::new(),
        };
    }
    let (n, m) = competency.shape();
    let target = limit_expectation(competency, output.spec.base.k);
    let mut reports = Vec::with_capacity(n * m);
    let mut insufficient_burn_in = Vec::new();
    for i in 0..n {
        for j in 0..m {
            let name = format!("delta[{},{}]", i + 1, j + 1);
            let terminal: Vec<f64> = output.replicas.iter().map(|r| r.terminal.entries[(i, j)]).collect();
            let (estimate, se) = mean_and_se(&terminal);
            let drift: Vec<f64> = output
                .replicas
                .iter()
                .map(|r| r.second_half_mean[(i, j)] - r.first_half_mean[(i, j)])
                .collect();
            let (drift_mean, drift_se) = mean_and_se(&drift);
            if output.spec.measure_steps >= 2 && drift_mean.abs() > se + 2.0 * drift_se {
                insufficient_burn_in.push(name.clone());
            }
            reports.push(EstimateReport::new(name, estimate, se, target[(i, j)], z_threshold));
        }
    }
    DeltaMeanEstimate {
        reports,
        insufficient_burn_in,
    }
}

/// All conditioned samples of `Ḡ` for dimension `j`, merged in replica order.
pub fn conditional_samples(output: &EnsembleOutput, j: usize) -> Moments {
    let mut acc = Moments::default();
    for r in &output.replicas {
        acc.merge(&r.conditional[j]);
    }
    acc
}

/// `(times j was active, total measured steps)` over the ensemble.
pub fn inclusion_rate(output: &EnsembleOutput, j: usize) -> (u64, u64) {
    output.replicas.iter().fold((0, 0), |(hits, total), r| {
        (hits + r.inclusion_counts[j], total + r.measured_steps)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsensusEstimate {
    pub j: usize,
    pub samples: u64,
    /// Mean against the variant selected by the caller.
    pub mean: EstimateReport,
    pub variance: EstimateReport,
    /// Mean against the other sign variant, reported alongside.
    pub alternate_mean: EstimateReport,
    pub variant: SignVariant,
}

/// Sample mean and variance of `Ḡ` on steps where `j` (zero-based) was
/// active, against the closed forms. The targets assume the memory starts
/// with zero column means, which holds for the default zero start.
pub fn estimate_conditional_consensus(
    output: &EnsembleOutput,
    competency: &CompetencyMatrix,
    j: usize,
    variant: SignVariant,
    z_threshold: f64,
) -> Result<ConsensusEstimate, EnsembleError> {
    let cfg = &output.spec.base;
    let m = competency.ncols();
    if j >= m {
        return Err(crate::error::MomentsError::DimensionOutOfRange { j, m }.into());
    }
    let moments = conditional_samples(output, j);
    if moments.count < MIN_CONDITIONED_SAMPLES {
        return Err(EnsembleError::TooFewSamples {
            j,
            got: moments.count,
            need: MIN_CONDITIONED_SAMPLES,
        });
    }
    let other = match variant {
        SignVariant::Derived => SignVariant::Printed,
        SignVariant::Printed => SignVariant::Derived,
    };
    let mean_target = conditional_mean(competency, &cfg.mu, cfg.k, j, variant)?;
    let other_target = conditional_mean(competency, &cfg.mu, cfg.k, j, other)?;
    let var_target = conditional_variance(competency, &cfg.mu, cfg.k, j)?;
    let label = j + 1;
    Ok(ConsensusEstimate {
        j,
        samples: moments.count,
        mean: EstimateReport::new(
            format!("gbar_mean[j={label}] ({})", variant.label()),
            moments.mean,
            moments.std_error_of_mean(),
            mean_target,
            z_threshold,
        ),
        variance: EstimateReport::new(
            format!("gbar_var[j={label}]"),
            moments.variance(),
            moments.std_error_of_variance(),
            var_target,
            z_threshold,
        ),
        alternate_mean: EstimateReport::new(
            format!("gbar_mean[j={label}] ({})", other.label()),
            moments.mean,
            moments.std_error_of_mean(),
            other_target,
            z_threshold,
        ),
        variant,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportSummary {
    pub pass: bool,
    pub checks: usize,
    pub passed: usize,
    pub failed: Vec<String>,
    pub max_abs_z: f64,
    pub min_pass_fraction: f64,
    pub warnings: Vec<String>,
}

/// Every report must pass.
pub fn compare_report(reports: &[EstimateReport]) -> ReportSummary {
    compare_report_family(reports, 1.0)
}

/// Passes when at least `min_pass_fraction` of the reports pass.
pub fn compare_report_family(reports: &[EstimateReport], min_pass_fraction: f64) -> ReportSummary {
    let passed = reports.iter().filter(|r| r.pass).count();
    let failed: Vec<String> = reports.iter().filter(|r| !r.pass).map(|r| r.quantity.clone()).collect();
    let max_abs_z = reports.iter().map(|r| r.z_score.abs()).fold(0.0, f64::max);
    let mut warnings = Vec::new();
    let pass = if reports.is_empty() {
        warnings.push("no estimates to compare".to_string());
        true
    } else if min_pass_fraction >= 1.0 {
        failed.is_empty()
    } else {
        passed as f64 / reports.len() as f64 >= min_pass_fraction
    };
    ReportSummary {
        pass,
        checks: reports.len(),
        passed,
        failed,
        max_abs_z,
        min_pass_fraction,
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SignalDistribution;

    fn generalist() -> CompetencyMatrix {
        CompetencyMatrix::from_rows(&[
            vec![0.95, 0.90, 0.85, 0.15, 0.10, 0.05],
            vec![0.50, 0.50, 0.50, 0.50, 0.50, 0.50],
            vec![0.05, 0.10, 0.15, 0.85, 0.90, 0.95],
        ])
        .unwrap()
    }

    #[test]
    fn moments_merge_matches_direct() {
        let xs: Vec<f64> = (0..200).map(|i| ((i * 37) % 101) as f64 / 7.0).collect();
        let mut all = Moments::default();
        xs.iter().for_each(|&x| all.push(x));
        let mut a = Moments::default();
        let mut b = Moments::default();
        xs[..73].iter().for_each(|&x| a.push(x));
        xs[73..].iter().for_each(|&x| b.push(x));
        a.merge(&b);
        let mean = xs.iter().sum::<f64>() / 200.0;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 199.0;
        let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>();
        assert!((all.mean - mean).abs() < 1e-12);
        assert!((a.mean - mean).abs() < 1e-12);
        assert!((all.variance() - var).abs() < 1e-10);
        assert!((a.variance() - var).abs() < 1e-10);
        assert!((a.m4 - m4).abs() / m4 < 1e-12);
        assert!((all.m4 - m4).abs() / m4 < 1e-12);
    }

    #[test]
    fn z_score_degenerate_cases() {
        assert_eq!(z_score(1.0, 0.0, 1.0), 0.0);
        assert_eq!(z_score(1.0, 0.0, 0.0), f64::INFINITY);
        assert_eq!(z_score(1.0, 0.5, 0.0), 2.0);
        assert_eq!(z_score(3e-18, 7e-20, 0.0), 0.0);
    }

    #[test]
    fn ensemble_is_deterministic() {
        let c = generalist();
        let spec = EnsembleSpec::new(SimConfig::new(3, 6, 3, 0.02), 2, 5, 20, 11);
        let a = run_ensemble(&spec, &c).unwrap();
        let b = run_ensemble(&spec, &c).unwrap();
        assert_eq!(a, b);
        let ra = estimate_delta_mean(&a, &c, Z_THRESHOLD);
        let rb = estimate_delta_mean(&b, &c, Z_THRESHOLD);
        assert_eq!(serde_json::to_string(&ra).unwrap(), serde_json::to_string(&rb).unwrap());
    }

    #[test]
    fn replica_zero_is_the_plain_run() {
        let c = generalist();
        let base = SimConfig::new(3, 6, 3, 0.02);
        let spec = EnsembleSpec::new(base.clone(), 3, 0, 40, 99);
        let out = run_ensemble(&spec, &c).unwrap();
        let plain = Simulation::new(base.with_seed(99).with_steps(40), &c, DeltaState::zeros(3, 6))
            .unwrap()
            .last()
            .unwrap();
        assert_eq!(out.replicas[0].terminal, plain.delta_after);
        assert_ne!(out.replicas[0].terminal, out.replicas[1].terminal);
    }

    #[test]
    fn empty_measurement_window() {
        let c = generalist();
        let spec = EnsembleSpec::new(SimConfig::new(3, 6, 3, 0.02), 1, 10, 0, 1);
        let out = run_ensemble(&spec, &c).unwrap();
        let est = estimate_delta_mean(&out, &c, Z_THRESHOLD);
        assert!(est.reports.is_empty());
        let summary = compare_report(&est.reports);
        assert!(summary.pass);
        assert_eq!(summary.warnings.len(), 1);
        assert!(matches!(
            estimate_conditional_consensus(&out, &c, 0, SignVariant::Derived, Z_THRESHOLD),
            Err(EnsembleError::TooFewSamples { .. })
        ));
    }

    #[test]
    fn single_perspective_never_moves() {
        let c = CompetencyMatrix::from_rows(&[vec![0.1, 0.7, 0.3, 0.9]]).unwrap();
        let spec = EnsembleSpec::new(SimConfig::new(1, 4, 2, 0.1), 5, 10, 30, 3);
        let out = run_ensemble(&spec, &c).unwrap();
        let est = estimate_delta_mean(&out, &c, Z_THRESHOLD);
        for r in &est.reports {
            assert!(r.estimate.abs() <= 1e-12);
            assert_eq!(r.target, 0.0);
            assert!(r.pass);
        }
    }

    #[test]
    fn point_mass_collapses_signal_variance() {
        let c = CompetencyMatrix::constant(2, 4, 0.2).unwrap();
        let base = SimConfig::new(2, 4, 2, 0.05).with_mu(SignalDistribution::Point { value: 0.6 });
        let spec = EnsembleSpec::new(base, 2, 0, 2_000, 5);
        let out = run_ensemble(&spec, &c).unwrap();
        let est = estimate_conditional_consensus(&out, &c, 1, SignVariant::Derived, Z_THRESHOLD).unwrap();
        assert!((est.mean.target - 0.4).abs() < 1e-15);
        assert!(est.mean.pass, "{:?}", est.mean);
        assert!(est.variance.target.abs() < 1e-15);
        assert!(est.variance.pass, "{:?}", est.variance);
    }

    #[test]
    fn compare_report_outcomes() {
        let ok = EstimateReport::new("a", 1.0, 0.1, 1.05, 4.0);
        let bad = EstimateReport::new("b", 1.0, 0.1, 2.0, 4.0);
        assert!(compare_report(std::slice::from_ref(&ok)).pass);
        let s = compare_report(&[ok.clone(), bad.clone()]);
        assert!(!s.pass);
        assert_eq!(s.failed, vec!["b".to_string()]);
        assert!((s.max_abs_z - 10.0).abs() < 1e-9);
        assert!(compare_report_family(&[ok, bad], 0.5).pass);
    }
}
