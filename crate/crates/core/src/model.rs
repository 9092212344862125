//! One iteration of the consensus dynamics and seeded multi-step runs.
//!
//! Each step draws a uniformly random `k`-subset `S` of the `m` dimensions,
//! one signal per active dimension, and then
//!
//! ```text
//! r[i,j] = x[j] - C[i,j]                      raw response
//! R[i,j] = r[i,j] + Δ[i,j]                    adjusted by the EMA memory
//! R[i]   = (1/k) Σ_{j∈S} R[i,j]               averaged over the active set
//! G      = Σ_i R[i]                           consensus
//! d[i]   = G/n - R[i]                         learning signal
//! Δ[i,j] ← α d[i] + (1-α) Δ[i,j]   for j ∈ S  (other columns untouched)
//! ```
//!
//! Randomness is drawn from ChaCha8 in a fixed order: the active set first
//! (partial Fisher-Yates over `0..m`, `k` bounded draws, then sorted), then
//! one signal per active dimension in ascending index order. Point-mass
//! signal distributions consume no draws.
//!
//! Indices are zero-based internally. Everything user-facing (config files,
//! CSV output, printed tables) uses one-based dimension labels.

use std::fmt;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::numeric::{compensated_mean, compensated_sum};

/// Generator behind every simulation. ChaCha output is specified
/// independently of platform, so equal seeds give equal streams everywhere.
pub type SimRng = ChaCha8Rng;

/// Builds the generator for `(seed, stream)`. Plain runs use stream 0;
/// ensemble replica `r` uses stream `r`.
pub fn seeded_rng(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Law of the per-dimension signals. Support is always inside `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "lowercase")]
pub enum SignalDistribution {
    #[default]
    Uniform01,
    Point { value: f64 },
    Beta { a: f64, b: f64 },
}

impl SignalDistribution {
    pub fn validate(&self) -> Result<(), ConfigError> {
        match *self {
            Self::Uniform01 => Ok(()),
            Self::Point { value } => {
                if value.is_finite() && (0.0..=1.0).contains(&value) {
                    Ok(())
                } else {
                    Err(ConfigError::BadDistribution(format!(
                        "point mass at {value} is outside [0, 1]"
                    )))
                }
            }
            Self::Beta { a, b } => {
                if a.is_finite() && b.is_finite() && a > 0.0 && b > 0.0 {
                    Ok(())
                } else {
                    Err(ConfigError::BadDistribution(format!(
                        "beta shape parameters must be positive and finite, got a = {a}, b = {b}"
                    )))
                }
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Self::Uniform01 => 0.5,
            Self::Point { value } => value,
            Self::Beta { a, b } => a / (a + b),
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            Self::Uniform01 => 1.0 / 12.0,
            Self::Point { .. } => 0.0,
            Self::Beta { a, b } => a * b / ((a + b) * (a + b) * (a + b + 1.0)),
        }
    }

    pub fn stddev(&self) -> f64 {
        self.variance().sqrt()
    }

    /// Draws one signal. Assumes `validate` has passed.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Self::Uniform01 => rng.random::<f64>(),
            Self::Point { value } => value,
            Self::Beta { a, b } => Beta::new(a, b)
                .expect("validated beta parameters")
                .sample(rng),
        }
    }
}

/// Validated run parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    /// Perspective count.
    pub n: usize,
    /// Dimension count.
    pub m: usize,
    /// Active-set size.
    pub k: usize,
    pub alpha: f64,
    pub mu: SignalDistribution,
    pub seed: u64,
    pub steps: u64,
    /// Relaxes the step-size bound from `(0, 2/3)` to `(0, 1)`.
    pub allow_alpha_above_two_thirds: bool,
}

impl SimConfig {
    pub fn new(n: usize, m: usize, k: usize, alpha: f64) -> Self {
        Self {
            n,
            m,
            k,
            alpha,
            mu: SignalDistribution::Uniform01,
            seed: 0,
            steps: 0,
            allow_alpha_above_two_thirds: false,
        }
    }

    pub fn with_mu(mut self, mu: SignalDistribution) -> Self {
        self.mu = mu;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_steps(mut self, steps: u64) -> Self {
        self.steps = steps;
        self
    }

    /// Checks every parameter that does not involve the competency matrix.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n < 1 {
            return Err(ConfigError::NoPerspectives);
        }
        if self.m < 1 {
            return Err(ConfigError::NoDimensions);
        }
        if self.k < 1 || self.k > self.m {
            return Err(ConfigError::KOutOfRange { k: self.k, m: self.m });
        }
        let (upper, bound) = if self.allow_alpha_above_two_thirds {
            (1.0, "(0, 1) [override]")
        } else {
            (2.0 / 3.0, "(0, 2/3)")
        };
        if !(self.alpha.is_finite() && self.alpha > 0.0 && self.alpha < upper) {
            return Err(ConfigError::AlphaOutOfRange {
                alpha: self.alpha,
                bound,
            });
        }
        self.mu.validate()
    }
}

/// Returns `cfg` unchanged when it is consistent with `competency`.
pub fn validate_config(
    cfg: SimConfig,
    competency: &CompetencyMatrix,
) -> Result<SimConfig, ConfigError> {
    cfg.validate()?;
    let (rows, cols) = competency.shape();
    if rows != cfg.n || cols != cfg.m {
        return Err(ConfigError::CompetencyShape {
            expected_rows: cfg.n,
            expected_cols: cfg.m,
            rows,
            cols,
        });
    }
    Ok(cfg)
}

/// Hidden ground-truth competencies, an `n x m` matrix with entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompetencyMatrix(DMatrix<f64>);

impl CompetencyMatrix {
    pub fn new(entries: DMatrix<f64>) -> Result<Self, ConfigError> {
        if entries.nrows() == 0 {
            return Err(ConfigError::NoPerspectives);
        }
        if entries.ncols() == 0 {
            return Err(ConfigError::NoDimensions);
        }
        for i in 0..entries.nrows() {
            for j in 0..entries.ncols() {
                let value = entries[(i, j)];
                if !(value.is_finite() && (0.0..=1.0).contains(&value)) {
                    return Err(ConfigError::BadCompetency { row: i, col: j, value });
                }
            }
        }
        Ok(Self(entries))
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, ConfigError> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != m) {
            return Err(ConfigError::CompetencyShape {
                expected_rows: n,
                expected_cols: m,
                rows: n,
                cols: bad.len(),
            });
        }
        Self::new(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
    }

    /// Every entry `lo` except a single `hi` at `(expert_row, expert_col)`
    /// (zero-based).
    pub fn single_expert(
        n: usize,
        m: usize,
        expert_row: usize,
        expert_col: usize,
        hi: f64,
        lo: f64,
    ) -> Result<Self, ConfigError> {
        let mut entries = DMatrix::from_element(n, m, lo);
        if expert_row < n && expert_col < m {
            entries[(expert_row, expert_col)] = hi;
        }
        Self::new(entries)
    }

    pub fn constant(n: usize, m: usize, value: f64) -> Result<Self, ConfigError> {
        Self::new(DMatrix::from_element(n, m, value))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        matrix_rows(&self.0)
    }
}

impl std::ops::Index<(usize, usize)> for CompetencyMatrix {
    type Output = f64;

    fn index(&self, idx: (usize, usize)) -> &f64 {
        &self.0[idx]
    }
}

pub(crate) fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// The EMA memory `Δ^(t)` together with its step index.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaState {
    pub entries: DMatrix<f64>,
    pub t: u64,
}

impl DeltaState {
    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            entries: DMatrix::zeros(n, m),
            t: 0,
        }
    }

    pub fn from_matrix(entries: DMatrix<f64>) -> Result<Self, ConfigError> {
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(ConfigError::BadInitialState(
                "entries must be finite".to_string(),
            ));
        }
        Ok(Self { entries, t: 0 })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.entries.shape()
    }

    pub fn column_means(&self) -> Vec<f64> {
        self.entries
            .column_iter()
            .map(|col| compensated_mean(col.as_slice()))
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|v| v.is_finite())
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        matrix_rows(&self.entries)
    }
}

/// Sorted set of `k` distinct zero-based dimension indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ActiveSet(Vec<usize>);

impl ActiveSet {
    pub fn new(mut indices: Vec<usize>, m: usize) -> Result<Self, ConfigError> {
        indices.sort_unstable();
        if indices.is_empty() || indices.len() > m {
            return Err(ConfigError::KOutOfRange {
                k: indices.len(),
                m,
            });
        }
        if indices.windows(2).any(|w| w[0] == w[1]) || indices.iter().any(|&j| j >= m) {
            return Err(ConfigError::BadActiveSet(format!(
                "indices {indices:?} are not distinct members of 0..{m}"
            )));
        }
        Ok(Self(indices))
    }

    /// Builds the set from one-based labels.
    pub fn from_labels(labels: &[usize], m: usize) -> Result<Self, ConfigError> {
        if labels.contains(&0) {
            return Err(ConfigError::BadActiveSet(
                "dimension labels are one-based".to_string(),
            ));
        }
        Self::new(labels.iter().map(|&l| l - 1).collect(), m)
    }

    pub fn full(m: usize) -> Self {
        Self((0..m).collect())
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.0.binary_search(&j).is_ok()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.0.iter().map(|j| j + 1).collect()
    }
}

impl fmt::Display for ActiveSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let labels: Vec<String> = self.labels().iter().map(ToString::to_string).collect();
        write!(f, "{}", labels.join(";"))
    }
}

/// Everything computed during one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub active: ActiveSet,
    /// `signals[p]` is the signal for dimension `active.indices()[p]`.
    pub signals: Vec<f64>,
    /// `n x k`, columns aligned with `active`.
    pub raw: DMatrix<f64>,
    /// `n x k`, columns aligned with `active`.
    pub adjusted: DMatrix<f64>,
    pub averaged: Vec<f64>,
    pub consensus: f64,
    /// `consensus / n`.
    pub normalized: f64,
    pub learning: Vec<f64>,
    pub delta_after: DeltaState,
}

/// Uniform `k`-subset of `0..m` by partial Fisher-Yates, then sorted.
///
/// Consumes exactly `k` bounded integer draws.
pub fn sample_active_set<R: Rng + ?Sized>(rng: &mut R, m: usize, k: usize) -> ActiveSet {
    assert!(k >= 1 && k <= m, "active-set size {k} outside [1, {m}]");
    let mut pool: Vec<usize> = (0..m).collect();
    for i in 0..k {
        let offset = rng.random_range(0..(m - i) as u64) as usize;
        pool.swap(i, i + offset);
    }
    pool.truncate(k);
    pool.sort_unstable();
    ActiveSet(pool)
}

/// One independent draw per active dimension, in ascending index order.
pub fn sample_signals<R: Rng + ?Sized>(
    rng: &mut R,
    active: &ActiveSet,
    mu: &SignalDistribution,
) -> Vec<f64> {
    active.iter().map(|_| mu.sample(rng)).collect()
}

pub fn raw_responses(
    competency: &CompetencyMatrix,
    signals: &[f64],
    active: &ActiveSet,
) -> DMatrix<f64> {
    assert_eq!(signals.len(), active.len(), "one signal per active dimension");
    let cols = active.indices();
    DMatrix::from_fn(competency.nrows(), cols.len(), |i, p| {
        signals[p] - competency[(i, cols[p])]
    })
}

pub fn adjusted_responses(
    raw: &DMatrix<f64>,
    delta_prev: &DeltaState,
    active: &ActiveSet,
) -> DMatrix<f64> {
    let cols = active.indices();
    DMatrix::from_fn(raw.nrows(), raw.ncols(), |i, p| {
        raw[(i, p)] + delta_prev.entries[(i, cols[p])]
    })
}

/// Row means of the adjusted responses; `k` is the column count.
pub fn average_adjusted(adjusted: &DMatrix<f64>) -> Vec<f64> {
    let k = adjusted.ncols() as f64;
    adjusted
        .row_iter()
        .map(|row| compensated_sum(row.iter().copied()) / k)
        .collect()
}

pub fn consensus(averaged: &[f64]) -> f64 {
    compensated_sum(averaged.iter().copied())
}

pub fn learning_signals(consensus: f64, averaged: &[f64]) -> Vec<f64> {
    let normalized = consensus / averaged.len() as f64;
    averaged.iter().map(|r| normalized - r).collect()
}

/// EMA update on the active columns; inactive columns are copied verbatim.
pub fn update_delta(
    delta_prev: &DeltaState,
    learning: &[f64],
    active: &ActiveSet,
    alpha: f64,
) -> DeltaState {
    let mut entries = delta_prev.entries.clone();
    for j in active.iter() {
        for (i, d) in learning.iter().enumerate() {
            entries[(i, j)] = alpha * d + (1.0 - alpha) * delta_prev.entries[(i, j)];
        }
    }
    DeltaState {
        entries,
        t: delta_prev.t + 1,
    }
}

/// Runs one step with a caller-chosen active set and signals.
pub fn step_forced(
    state: &DeltaState,
    competency: &CompetencyMatrix,
    alpha: f64,
    active: &ActiveSet,
    signals: &[f64],
) -> StepTrace {
    let raw = raw_responses(competency, signals, active);
    let adjusted = adjusted_responses(&raw, state, active);
    let averaged = average_adjusted(&adjusted);
    let g = consensus(&averaged);
    let learning = learning_signals(g, &averaged);
    let delta_after = update_delta(state, &learning, active, alpha);
    StepTrace {
        active: active.clone(),
        signals: signals.to_vec(),
        raw,
        adjusted,
        normalized: g / averaged.len() as f64,
        averaged,
        consensus: g,
        learning,
        delta_after,
    }
}

/// Draws the active set and signals from `rng`, then runs one step.
pub fn step<R: Rng + ?Sized>(
    state: &DeltaState,
    competency: &CompetencyMatrix,
    cfg: &SimConfig,
    rng: &mut R,
) -> StepTrace {
    let active = sample_active_set(rng, cfg.m, cfg.k);
    let signals = sample_signals(rng, &active, &cfg.mu);
    step_forced(state, competency, cfg.alpha, &active, &signals)
}

/// Streaming run: yields one trace per step and keeps only the current state.
#[derive(Debug, Clone)]
pub struct Simulation<'a> {
    cfg: SimConfig,
    competency: &'a CompetencyMatrix,
    state: DeltaState,
    rng: SimRng,
    remaining: u64,
}

impl<'a> Simulation<'a> {
    /// Starts a run on RNG stream 0 of `cfg.seed`.
    pub fn new(
        cfg: SimConfig,
        competency: &'a CompetencyMatrix,
        delta0: DeltaState,
    ) -> Result<Self, ConfigError> {
        Self::with_stream(cfg, competency, delta0, 0)
    }

    pub fn with_stream(
        cfg: SimConfig,
        competency: &'a CompetencyMatrix,
        delta0: DeltaState,
        stream: u64,
    ) -> Result<Self, ConfigError> {
        let cfg = validate_config(cfg, competency)?;
        if delta0.shape() != (cfg.n, cfg.m) {
            return Err(ConfigError::BadInitialState(format!(
                "expected a {}x{} matrix, got {}x{}",
                cfg.n,
                cfg.m,
                delta0.entries.nrows(),
                delta0.entries.ncols()
            )));
        }
        if !delta0.is_finite() {
            return Err(ConfigError::BadInitialState(
                "entries must be finite".to_string(),
            ));
        }
        Ok(Self {
            rng: seeded_rng(cfg.seed, stream),
            remaining: cfg.steps,
            cfg,
            competency,
            state: delta0,
        })
    }

    pub fn state(&self) -> &DeltaState {
        &self.state
    }

    pub fn into_state(self) -> DeltaState {
        self.state
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }
}

impl Iterator for Simulation<'_> {
    type Item = StepTrace;

    fn next(&mut self) -> Option<StepTrace> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let trace = step(&self.state, self.competency, &self.cfg, &mut self.rng);
        self.state = trace.delta_after.clone();
        Some(trace)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let r = usize::try_from(self.remaining).unwrap_or(usize::MAX);
        (r, Some(r))
    }
}

/// Iterates `step` for `cfg.steps` steps starting from `delta0`.
pub fn run<'a>(
    cfg: SimConfig,
    competency: &'a CompetencyMatrix,
    delta0: DeltaState,
) -> Result<Simulation<'a>, ConfigError> {
    Simulation::new(cfg, competency, delta0)
}
