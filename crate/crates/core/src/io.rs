//! Run configuration format and output artifacts.
//!
//! A configuration is one JSON document:
//!
//! ```json
//! {
//!   "n": 3, "m": 6, "k": 3, "alpha": 0.02,
//!   "mu": {"kind": "uniform01"},
//!   "competency": [[0.95, 0.90, 0.85, 0.15, 0.10, 0.05], ...],
//!   "seed": 42, "steps": 1000
//! }
//! ```
//!
//! `mu` is `{"kind": "uniform01"}`, `{"kind": "point", "params": {"value": c}}`
//! or `{"kind": "beta", "params": {"a": a, "b": b}}`. The competency matrix may
//! be replaced by a generator rule,
//! `{"rule": "halo", "expert_row": 1, "expert_col": 14, "hi": 0.9, "lo": 0.5}`
//! (one-based indices). Optional keys: `allow_alpha_above_two_thirds` and
//! `delta0` (row-major initial memory).
//!
//! Floats are written with shortest round-trip formatting, so every output
//! file parses back to the exact binary64 values that produced it.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::ConfigError;
use crate::model::{CompetencyMatrix, DeltaState, SignalDistribution, SimConfig, StepTrace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub alpha: f64,
    #[serde(default)]
    pub mu: SignalDistribution,
    pub competency: CompetencySpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub steps: u64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub allow_alpha_above_two_thirds: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta0: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CompetencySpec {
    Matrix(Vec<Vec<f64>>),
    Rule(CompetencyRule),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase", deny_unknown_fields)]
pub enum CompetencyRule {
    /// All entries `lo` except `hi` at the one-based `(expert_row, expert_col)`.
    Halo {
        expert_row: usize,
        expert_col: usize,
        hi: f64,
        lo: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigFileError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error(transparent)]
    Invalid(#[from] ConfigError),
}

/// A fully resolved configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub config: SimConfig,
    pub competency: CompetencyMatrix,
    pub delta0: DeltaState,
}

impl ConfigFile {
    pub fn from_json_str(text: &str) -> Result<Self, ConfigFileError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|err| {
            let path = err.path().to_string();
            let path = if path == "." { "config".to_string() } else { path };
            ConfigFileError::Parse {
                path,
                message: err.into_inner().to_string(),
            }
        })
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            n: self.n,
            m: self.m,
            k: self.k,
            alpha: self.alpha,
            mu: self.mu,
            seed: self.seed,
            steps: self.steps,
            allow_alpha_above_two_thirds: self.allow_alpha_above_two_thirds,
        }
    }

    pub fn competency_matrix(&self) -> Result<CompetencyMatrix, ConfigError> {
        match &self.competency {
            CompetencySpec::Matrix(rows) => CompetencyMatrix::from_rows(rows),
            CompetencySpec::Rule(CompetencyRule::Halo {
                expert_row,
                expert_col,
                hi,
                lo,
            }) => {
                if *expert_row < 1 || *expert_row > self.n || *expert_col < 1 || *expert_col > self.m {
                    return Err(ConfigError::CompetencyShape {
                        expected_rows: self.n,
                        expected_cols: self.m,
                        rows: *expert_row,
                        cols: *expert_col,
                    });
                }
                CompetencyMatrix::single_expert(self.n, self.m, expert_row - 1, expert_col - 1, *hi, *lo)
            }
        }
    }

    /// Validates everything and builds the simulator inputs.
    pub fn resolve(&self) -> Result<Resolved, ConfigError> {
        let competency = self.competency_matrix()?;
        let config = crate::model::validate_config(self.sim_config(), &competency)?;
        let delta0 = match &self.delta0 {
            None => DeltaState::zeros(self.n, self.m),
            Some(rows) => {
                if rows.len() != self.n || rows.iter().any(|r| r.len() != self.m) {
                    return Err(ConfigError::BadInitialState(format!(
                        "expected a {}x{} matrix",
                        self.n, self.m
                    )));
                }
                DeltaState::from_matrix(DMatrix::from_fn(self.n, self.m, |i, j| rows[i][j]))?
            }
        };
        Ok(Resolved {
            config,
            competency,
            delta0,
        })
    }
}

/// Shortest round-trip, locale-independent float formatting.
pub fn format_f64(x: f64) -> String {
    format!("{x:?}")
}

pub fn series_header(n: usize) -> String {
    let mut header = String::from("step,gbar,active");
    for i in 1..=n {
        let _ = write!(header, ",d_{i}");
    }
    header
}

/// One CSV row for a step; the active set is written as `;`-joined one-based labels.
pub fn series_row(trace: &StepTrace) -> String {
    let mut row = format!(
        "{},{},{}",
        trace.delta_after.t,
        format_f64(trace.normalized),
        trace.active
    );
    for d in &trace.learning {
        row.push(',');
        row.push_str(&format_f64(*d));
    }
    row
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaSnapshot {
    pub t: u64,
    pub n: usize,
    pub m: usize,
    /// Row-major.
    pub delta: Vec<Vec<f64>>,
}

impl From<&DeltaState> for DeltaSnapshot {
    fn from(state: &DeltaState) -> Self {
        let (n, m) = state.shape();
        Self {
            t: state.t,
            n,
            m,
            delta: state.rows(),
        }
    }
}
