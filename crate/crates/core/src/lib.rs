//! Seedable simulator for a stochastic consensus process with exponential
//! moving-average memory, plus the oracles used to check it.
//!
//! At each step a random `k`-subset of `m` dimensions is active. Every one of
//! `n` perspectives responds to the active signals relative to its
//! competency and its memory, averages over the active set, and moves its
//! memory toward the group consensus. See [`model`] for the step itself and
//! [`affine`], [`closed_forms`] and [`montecarlo`] for the independent
//! checks.

pub mod affine;
pub mod closed_forms;
pub mod error;
pub mod io;
pub mod model;
pub mod montecarlo;
pub mod numeric;
pub mod scenarios;
pub mod verify;

pub use error::{ConfigError, EnsembleError, MomentsError, OracleError, UnknownScenario};
pub use model::{
    run, seeded_rng, step, step_forced, ActiveSet, CompetencyMatrix, DeltaState, SignalDistribution, SimConfig,
    Simulation, StepTrace,
};
