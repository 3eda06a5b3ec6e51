//! Learned optimization of integer and continuous tuning knobs.
//!
//! The crate trains a two-layer LSTM tuning policy with REINFORCE against a
//! surrogate objective built from per-device neural models, and compares the
//! resulting tuning law with Powell's direction-set method, a Tree-structured
//! Parzen Estimator and uniform random search under matched evaluation budgets.
//!
//! Module map:
//!
//! - [`search_space`]: knob domain, validation, normalization and sampling.
//! - [`surrogate`]: synthetic device data, per-device MLPs and the aggregated objective.
//! - [`agent`]: the LSTM policy, action sampling and analytic policy gradients.
//! - [`trainer`]: rollouts, rewards, REINFORCE updates and the training loop.
//! - [`baselines`]: Powell, TPE and random search.
//! - [`bench`]: budget-matched benchmark protocol and reports.
//! - [`cli`]: the `l2o-tune` command-line pipeline.

pub mod agent;
pub mod baselines;
pub mod bench;
pub mod cli;
pub mod error;
mod linalg;
pub mod objective;
pub mod rng;
pub mod search_space;
pub mod surrogate;
pub mod trainer;

pub use error::{Error, Result};
pub use objective::{FnObjective, Metered, Objective};
pub use search_space::{KnobKind, KnobSpec, SearchSpace, TuningVector, Violation};
