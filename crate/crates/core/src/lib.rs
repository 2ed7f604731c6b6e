//! Autonomous RF spectrum monitoring toolkit.
//!
//! The crate is organized around the life of an episode:
//!
//! - [`env_sim`] samples signal-pair environments from a ranged spec and
//!   evolves the hidden band activity over discrete time.
//! - [`harness`] runs a [`harness::Controller`] against an environment, one
//!   sampled band per step, and records an [`harness::EpisodeLog`].
//! - [`metrics`] scores predictions (instantaneous, block, cumulative and
//!   differential-block IoU) and provides the weighted BCE loss.
//! - [`baselines`] holds the hand-coded controllers and the hypothesis
//!   elimination engine they share.
//! - [`neural`] is a small differentiable substrate (dense, conv-in-frequency,
//!   ConvLSTM, dueling head, Adam) with exact backward passes.
//! - [`dan`] implements the anticipatory agents (ConvLSTM, Predictive and
//!   InfoMax variants) and their training loop.
//! - [`feedback`] contains both experience-feedback loops: field spec
//!   estimation and field state estimation.
//! - [`experiment`] is the config-driven runner behind the `specmon` binary.

pub mod baselines;
pub mod dan;
pub mod env_sim;
pub mod error;
pub mod experiment;
pub mod feedback;
pub mod harness;
pub mod metrics;
pub mod neural;

pub use error::{Error, Result};
