//! Offline reinforcement learning toolkit for slate recommendation.
//!
//! The crate covers the full desk-scale pipeline for studying RL on
//! slate-style recommendation logs:
//!
//! - [`logged`]: parsing, validation, sessionization, padding, and
//!   transformation of raw interaction logs into MDP training samples,
//!   plus dataset splits.
//! - [`env`]: the slate MDP environment with deterministic concatenation
//!   transitions, page-level stochastic feedback, and the unlock rule.
//! - [`user_model`]: purchase-probability models fitted on logs, the
//!   supervised evaluation tasks, and rollout value estimates.
//! - [`understand`]: the data-understanding tool that contrasts greedy and
//!   beam-search sequence scores to diagnose long-term decision structure.
//! - [`policy`]: policy abstractions and lightweight learners (behavior
//!   cloning, constrained batch Q-learning, online REINFORCE).
//! - [`cpe`]: counterfactual policy evaluation (IS, SWIS, DR,
//!   sequential DR) with relative-to-behavior reporting.
//! - [`synth`]: synthetic ground-truth worlds, log generation, and exact
//!   enumeration oracles for testing.

pub mod catalog;
pub mod cpe;
pub mod env;
pub mod features;
pub mod logged;
pub mod metrics;
pub mod policy;
pub mod rng;
pub mod synth;
pub mod understand;
pub mod unlock;
pub mod user_model;

pub use catalog::{Catalog, CatalogError, Item, ItemId};
pub use env::{EpisodeConfig, EnvError, SlateEnv, SlateState, StepResult, UserResponseModel};
pub use features::{DecisionContext, FeatureSpec, PageOutcome};
