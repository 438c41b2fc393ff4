//! Discrepancy-aware sample reweighting for learning from a small target set
//! with abundant, partly unreliable source data.
//!
//! The training loop alternates between a weight phase, which solves for
//! per-sample weights `q` given per-sample losses and source-target
//! discrepancy scores, and a learner phase of weighted minibatch steps.

pub mod bench;
pub mod config;
pub mod discrepancy;
pub mod error;
pub mod learner;
pub mod oracle;
pub mod proximal;
pub mod trainer;
pub mod types;
pub mod weights;

pub use config::{load_config, seed_rng, Config, Estimator, HyperParams, Method, QUpdate};
pub use error::{BeaconError, Result};
pub use learner::{LearnerState, LossKind};
pub use types::{Dataset, DiscrepancyScores, Domain, LabeledSample, WeightState};
