//! Collective anomaly detection over Bitcoin-style transaction data.
//!
//! Wallet addresses are contracted into users, ten flow and neighborhood
//! features are extracted per user, the feature matrix is min-max scaled and
//! clustered with trimmed k-means. The trimmed group (label 0) is the anomaly
//! set, which is then matched against a catalog of known theft cases.
//!
//! Stages, in pipeline order:
//!
//! - [`ingest`]: streaming TSV loaders, address wiping, stage counts
//! - [`contraction`]: address → user mapping (loaded or derived by
//!   common-input ownership)
//! - [`features`]: user graph and the per-user feature matrix
//! - [`normalize`]: min-max scaling
//! - [`cluster`]: trimmed k-means, Lloyd baseline and an exhaustive oracle
//! - [`report`]: cluster summaries and theft-catalog matching
//! - [`synth`]: seeded synthetic data with injected anomalous users
//! - [`pipeline`]: orchestration used by the CLI

pub mod cluster;
pub mod contraction;
pub mod error;
pub mod features;
pub mod ingest;
pub mod normalize;
pub mod pipeline;
pub mod report;
pub mod synth;

pub use error::{Error, Result};
