//! Deterministic simulator for decentralized federated learning on a
//! permissioned multi-channel ledger.
//!
//! The library covers the full pipeline: local neural-network training
//! ([`nn`]), differentially private gradient obfuscation ([`dp`]),
//! byzantine-robust aggregation ([`agg`]), a hash-chained block ledger with
//! signed identities ([`ledger`]), the round/merge protocol that ties them
//! together ([`protocol`]), an adversary harness ([`attacks`]), and the
//! experiment configuration, dataset, and metrics plumbing ([`config`],
//! [`data`], [`metrics`]).
//!
//! Everything is seeded: the same master seed and configuration reproduce
//! bit-identical models, metrics files, and ledger bytes.

pub mod agg;
pub mod attacks;
pub mod config;
pub mod data;
pub mod dp;
pub mod error;
pub mod ledger;
pub mod metrics;
pub mod nn;
pub mod protocol;
pub mod rng;

pub use error::{Error, Result};
pub use nn::{Batch, Dataset, GradientVector, ModelParams, ModelSpec, SpecFingerprint};
