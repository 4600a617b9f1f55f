//! Clustered federated learning of per-cluster autoencoder anomaly detectors
//! for heterogeneous IoT fleets.
//!
//! The pipeline: packets are ingested ([`ingest`]) and encoded per packet
//! ([`features`]); every client partially trains a shared initial
//! autoencoder ([`nn`]) and the resulting weights are clustered
//! ([`fingerprint`]); each cluster then runs its own federated training
//! ([`fl`]); per-device thresholds flag anomalous packets ([`anomaly`]).
//! [`synth`] generates the labelled fleet traffic used for experiments and
//! [`pipeline`] wires the stages together.

pub mod anomaly;
pub mod error;
pub mod features;
pub mod fingerprint;
pub mod fl;
pub mod ingest;
pub mod matrix;
pub mod nn;
pub mod pipeline;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};
pub use matrix::Matrix;
