//! Traffic anomaly detection on road networks.
//!
//! Each road's hourly volumes are stacked one week per column and split by
//! stable principal component pursuit into an expected low-rank pattern,
//! sparse anomalies and noise ([`spcp`]). Anomalies are normalized by the
//! expected volume and flagged ([`scoring`]), then flagged road-hours that are
//! close on the road network and in time are grouped into events
//! ([`events`]). [`synth`] builds planted scenarios for end-to-end evaluation.

pub mod cli;
pub mod error;
pub mod events;
pub mod linalg;
pub mod network;
pub mod pipeline;
pub mod scoring;
pub mod spcp;
pub mod stats;
pub mod synth;
pub mod time;
pub mod timeseries;

pub use error::{Error, Result};
