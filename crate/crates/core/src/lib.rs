//! Measurement toolkit for generative monoculture: the narrowing of an
//! attribute's distribution when a human-written response set is replaced by
//! model generations for the same tasks.
//!
//! The crate is organised by pipeline stage:
//!
//! * [`dataset`] ingests, filters, samples and persists paired source/generated
//!   response sets.
//! * [`generation`] renders prompts and drives an LLM completion endpoint
//!   through a replay cache.
//! * [`sampling`] holds local decoding policies (temperature, top-p, decay).
//! * [`attributes`] turns responses into typed attribute values.
//! * [`fingerprint`] is a winnowing fingerprinter for code similarity.
//! * [`judge`] runs candidate programs against test cases.
//! * [`metrics`] computes dispersion statistics and monoculture verdicts.
//! * [`report`] writes CSV, SVG and JSON artifacts.
//! * [`stub`] contains deterministic stand-ins for the remote services, used
//!   for offline runs and tests.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN.

pub mod attributes;
pub mod client;
pub mod dataset;
pub mod fingerprint;
pub mod generation;
pub mod judge;
pub mod metrics;
pub mod report;
pub mod sampling;
pub mod stub;
pub mod util;
