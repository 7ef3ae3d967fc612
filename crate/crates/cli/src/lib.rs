//! Pipeline driver behind the `gemometer` binary: run configuration, stage
//! orchestration with a resumable manifest, and the analyze/report stages.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN.

pub mod analysis;
pub mod config;
pub mod pipeline;
pub mod standalone;
