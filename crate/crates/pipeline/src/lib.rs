//! File formats, configuration and stage runner for strategy prediction.
//!
//! The computation lives in `stratpred-core`; this crate reads and writes
//! its inputs and outputs and drives it from the `stratpred` binary.

pub mod artifacts;
pub mod checkpoint;
pub mod config;
pub mod format;
pub mod reports;
pub mod stages;
pub mod transactions;
