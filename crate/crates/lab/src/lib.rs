//! Experiment harness for the unlearning lab: corpus and checkpoint
//! persistence, run logs and metric reports, loss-curve plots, scenario
//! orchestration with content-addressed caching, and the CLI.
//!
//! The core crate owns all computation; this crate owns every byte that
//! touches disk. Stage boundaries always round-trip through persistence so
//! that reruns of a scenario are bit-identical to the first run.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus_store;
pub mod error;
pub mod plot;
pub mod report;
pub mod scenario;

pub use error::{LabError, Result};

use unlearn_core::clock::Clock;

/// Wall clock backed by the OS monotonic timer.
#[derive(Debug, Clone, Copy, Default)]
pub struct StdClock;

impl Clock for StdClock {
    fn now_seconds(&self) -> f64 {
        use std::sync::OnceLock;
        use std::time::Instant;
        static EPOCH: OnceLock<Instant> = OnceLock::new();
        let epoch = EPOCH.get_or_init(Instant::now);
        epoch.elapsed().as_secs_f64()
    }
}
