//! Experiment harness for context-adaptive feature re-weighting: config
//! files, training runs with JSON-lines records and CSV summaries, and
//! verification suites.

pub mod config;
pub mod run;
pub mod verify;
