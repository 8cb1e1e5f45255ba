//! Multi-agent LLM annotation engine.
//!
//! Runs LLM annotators (real endpoints or seeded simulators) over
//! fixed-choice annotation tasks with single-agent strategies or a
//! consensus-seeking discussion protocol, stores replayable transcripts, and
//! computes accuracy, agreement, significance, upper-bound and behavior-flow
//! reports.

pub mod config;
pub mod datasets;
pub mod discussion;
pub mod domain;
pub mod metrics;
pub mod prompting;
pub mod providers;
pub mod report;
pub mod rng;
pub mod runner;
pub mod strategies;
