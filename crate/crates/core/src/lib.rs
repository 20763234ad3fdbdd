//! Sketch-based tensor program auto-scheduling.
//!
//! A computation is declared as a [`dag::ComputeDag`]. Programs are loop
//! nests in [`ir`] built by replaying a history of rewrite steps from the
//! naive program. [`sketch`] enumerates high-level structures, [`annotate`]
//! completes them at random, [`evolution`] refines them under the learned
//! [`cost_model`], and [`scheduler`] spreads the measurement budget over
//! several tasks. The "hardware" is the deterministic model in [`machine`],
//! with [`interp`] as the correctness oracle.

pub mod annotate;
pub mod cost_model;
pub mod dag;
pub mod error;
pub mod evolution;
pub mod expr;
pub mod features;
pub mod gbdt;
pub mod interp;
pub mod ir;
pub mod layout;
pub mod machine;
pub mod metrics;
pub mod scheduler;
pub mod sketch;
pub mod tuner;
pub mod workloads;

pub use error::{Error, Result};
