//! Inductive cognitive diagnosis over a student-centered graph.
//!
//! Response logs become a graph of students, right/wrong exercise
//! patterns and concepts. Node representations are aggregated per
//! relation, fused by attention and projected to concept space, where an
//! interaction function predicts correctness. New students are diagnosed
//! from their logs with all parameters frozen.

pub mod cagt;
pub mod cli;
pub mod config;
pub mod dataio;
pub mod diffcore;
pub mod error;
pub mod graph;
pub mod inductive;
pub mod interaction;
pub mod io;
pub mod metrics;
pub mod model;
pub mod snapshot;
pub mod synth;
pub mod train;

pub use error::{IcdmError, Result};
