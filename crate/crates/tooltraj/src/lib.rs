//! Pipeline, model backends, file formats and command-line front end for
//! synthesizing multi-turn tool-use trajectories from text corpora.

pub mod audit;
pub mod backend;
pub mod config;
pub mod io;
pub mod pipeline;
pub mod report;

pub use tooltraj_core as core;
