//! Library side of the experiment runner: configuration resolution and the
//! train / sweep / prunepoint / report / diagnose commands. The binary in
//! `main.rs` is a thin argument parser over these.

pub mod config;
pub mod harness;

pub use config::ExperimentConfig;
