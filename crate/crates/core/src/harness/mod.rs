//! Experiment orchestration: the desk-scale fixture, per-class suites,
//! sweeps, the intruder quiz and report emission.

pub mod fixture;
pub mod pairs;
pub mod plot;
pub mod quiz;
pub mod suite;
pub mod workspace;

pub use workspace::{ExperimentConfig, Workspace};
