//! Simulation of free-space-to-fiber coupling under angular misalignment,
//! with a power-feedback hill-climbing aligner and the tooling to run,
//! log and analyse alignment experiments.
//!
//! - [`optics`]: Gaussian mode overlap and the angular decay law.
//! - [`actuator`]: stepping piezo channels with direction-dependent gain.
//! - [`plant`]: the two-mirror bench, power meter and perturbations.
//! - [`rig`]: the power/actuator interfaces the aligner is written against.
//! - [`controller`]: the staged hill climber and its CSV log.
//! - [`analysis`]: efficiency traces, jitter statistics, decay-law fits.
//! - [`harness`]: scenario files and seeded batch runs.

pub mod actuator;
pub mod analysis;
pub mod controller;
pub mod harness;
pub mod optics;
pub mod plant;
pub mod rig;
