//! Simulator and schedulers for camera/radar assisted mmWave beam tracking
//! at a roadside base station.
//!
//! The crate is organised bottom-up: [`scenario`] owns configuration and
//! vehicle motion, [`channel`] and [`sensing`] turn information age into
//! beam-tracking error, [`edge`] models the visual-task queues and energy
//! accounting, [`policy`] holds the scheduling baselines, [`nn`] and
//! [`agent`] implement the learned scheduler, and [`harness`] runs and
//! records experiments.

pub mod agent;
pub mod channel;
pub mod edge;
pub mod env;
pub mod error;
pub mod harness;
pub mod nn;
pub mod policy;
pub mod scenario;
pub mod sensing;

pub use error::{Error, Result};
pub use scenario::{default_config, toy_config, SimConfig, VehicleState};
pub use sensing::AoIVector;
