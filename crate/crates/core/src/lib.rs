//! Simulation, Fisher-information bounds and multi-stage estimation for
//! joint 3D user and 6D hybrid-RIS localization in a downlink OFDM system.

pub mod error;
pub mod estimator;
pub mod experiment;
pub mod fim;
pub mod geometry;
pub mod io;
pub mod scenario;
pub mod signal;

pub use error::{Error, Result};
