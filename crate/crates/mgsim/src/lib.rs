//! Simulation engine for an islanded, droop-controlled 33-bus AC microgrid
//! with nine converter-interfaced generators.
//!
//! The crate builds the full network model (hierarchically controlled
//! converters, constant-impedance loads, RL branches), reduces the
//! differential-algebraic system to a state-space ODE that is affine in the
//! renewable forecast error and the secondary control, and provides
//! transient simulation, equilibrium computation, small-signal analysis, and
//! ingestion of 15-minute scenario data.

pub mod analysis;
pub mod cli;
pub mod dynamics;
pub mod equilibrium;
pub mod error;
pub mod grid;
pub mod integrator;
mod manifest;
mod plot;
pub mod reduction;
pub mod scenario;
pub mod state;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
