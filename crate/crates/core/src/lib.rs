//! Optimal input distributions and rate-power regions for simultaneous
//! wireless information and power transfer when the energy harvester is a
//! nonlinear rectifier with memory.
//!
//! The harvester is modeled as a Markov reward chain whose state is the load
//! voltage at symbol boundaries. Its average reward is maximized over the
//! input pmf by sequential quadratic programming, with the reward gradient
//! estimated from a simulated random walk through likelihood ratios.

pub mod awgn_info;
pub mod bessel;
pub mod config;
pub mod constellation;
pub mod eh_circuit;
pub mod error;
pub mod io;
pub mod markov_reward;
pub mod quadrature;
pub mod region;
pub mod rng;
pub mod sqp;
pub mod surrogate;

pub use error::{Error, Result};
