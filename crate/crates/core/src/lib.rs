//! Truncated Fock-space simulation of multi-photon and effective nonlinear absorption
//! of a single optical mode, with the two-mode model it is eliminated from.

pub mod analysis;
pub mod cli;
pub mod dynamics;
pub mod error;
pub mod fock;
pub mod integrator;
pub mod pauli;
pub mod trajectories;
pub mod twomode;

pub use error::{Error, Result};
