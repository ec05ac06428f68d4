//! Simulation and evaluation toolkit for MIMO-level CSI encryption in
//! Wi-Fi sensing: CSI synthesis, channel encryption and keyed decryption,
//! sensing/communication metrics, Ψ optimization, a keyed sensing sub-model
//! and an attack/evaluation harness.

pub mod channel;
pub mod comm;
pub mod crypto;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod optimizer;
pub mod reference;
pub mod schedule;
pub mod sensing;
pub mod stats;

pub use error::{Error, Result};
pub use num_complex::Complex64;

#[cfg(test)]
mod properties;
