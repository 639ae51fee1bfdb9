//! Simulation and protocol library for overlapping multi-owner LoRaWAN
//! networks with a gateway-to-gateway overlay.

// `!(x > 0.0)` is how config validation rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod eval;
pub mod gateway;
pub mod interpred;
pub mod netsim;
pub mod phy;
pub mod rmip;
pub mod types;

pub use types::*;
