//! Confidence-aware, trajectory-conditioned consistency-model map prediction and a
//! decentralized, energy-limited multi-robot exploration simulator built around it.

pub mod config;
pub mod error;
pub mod eval;
pub mod grid;
pub mod cmtp;
pub mod cn;
pub mod io;
pub mod metrics;
pub mod mpn;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod planning;
pub mod predict;
pub mod seeds;
pub mod sim;
pub mod worldgen;

pub use error::{Error, Result};
