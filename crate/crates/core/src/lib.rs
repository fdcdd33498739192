//! Soil-moisture simulation, LSTM surrogates and zone MPC for closed-loop
//! irrigation.

pub mod closedloop;
pub mod config;
pub mod error;
pub mod excitation;
pub mod exec;
pub mod mismatch;
pub mod nn;
pub mod pipeline;
pub mod soil;
pub mod surrogate;
pub mod zmpc;

pub use error::{Error, Result};
