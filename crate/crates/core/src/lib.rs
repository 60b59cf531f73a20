//! Simulation and inference for single-shot spin-qubit readout traces.

pub mod calibration;
pub mod cli;
pub mod confidence;
pub mod error;
pub mod experiments;
pub mod hmm;
pub mod noise;
pub mod readout;
pub mod rng;
pub mod traces;

pub use error::{Error, Result};
pub use hmm::{FrozenSet, HmmParams, ParamId, PosteriorTable, SignalTrace};
