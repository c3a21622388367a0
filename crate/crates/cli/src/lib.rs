//! Experiment driver for the subspace-separation model.

pub mod config;
pub mod experiment;
