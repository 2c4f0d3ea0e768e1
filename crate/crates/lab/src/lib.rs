//! Experiment harness for the decentralized diffusion laboratory: config,
//! training pipeline, presets, reports and the run manifest.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod policy;
pub mod presets;
pub mod report;
