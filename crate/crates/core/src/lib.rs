pub mod action;
pub mod attribution;
pub mod backends;
pub mod calibrate;
#[cfg(feature = "cli")]
pub mod cli;
pub mod config;
pub mod error;
pub mod image;
pub mod intervene;
pub mod orchestrator;
pub mod mask;
pub mod perturb;
pub mod regions;
pub mod report;
pub mod rng;
pub mod sensitivity;
pub mod testbed;
