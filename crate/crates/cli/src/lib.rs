//! Command-line front end and HTTP inference service for tunable-convolution
//! checkpoints.

pub mod cli;
pub mod infer;
pub mod service;

pub use cli::run;
