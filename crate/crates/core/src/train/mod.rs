//! Optimization, checkpoints, configuration and the training loops.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod export;
pub mod loops;
pub mod optim;
