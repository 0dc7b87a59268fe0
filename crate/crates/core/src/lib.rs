pub mod cluster;
pub mod data;
pub mod encoders;
pub mod error;
pub mod gradsuite;
pub mod hal;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod params;
pub mod sgt;
pub mod signef;
pub mod skeleton;
pub mod tasks;
pub mod text;
pub mod train;

pub use error::{Error, Result};
