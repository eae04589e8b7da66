//! Retinal vessel segmentation with an uncertainty-weighted auxiliary
//! objective, vessel weight maps and stand-alone upsampling connections.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod imageio;
pub mod lerf;
pub mod network;
pub mod tensor;
pub mod training;
pub mod uncertainty;
pub mod weightmap;

pub use error::{Error, Result};
