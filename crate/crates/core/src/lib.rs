pub mod error;
pub mod cli;
pub mod config;
pub mod kernels;
pub mod model_bank;
pub mod nlp;
pub mod ocp;
pub mod pipeline;
pub mod plants;
pub mod plot;
pub mod regression;
pub mod robust;
pub mod smoothing;
pub mod verify;

pub use error::{KpcError, Result};
