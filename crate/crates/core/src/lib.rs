pub mod ckn;
pub mod cli;
pub mod config;
pub mod data;
pub mod deformation;
pub mod error;
pub mod group;
mod ini;
pub mod kernel;
pub mod nystrom;
pub mod report;
pub mod rng;
pub mod signal;
pub mod stability;
pub mod sweep;
pub mod verify;

pub use error::{Error, Result};
