//! Noise-consistent representation learning and randomized-smoothing
//! certification at desk scale.

pub mod analysis;
pub mod certify;
pub mod cli;
pub mod data;
pub mod error;
pub mod finetune;
pub mod io;
pub mod model;
pub mod numerics;
pub mod pretrain;
pub mod schedule;

pub use error::{Error, Result};
