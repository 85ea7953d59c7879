//! Consistency flow-matching policies over macro-trajectories.

pub mod cli;
pub mod error;
pub mod evaluation;
pub mod flow;
pub mod network;
pub mod objectives;
pub mod rng;
pub mod sampler;
pub mod spectral;
pub mod training;
pub mod trajectory;
pub mod verification;

pub use error::{Error, Result};
