//! Flexible job-shop scheduling with a reinforcement-learning scheduler that
//! aggregates attention, convolution and cross-attention representations.

pub mod error;
pub mod fjsp;
pub mod io;
pub mod tensor;

pub use error::{Error, Result};
pub mod env;
pub mod policy;
pub mod repr;
pub mod baselines;
pub mod ppo;
pub mod report;
pub mod cli;
