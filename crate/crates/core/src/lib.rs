//! Learning stochastic surrogate dynamics from noisy observations by
//! treating ensemble filters as reinforcement-learning environments and
//! training the surrogate with PPO.

pub mod cli;
pub mod diffmath;
pub mod error;
pub mod filters;
pub mod mdpenv;
pub mod metrics;
pub mod ppo;
pub mod rng;
pub mod surrogate;
pub mod ssm;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
