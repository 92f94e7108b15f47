//! Multi-level adversarial image attacks against a simulated vision-guided vehicle.

pub mod actor_critic;
pub mod attacker;
pub mod bench_stats;
pub mod config;
pub mod detector;
pub mod dyn_autoencoder;
pub mod error;
pub mod nn;
pub mod sim_env;
pub mod trainer;

pub use error::{Error, Result};
