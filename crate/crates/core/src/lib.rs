//! Bayesian nowcasting of delayed daily event counts.
//!
//! The model pairs a latent epidemic curve (random walk `R`, indicator
//! regression `L`, or random walk with indicator drift `RL`) with a
//! discrete-time hazard model for the reporting delay and a negative binomial
//! observation model on the reporting triangle.

pub mod data;
pub mod delay;
pub mod epi;
pub mod inference;
pub mod nowcast;
pub mod posterior;
pub mod simulate;
pub mod cli;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod scoring;

pub use error::{Error, Result};
