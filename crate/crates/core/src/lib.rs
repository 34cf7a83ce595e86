//! Dynamic deep factor graphs for cooperative multi-agent reinforcement learning.
//!
//! The joint action-value is decomposed over a factor graph whose structure is
//! sampled per step by a learned graph policy. Greedy joint actions are found
//! with max-plus message passing over low-rank factor tables.

pub mod checkpoint;
pub mod config;
pub mod env;
pub mod error;
pub mod graph;
pub mod harness;
pub mod learner;
pub mod maxplus;
pub mod metrics;
pub mod nn;
pub mod oracles;
pub mod policy;
pub mod qnet;
pub mod tensor;

pub use error::{Error, Result};
