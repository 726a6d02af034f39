//! Experiment harness: config parsing, episode logs, rollout collection,
//! the training loop, and evaluation metrics.

pub mod config;
pub mod eval;
pub mod logs;
pub mod rollout;
pub mod train;
