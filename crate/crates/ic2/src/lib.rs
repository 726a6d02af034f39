//! A desk-scale laboratory for self-supervised control in partially observed
//! gridworlds.
//!
//! The crate bundles a minimal reverse-mode autodiff engine, exact algebra
//! for products of categorical distributions, the TwoRoom environments with
//! an exact per-object Bayes filter, a learned latent state-space model,
//! a family of belief-based intrinsic rewards, and a PPO learner, all wired
//! together by a training/evaluation harness.

pub mod exact_belief;
pub mod harness;
pub mod layers;
pub mod lssm;
pub mod motivation;
pub mod multicat;
pub mod parallel;
pub mod params;
pub mod policy;
pub mod seeding;
pub mod tape;
pub mod worlds;
