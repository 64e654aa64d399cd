//! Preference learning with allocation-fairness objectives.
//!
//! Reward gaps within a minibatch are treated as an allocation of resources.
//! Training objectives combine the usual Bradley-Terry utility with a
//! unified fairness metric, either additively (FR) or multiplicatively (FC),
//! for explicit reward models and for DPO policies via implicit rewards.

pub mod allocation;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod fairness;
pub mod losses;
pub mod models;
pub mod trainer;

pub use error::{Error, Result};
