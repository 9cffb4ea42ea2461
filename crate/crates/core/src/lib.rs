//! Inverse cost learning for semantic navigation.
//!
//! The pipeline runs a Bayesian multi-class occupancy map over semantic
//! LiDAR scans ([`semantic_map`]), turns class posteriors into a
//! non-negative arrival-cost field with a small convolutional encoder
//! ([`costnet`]), plans with backward A* ([`planner`]) and differentiates the
//! Boltzmann policy likelihood of expert controls back to every parameter
//! through the closed-form visitation subgradient ([`learner`]).

pub mod bench;
pub mod costnet;
pub mod dataset;
pub mod error;
pub mod export;
pub mod gridworld;
pub mod learner;
pub mod metrics;
pub mod planner;
pub mod policy_lab;
pub mod semantic_map;
pub mod sensor;
pub mod tensor;

pub use error::{Error, Result};
