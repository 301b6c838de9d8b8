//! Simulation, learning and evaluation of monthly anemia dosing policies for
//! hemodialysis patients.

pub mod cluster;
pub mod cohort;
pub mod error;
pub mod experiment;
pub mod extra_trees;
pub mod fqi;
pub mod mdp;
pub mod metrics;
pub mod policy;
pub mod protocol;
pub mod qlearning;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
