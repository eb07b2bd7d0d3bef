//! Differentiable MPDO simulation and Stinespring noise-model learning.
//!
//! The forward model is written once against [`linalg_diff::Backend`] and runs
//! either eagerly or on a [`linalg_diff::Trace`] for reverse-mode gradients.

pub mod channels;
pub mod circuit_io;
pub mod error;
pub mod json;
pub mod labs_app;
pub mod linalg_diff;
pub mod losses;
pub mod mpdo;
pub mod noise_model;
pub mod oracle_sim;
pub mod par;
pub mod trainer;

pub use error::{Error, Result};
