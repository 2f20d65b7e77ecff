//! Local information geometry of the divergence-form elliptic inverse
//! problem: forward solves, score and information operators, spectral
//! Fisher information, transport-curve obstructions and Monte Carlo checks.

pub mod config;
pub mod elliptic;
pub mod error;
pub mod experiments;
pub mod fixtures;
pub mod grid;
pub mod linalg;
pub mod regression;
pub mod rng;
pub mod score;
pub mod spectral;
pub mod transport;

pub use error::{Error, Result};
