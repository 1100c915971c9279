//! Deterministic federated learning simulator for poisoning-assisted
//! membership inference and angle-based robust aggregation.

pub mod aggregation;
pub mod attacks;
pub mod cli;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod theory;

pub use error::{Error, Result};
